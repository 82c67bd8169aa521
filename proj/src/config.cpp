#include "pointdif/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "pointdif/errors.hpp"

namespace pointdif {

Config Config::for_profile(std::string_view profile) {
  Config c;
  if (profile == "desk") return c;
  if (profile == "paper") {
    c.profile = "paper";
    c.train = TrainConfig::paper();
    c.data_points = 1024;
    return c;
  }
  throw ValidationError("unknown profile '" + std::string(profile) + "' (expected desk or paper)");
}

namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double to_double(const std::string& s) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ValidationError("not a number: '" + s + "'");
  return v;
}

long long to_int(const std::string& s) {
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ValidationError("not an integer: '" + s + "'");
  return v;
}

std::uint64_t to_u64(const std::string& s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ValidationError("not an unsigned integer: '" + s + "'");
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ValidationError("not a boolean: '" + s + "'");
}

std::vector<int> to_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(to_int(trim(item))));
  if (out.empty()) throw ValidationError("empty list");
  return out;
}

std::string from_int_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct KeySpec {
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

#define POINTDIF_INT(path)                                                      \
  KeySpec {                                                                     \
    [](const Config& c) { return std::to_string(c.path); },                     \
        [](Config& c, const std::string& v) {                                   \
          c.path = static_cast<std::decay_t<decltype(c.path)>>(to_int(v));      \
        }                                                                       \
  }
#define POINTDIF_DOUBLE(path)                                                   \
  KeySpec {                                                                     \
    [](const Config& c) { return fmt(c.path); },                                \
        [](Config& c, const std::string& v) { c.path = to_double(v); }          \
  }
#define POINTDIF_BOOL(path)                                                     \
  KeySpec {                                                                     \
    [](const Config& c) { return std::string(c.path ? "true" : "false"); },     \
        [](Config& c, const std::string& v) { c.path = to_bool(v); }            \
  }

const std::map<std::string, KeySpec>& registry() {
  static const std::map<std::string, KeySpec> keys = {
      {"model.dim", POINTDIF_INT(train.dims.dim)},
      {"model.heads", POINTDIF_INT(train.dims.heads)},
      {"model.blocks", POINTDIF_INT(train.dims.blocks)},
      {"model.mlp_ratio", POINTDIF_INT(train.dims.mlp_ratio)},
      {"model.cond_dim", POINTDIF_INT(train.dims.cond_dim)},
      {"model.time_dim", POINTDIF_INT(train.dims.time_dim)},
      {"model.pos_hidden", POINTDIF_INT(train.dims.pos_hidden)},
      {"model.canet_hidden", POINTDIF_INT(train.dims.canet_hidden)},
      {"model.attn_dim", POINTDIF_INT(train.dims.attn_dim)},
      {"model.cond_tokens", POINTDIF_INT(train.dims.cond_tokens)},
      {"model.embed_widths",
       {[](const Config& c) { return from_int_list(c.train.dims.embed_widths); },
        [](Config& c, const std::string& v) { c.train.dims.embed_widths = to_int_list(v); }}},
      {"model.pcnet_dims",
       {[](const Config& c) { return from_int_list(c.train.dims.pcnet_dims); },
        [](Config& c, const std::string& v) { c.train.dims.pcnet_dims = to_int_list(v); }}},
      {"model.guidance",
       {[](const Config& c) { return std::string(to_string(c.train.guidance)); },
        [](Config& c, const std::string& v) { c.train.guidance = parse_guidance_mode(v); }}},
      {"patch.count", POINTDIF_INT(train.patches.num_patches)},
      {"patch.size", POINTDIF_INT(train.patches.patch_size)},
      {"patch.random_start", POINTDIF_BOOL(train.patches.random_start)},
      {"diffusion.steps", POINTDIF_INT(train.steps)},
      {"diffusion.beta_start", POINTDIF_DOUBLE(train.beta_start)},
      {"diffusion.beta_end", POINTDIF_DOUBLE(train.beta_end)},
      {"diffusion.remainder",
       {[](const Config& c) {
          return std::string(c.train.timesteps.remainder == RemainderPolicy::drop ? "drop" : "absorb");
        },
        [](Config& c, const std::string& v) {
          if (v == "drop") c.train.timesteps.remainder = RemainderPolicy::drop;
          else if (v == "absorb") c.train.timesteps.remainder = RemainderPolicy::absorb;
          else throw ValidationError("expected drop or absorb, got '" + v + "'");
        }}},
      {"train.h", POINTDIF_INT(train.timesteps.h)},
      {"train.interval",
       {[](const Config& c) {
          const auto& ts = c.train.timesteps;
          return ts.restricted ? std::to_string(ts.restriction.lo) + ":" + std::to_string(ts.restriction.hi)
                               : std::string("full");
        },
        [](Config& c, const std::string& v) {
          auto& ts = c.train.timesteps;
          if (v == "full") {
            ts.restricted = false;
            return;
          }
          auto colon = v.find(':');
          if (colon == std::string::npos) throw ValidationError("expected 'full' or 'lo:hi', got '" + v + "'");
          ts.restricted = true;
          ts.restriction = {static_cast<int>(to_int(v.substr(0, colon))),
                            static_cast<int>(to_int(v.substr(colon + 1)))};
        }}},
      {"train.mask_ratio", POINTDIF_DOUBLE(train.mask_ratio)},
      {"train.epochs", POINTDIF_INT(train.epochs)},
      {"train.batch_size", POINTDIF_INT(train.batch_size)},
      {"train.lr", POINTDIF_DOUBLE(train.lr)},
      {"train.weight_decay", POINTDIF_DOUBLE(train.weight_decay)},
      {"train.adam_beta1", POINTDIF_DOUBLE(train.adam_beta1)},
      {"train.adam_beta2", POINTDIF_DOUBLE(train.adam_beta2)},
      {"train.adam_eps", POINTDIF_DOUBLE(train.adam_eps)},
      {"train.seed",
       {[](const Config& c) { return std::to_string(c.train.seed); },
        [](Config& c, const std::string& v) { c.train.seed = to_u64(v); }}},
      {"augment.enabled", POINTDIF_BOOL(train.augment.enabled)},
      {"augment.scale_min", POINTDIF_DOUBLE(train.augment.scale_min)},
      {"augment.scale_max", POINTDIF_DOUBLE(train.augment.scale_max)},
      {"augment.translate", POINTDIF_DOUBLE(train.augment.translate)},
      {"data.points", POINTDIF_INT(data_points)},
      {"data.per_class", POINTDIF_INT(data_per_class)},
      {"probe.steps", POINTDIF_INT(eval.probe.steps)},
      {"probe.lr", POINTDIF_DOUBLE(eval.probe.lr)},
      {"probe.l2", POINTDIF_DOUBLE(eval.probe.l2)},
      {"eval.recon_shapes", POINTDIF_INT(eval.recon_shapes)},
      {"eval.recon_mask_ratio", POINTDIF_DOUBLE(eval.recon_mask_ratio)},
  };
  return keys;
}

#undef POINTDIF_INT
#undef POINTDIF_DOUBLE
#undef POINTDIF_BOOL

}  // namespace

KeyValues parse_key_values(std::string_view text, const std::string& source) {
  KeyValues kv;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ParseError(source + ":" + std::to_string(lineno) + ": expected 'key = value'", lineno);
    std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
    if (key.empty())
      throw ParseError(source + ":" + std::to_string(lineno) + ": missing key", lineno);
    kv[key] = value;
  }
  return kv;
}

KeyValues load_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str(), path.string());
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k{"profile"};
    for (const auto& [name, spec] : registry()) k.push_back(name);
    return k;
  }();
  return keys;
}

void apply_key_values(Config& config, const KeyValues& kv) {
  std::vector<std::string> unknown, bad;
  const auto& reg = registry();
  for (const auto& [key, value] : kv) {
    if (key == "profile") continue;
    auto it = reg.find(key);
    if (it == reg.end()) {
      unknown.push_back(key);
      continue;
    }
    try {
      it->second.set(config, value);
    } catch (const ValidationError& e) {
      bad.push_back(key + ": " + e.what());
    }
  }
  if (unknown.empty() && bad.empty()) return;
  std::ostringstream os;
  os << "invalid configuration:";
  for (const auto& k : unknown) os << "\n  - unknown key '" << k << "'";
  for (const auto& b : bad) os << "\n  - " << b;
  throw ValidationError(os.str());
}

KeyValues to_key_values(const Config& config) {
  KeyValues kv{{"profile", config.profile}};
  for (const auto& [name, spec] : registry()) kv[name] = spec.get(config);
  return kv;
}

Config resolve_config(const KeyValues& file_values, const KeyValues& flag_values) {
  std::string profile = "desk";
  if (auto it = file_values.find("profile"); it != file_values.end()) profile = it->second;
  if (auto it = flag_values.find("profile"); it != flag_values.end()) profile = it->second;
  Config c = Config::for_profile(profile);
  // Collect errors across both sources so one message lists everything.
  std::vector<std::string> errors;
  for (const auto* src : {&file_values, &flag_values}) {
    try {
      apply_key_values(c, *src);
    } catch (const ValidationError& e) {
      errors.push_back(e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg;
    for (const auto& e : errors) msg += (msg.empty() ? "" : "\n") + e;
    throw ValidationError(msg);
  }
  if (c.data_points < 1) throw ValidationError("data.points must be >= 1");
  if (c.data_per_class < 2) throw ValidationError("data.per_class must be >= 2");
  c.train.validate();
  return c;
}

}  // namespace pointdif
