#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pointdif/checkpoint.hpp"
#include "pointdif/config.hpp"
#include "pointdif/errors.hpp"
#include "pointdif/evaluation.hpp"

namespace fs = std::filesystem;
using namespace pointdif;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

// Options shared by every subcommand that resolves a Config.
struct CommonOptions {
  std::string config_file;
  std::string profile;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::optional<double> beta_start, beta_end, mask_ratio;
  std::optional<int> h, epochs;
  std::optional<int> per_class, points;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool model_flags) {
  cmd->add_option("--config", o.config_file, "key = value config file");
  cmd->add_option("--profile", o.profile, "desk or paper");
  cmd->add_option("--set", o.sets, "override, key=value (repeatable)");
  cmd->add_option("--seed", o.seed, "run seed (default: POINTDIF_SEED, else 0)");
  if (!model_flags) return;
  cmd->add_option("--T", o.steps, "diffusion steps");
  cmd->add_option("--beta-start", o.beta_start);
  cmd->add_option("--beta-end", o.beta_end);
  cmd->add_option("--mask-ratio", o.mask_ratio);
  cmd->add_option("--h", o.h, "time steps drawn per cloud");
  cmd->add_option("--epochs", o.epochs);
  cmd->add_option("--per-class", o.per_class, "toy clouds per class");
  cmd->add_option("--points", o.points, "points per toy cloud");
}

template <typename T>
std::string to_text(T v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

Config resolve(const CommonOptions& o) {
  KeyValues file = o.config_file.empty() ? KeyValues{} : load_key_values(o.config_file);
  KeyValues flags;
  for (const auto& s : o.sets) {
    auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("--set expects key=value, got '" + s + "'");
    flags[s.substr(0, eq)] = s.substr(eq + 1);
  }
  if (!o.profile.empty()) flags["profile"] = o.profile;
  if (o.steps) flags["diffusion.steps"] = to_text(*o.steps);
  if (o.beta_start) flags["diffusion.beta_start"] = to_text(*o.beta_start);
  if (o.beta_end) flags["diffusion.beta_end"] = to_text(*o.beta_end);
  if (o.mask_ratio) flags["train.mask_ratio"] = to_text(*o.mask_ratio);
  if (o.h) flags["train.h"] = to_text(*o.h);
  if (o.epochs) flags["train.epochs"] = to_text(*o.epochs);
  if (o.per_class) flags["data.per_class"] = to_text(*o.per_class);
  if (o.points) flags["data.points"] = to_text(*o.points);
  if (o.seed) {
    flags["train.seed"] = to_text(*o.seed);
  } else if (!file.count("train.seed") && !flags.count("train.seed")) {
    if (const char* env = std::getenv("POINTDIF_SEED")) flags["train.seed"] = env;
  }
  return resolve_config(file, flags);
}

// Output directories must be empty unless --force.
void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw ValidationError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force)
      throw ValidationError("output directory " + dir.string() + " is not empty (use --force)");
  }
  fs::create_directories(dir);
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ValidationError(what + " path is required");
  if (!fs::exists(path)) throw IoError(what + " not found: " + path);
}

ToyDataset dataset_for(const std::string& data_dir, const Config& cfg) {
  if (!data_dir.empty()) return load_dataset(data_dir);
  return make_toy_dataset(cfg.data_per_class, cfg.data_points, cfg.train.seed);
}

PointCloud load_any(const fs::path& path) {
  return path.extension() == ".bin" ? load_bin(path) : load_xyz(path);
}

std::vector<double> parse_ratios(const std::string& text) {
  std::vector<double> out;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ValidationError("bad mask ratio '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationError("--ratios is empty");
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

int cmd_make_data(const CommonOptions& o, const std::string& out, bool force) {
  Config cfg = resolve(o);
  if (out.empty()) throw ValidationError("--out is required");
  ToyDataset ds = make_toy_dataset(cfg.data_per_class, cfg.data_points, cfg.train.seed);
  prepare_out_dir(out, force);
  save_dataset(ds, out);
  std::cerr << "wrote " << ds.size() << " clouds to " << out << "\n";
  return 0;
}

int cmd_pretrain(const CommonOptions& o, const std::string& data_dir, const std::string& out, bool force,
                 bool resume) {
  Config cfg = resolve(o);
  if (out.empty()) throw ValidationError("--out is required");
  const fs::path ckpt = fs::path(out) / "checkpoint.pdck";
  const fs::path log = fs::path(out) / "log.csv";
  std::optional<TrainState> state;
  if (resume) {
    require_file(ckpt.string(), "checkpoint");
    Checkpoint ck = load_checkpoint(ckpt);
    if (!(ck.config.train.dims == cfg.train.dims) || ck.config.train.guidance != cfg.train.guidance)
      throw ValidationError("checkpoint model does not match the requested configuration");
    state.emplace(std::move(ck.state));
  } else {
    prepare_out_dir(out, force);
    state.emplace(init_state(cfg.train));
  }
  ToyDataset ds = dataset_for(data_dir, cfg);
  auto write_log = [&](const TrainState& s) {
    std::ostringstream ss;
    ss << "epoch,mean_loss,lr\n";
    char buf[96];
    for (std::size_t e = 0; e < s.loss_history.size(); ++e) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", e + 1, s.loss_history[e], s.lr_history[e]);
      ss << buf;
    }
    write_text(log.string(), ss.str());
  };
  fit(train_clouds(ds), cfg.train, *state, -1, [&](const TrainState& s) {
    std::cerr << "epoch " << s.epoch << "/" << cfg.train.epochs << " loss " << s.loss_history.back() << "\n";
    save_checkpoint(s, cfg, ckpt);
    write_log(s);
  });
  save_checkpoint(*state, cfg, ckpt);
  write_log(*state);
  return 0;
}

int cmd_generate(const CommonOptions& o, const std::string& checkpoint, const std::string& input,
                 double mask, const std::string& out, bool force) {
  require_file(checkpoint, "checkpoint");
  require_file(input, "input cloud");
  if (out.empty()) throw ValidationError("--out is required");
  if (!(mask >= 0.0 && mask < 1.0)) throw ValidationError("--mask must lie in [0, 1)");
  Checkpoint ck = load_checkpoint(checkpoint);
  std::uint64_t seed = ck.config.train.seed;
  if (o.seed) seed = *o.seed;
  else if (const char* env = std::getenv("POINTDIF_SEED")) seed = std::strtoull(env, nullptr, 10);
  PointCloud cloud = normalize_unit_sphere(load_any(input));
  const auto& patches = ck.config.train.patches;
  if (cloud.size() < patches.num_patches || cloud.size() < patches.patch_size)
    throw ValidationError("input has " + std::to_string(cloud.size()) + " points; the model needs at least " +
                          std::to_string(std::max(patches.num_patches, patches.patch_size)));
  if (masked_count(patches.num_patches, mask) >= patches.num_patches)
    throw ValidationError("--mask leaves no visible patch");
  Reconstruction r = reconstruct(ck.state.model, ck.config.train.schedule(), cloud, mask, seed, patches);
  prepare_out_dir(out, force);
  save_xyz(r.input, fs::path(out) / "input.xyz");
  save_xyz(r.masked_view, fs::path(out) / "masked.xyz");
  save_xyz(r.generated, fs::path(out) / "generated.xyz");
  std::printf("chamfer,%.17g\n", r.chamfer);
  return 0;
}

int cmd_probe(const CommonOptions& o, const std::string& checkpoint, const std::string& data_dir,
              bool random_init) {
  require_file(checkpoint, "checkpoint");
  Checkpoint ck = load_checkpoint(checkpoint);
  Config cfg = ck.config;
  if (o.seed) cfg.train.seed = *o.seed;
  ToyDataset ds = dataset_for(data_dir, cfg);
  const Model* model = &ck.state.model;
  std::optional<Model> fresh;
  if (random_init) {
    fresh.emplace(cfg.train.dims, cfg.train.guidance, derive_seed(cfg.train.seed, 1));
    model = &*fresh;
  }
  ProbeResult r = linear_probe(*model, ds, cfg.train.patches, cfg.eval.probe);
  std::printf("accuracy,%.17g\n", r.accuracy);
  for (std::size_t c = 0; c < r.per_class.size(); ++c)
    std::printf("class_%zu,%.17g\n", c, r.per_class[c]);
  return 0;
}

int cmd_ablate(const CommonOptions& o, const std::string& mode, const std::string& data_dir,
               const std::string& out, const std::string& ratios) {
  Config cfg = resolve(o);
  ToyDataset ds = dataset_for(data_dir, cfg);
  AblationReport report;
  if (mode == "intervals") {
    report = interval_ablation(ds, recurrent_intervals(cfg.train.steps, cfg.train.timesteps.h,
                                                       cfg.train.timesteps.remainder),
                               cfg.train, cfg.eval);
  } else if (mode == "mask") {
    report = mask_ratio_sweep(ds, parse_ratios(ratios), cfg.train, cfg.eval);
  } else if (mode == "guidance") {
    report = guidance_ablation(ds, {GuidanceMode::pcnet, GuidanceMode::concat, GuidanceMode::cross_attention},
                               cfg.train, cfg.eval);
  } else {
    throw ValidationError("--mode must be intervals, mask or guidance");
  }
  write_text(out, report.to_csv());
  return 0;
}

int cmd_inspect_schedule(const CommonOptions& o, const std::string& out) {
  Config cfg = resolve(o);
  NoiseSchedule s = cfg.train.schedule();
  std::ostringstream ss;
  ss << "t,beta,alpha_bar,beta_tilde\n";
  char buf[128];
  for (int t = 1; t <= s.steps(); ++t) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", t, s.beta(t), s.alpha_bar(t), s.beta_tilde(t));
    ss << buf;
  }
  write_text(out, ss.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based point cloud pre-training"};
  app.set_help_flag("--help", "print help");
  app.require_subcommand(1);

  CommonOptions o;
  std::string out, data, checkpoint, input, mode, ratios = "0,0.4,0.8";
  bool force = false, resume = false, random_init = false;
  double mask = 0.8;

  auto* make_data = app.add_subcommand("make-data", "write the labeled toy dataset");
  add_common(make_data, o, true);
  make_data->add_option("--out", out, "output directory")->required();
  make_data->add_flag("--force", force, "allow a non-empty output directory");

  auto* pretrain = app.add_subcommand("pretrain", "pre-train and write checkpoint + log");
  add_common(pretrain, o, true);
  pretrain->add_option("--data", data, "dataset directory (default: generate in memory)");
  pretrain->add_option("--out", out, "run directory")->required();
  pretrain->add_flag("--force", force);
  pretrain->add_flag("--resume", resume, "continue from <out>/checkpoint.pdck");

  auto* generate = app.add_subcommand("generate", "masked conditional reconstruction");
  add_common(generate, o, false);
  generate->add_option("--checkpoint", checkpoint)->required();
  generate->add_option("--input", input, ".xyz or .bin cloud")->required();
  generate->add_option("--mask", mask, "mask ratio");
  generate->add_option("--out", out, "output directory")->required();
  generate->add_flag("--force", force);

  auto* probe = app.add_subcommand("probe", "linear probe on frozen encoder features");
  add_common(probe, o, false);
  probe->add_option("--checkpoint", checkpoint)->required();
  probe->add_option("--data", data);
  probe->add_flag("--random-init", random_init, "probe a freshly initialized model instead");

  auto* ablate = app.add_subcommand("ablate", "time-interval, mask-ratio or guidance ablation");
  add_common(ablate, o, true);
  ablate->add_option("--mode", mode)->required()->check(CLI::IsMember({"intervals", "mask", "guidance"}));
  ablate->add_option("--data", data);
  ablate->add_option("--ratios", ratios, "comma-separated mask ratios");
  ablate->add_option("--out", out, "CSV path (default stdout)");
  ablate->add_flag("--force", force);

  auto* inspect = app.add_subcommand("inspect-schedule", "print t, beta, alpha_bar, beta_tilde as CSV");
  add_common(inspect, o, true);
  inspect->add_option("--out", out, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*make_data) return cmd_make_data(o, out, force);
    if (*pretrain) return cmd_pretrain(o, data, out, force, resume);
    if (*generate) return cmd_generate(o, checkpoint, input, mask, out, force);
    if (*probe) return cmd_probe(o, checkpoint, data, random_init);
    if (*ablate) {
      if (!out.empty() && fs::exists(out) && !force)
        throw ValidationError(out + " exists (use --force)");
      return cmd_ablate(o, mode, data, out, ratios);
    }
    if (*inspect) return cmd_inspect_schedule(o, out);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
