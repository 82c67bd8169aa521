#include "pointdif/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <zlib.h>

#include "pointdif/errors.hpp"

namespace pointdif {

namespace {

constexpr char kMagic[4] = {'P', 'D', 'C', 'K'};

struct Entry {
  std::string name;
  TensorDtype dtype;
  std::uint32_t rows, cols;
  std::size_t offset = 0;  // payload offset in the file

  std::size_t bytes() const {
    return static_cast<std::size_t>(rows) * cols * (dtype == TensorDtype::f32 ? 4 : 8);
  }
};

class Writer {
 public:
  void u8(std::uint8_t v) { buf.push_back(v); }
  void u16(std::uint16_t v) { raw(v, 2); }
  void u32(std::uint32_t v) { raw(v, 4); }
  void u64(std::uint64_t v) { raw(v, 8); }
  void bytes(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  std::vector<std::uint8_t> buf;

 private:
  void raw(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t end) : buf(b), end_(end) {}
  std::uint64_t raw(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += static_cast<std::size_t>(n);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  void need(std::size_t n) const {
    if (pos + n > end_) throw TruncatedError("checkpoint truncated");
  }
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;

 private:
  std::size_t end_;
};

void add_tensor(std::vector<Entry>& entries, std::vector<const Matrix*>& data, const std::string& name,
                const Matrix& m, TensorDtype dtype) {
  entries.push_back({name, dtype, static_cast<std::uint32_t>(m.rows()),
                     static_cast<std::uint32_t>(m.cols())});
  data.push_back(&m);
}

void write_payload(Writer& w, const Matrix& m, TensorDtype dtype) {
  // Row-major element order.
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (dtype == TensorDtype::f32) w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(m(i, j))));
      else w.u64(std::bit_cast<std::uint64_t>(m(i, j)));
    }
}

Matrix read_payload(const std::vector<std::uint8_t>& buf, const Entry& e) {
  Matrix m(e.rows, e.cols);
  const std::uint8_t* p = buf.data() + e.offset;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (e.dtype == TensorDtype::f32) {
        std::uint32_t v = 0;
        std::memcpy(&v, p, 4);  // little-endian host assumed, as for writing
        m(i, j) = std::bit_cast<float>(v);
        p += 4;
      } else {
        std::uint64_t v = 0;
        std::memcpy(&v, p, 8);
        m(i, j) = std::bit_cast<double>(v);
        p += 8;
      }
    }
  return m;
}

struct Parsed {
  std::vector<std::uint8_t> buf;
  KeyValues meta;
  std::vector<Entry> entries;
  std::map<std::string, std::size_t> index;

  const Entry* find(const std::string& name) const {
    auto it = index.find(name);
    return it == index.end() ? nullptr : &entries[it->second];
  }
};

Parsed parse_file(const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  Parsed p;
  {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    p.buf.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  const auto& buf = p.buf;
  const std::string where = path.string() + ": ";
  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0)
    throw BadMagicError(where + "not a PDCK checkpoint");
  try {
    // Header and manifest first; the trailing checksum is verified once the
    // expected total size is known so truncation reports as such.
    Reader r(buf, buf.size());
    r.pos = 4;
    auto version = static_cast<std::uint32_t>(r.raw(4));
    if (version != kCheckpointVersion)
      throw UnsupportedVersionError(where + "unsupported checkpoint version " + std::to_string(version));
    auto meta_len = static_cast<std::uint32_t>(r.raw(4));
    p.meta = parse_key_values(r.str(meta_len), path.string() + "[meta]");
    auto count = static_cast<std::uint32_t>(r.raw(4));
    for (std::uint32_t i = 0; i < count; ++i) {
      Entry e;
      auto len = static_cast<std::uint16_t>(r.raw(2));
      e.name = r.str(len);
      auto dt = static_cast<std::uint8_t>(r.raw(1));
      if (dt != 1 && dt != 2) throw FormatError(where + "tensor '" + e.name + "' has unknown dtype");
      e.dtype = static_cast<TensorDtype>(dt);
      e.rows = static_cast<std::uint32_t>(r.raw(4));
      e.cols = static_cast<std::uint32_t>(r.raw(4));
      p.index[e.name] = p.entries.size();
      p.entries.push_back(std::move(e));
    }
    std::size_t offset = r.pos;
    for (auto& e : p.entries) {
      e.offset = offset;
      offset += e.bytes();
    }
    const std::size_t expected = offset + 4;
    if (buf.size() < expected)
      throw TruncatedError(where + "checkpoint truncated: expected " + std::to_string(expected) +
                           " bytes, found " + std::to_string(buf.size()));
    if (buf.size() > expected) throw FormatError(where + "trailing bytes after checkpoint payload");
    Reader tail(buf, buf.size());
    tail.pos = offset;
    auto stored = static_cast<std::uint32_t>(tail.raw(4));
    auto actual = static_cast<std::uint32_t>(crc32(0L, buf.data(), static_cast<uInt>(offset)));
    if (stored != actual) throw ChecksumError(where + "checksum mismatch (corrupt payload)");
  } catch (const TruncatedError& e) {
    if (std::string(e.what()).rfind(where, 0) == 0) throw;
    throw TruncatedError(where + e.what());
  } catch (const ParseError& e) {
    throw FormatError(where + "bad metadata: " + e.what());
  }
  return p;
}

}  // namespace

void save_checkpoint(const TrainState& state, const Config& config, const std::filesystem::path& path,
                     TensorDtype dtype) {
  KeyValues meta = to_key_values(config);
  meta["state.step"] = std::to_string(state.step);
  meta["state.epoch"] = std::to_string(state.epoch);
  meta["state.rng"] = state.rng.state();
  meta["state.dtype"] = dtype == TensorDtype::f32 ? "f32" : "f64";

  std::vector<Entry> entries;
  std::vector<const Matrix*> data;
  Writer w;
  const auto& params = state.model.parameters();
  for (const auto& p : params) add_tensor(entries, data, "model/" + p.name, p.value, dtype);
  for (std::size_t i = 0; i < params.size(); ++i)
    add_tensor(entries, data, "adam_m/" + params[i].name, state.adam_m[i], dtype);
  for (std::size_t i = 0; i < params.size(); ++i)
    add_tensor(entries, data, "adam_v/" + params[i].name, state.adam_v[i], dtype);
  Matrix losses = Eigen::Map<const Eigen::RowVectorXd>(state.loss_history.data(),
                                                       static_cast<Eigen::Index>(state.loss_history.size()));
  Matrix lrs = Eigen::Map<const Eigen::RowVectorXd>(state.lr_history.data(),
                                                    static_cast<Eigen::Index>(state.lr_history.size()));
  // Histories are always f64 so they compare exactly after a resume.
  add_tensor(entries, data, "state/loss_history", losses, TensorDtype::f64);
  add_tensor(entries, data, "state/lr_history", lrs, TensorDtype::f64);

  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  const std::string meta_text = format_key_values(meta);
  w.u32(static_cast<std::uint32_t>(meta_text.size()));
  w.bytes(meta_text.data(), meta_text.size());
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u8(static_cast<std::uint8_t>(e.dtype));
    w.u32(e.rows);
    w.u32(e.cols);
  }
  for (std::size_t i = 0; i < entries.size(); ++i) write_payload(w, *data[i], entries[i].dtype);
  w.u32(static_cast<std::uint32_t>(crc32(0L, w.buf.data(), static_cast<uInt>(w.buf.size()))));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

namespace {

void copy_tensor(const Parsed& p, const std::string& name, Matrix& dst) {
  const Entry* e = p.find(name);
  if (e == nullptr) throw ShapeMismatchError("checkpoint is missing tensor '" + name + "'");
  if (e->rows != dst.rows() || e->cols != dst.cols())
    throw ShapeMismatchError("tensor '" + name + "' has shape " + std::to_string(e->rows) + "x" +
                             std::to_string(e->cols) + " in the checkpoint but the model expects " +
                             std::to_string(dst.rows()) + "x" + std::to_string(dst.cols()));
  dst = read_payload(p.buf, *e);
}

std::vector<double> read_history(const Parsed& p, const std::string& name) {
  const Entry* e = p.find(name);
  if (e == nullptr) return {};
  Matrix m = read_payload(p.buf, *e);
  return std::vector<double>(m.data(), m.data() + m.size());
}

void check_no_extra_model_tensors(const Parsed& p, const Model& model) {
  for (const auto& e : p.entries) {
    if (e.name.rfind("model/", 0) != 0) continue;
    if (model.find(e.name.substr(6)) == nullptr)
      throw ShapeMismatchError("checkpoint tensor '" + e.name + "' does not exist in the model");
  }
}

}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Parsed p = parse_file(path);
  KeyValues cfg;
  for (const auto& [k, v] : p.meta)
    if (k.rfind("state.", 0) != 0) cfg[k] = v;
  Config config = resolve_config(cfg, {});
  Model model(config.train.dims, config.train.guidance, 0);
  check_no_extra_model_tensors(p, model);
  for (auto& prm : model.parameters()) copy_tensor(p, "model/" + prm.name, prm.value);
  TrainState state(std::move(model), 0);
  auto& params = state.model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    copy_tensor(p, "adam_m/" + params[i].name, state.adam_m[i]);
    copy_tensor(p, "adam_v/" + params[i].name, state.adam_v[i]);
  }
  try {
    state.step = std::stoll(p.meta.at("state.step"));
    state.epoch = std::stoi(p.meta.at("state.epoch"));
    state.rng.set_state(p.meta.at("state.rng"));
  } catch (const std::out_of_range&) {
    throw FormatError(path.string() + ": checkpoint metadata lacks optimizer state");
  } catch (const std::invalid_argument&) {
    throw FormatError(path.string() + ": bad optimizer state in metadata");
  }
  state.loss_history = read_history(p, "state/loss_history");
  state.lr_history = read_history(p, "state/lr_history");
  return Checkpoint{std::move(config), std::move(state)};
}

void load_weights(Model& model, const std::filesystem::path& path) {
  Parsed p = parse_file(path);
  check_no_extra_model_tensors(p, model);
  // Validate every shape before touching the model.
  std::vector<Matrix> staged;
  for (auto& prm : model.parameters()) {
    Matrix m(prm.value.rows(), prm.value.cols());
    copy_tensor(p, "model/" + prm.name, m);
    staged.push_back(std::move(m));
  }
  for (std::size_t i = 0; i < staged.size(); ++i) model.parameters()[i].value = std::move(staged[i]);
}

std::uint32_t weights_checksum(const Model& model, const std::vector<ParamGroup>& groups) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& p : model.parameters()) {
    if (std::find(groups.begin(), groups.end(), param_group(p.name)) == groups.end()) continue;
    crc = crc32(crc, reinterpret_cast<const Bytef*>(p.value.data()),
                static_cast<uInt>(p.value.size() * static_cast<Eigen::Index>(sizeof(double))));
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace pointdif
