#include "pointdif/point_cloud.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "pointdif/errors.hpp"
#include "pointdif/rng.hpp"

namespace pointdif {

namespace {

constexpr char kCloudMagic[4] = {'P', 'D', 'I', 'F'};

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void check_cloud(const PointCloud& pc) {
  if (pc.empty()) throw InvariantError("point cloud is empty");
  if (!pc.points.allFinite())
    throw InvariantError("point cloud has non-finite coordinates");
}

PointCloud load_xyz(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<Eigen::Vector3d> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    std::istringstream ls(t);
    std::vector<double> vals;
    std::string tok;
    while (ls >> tok) {
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || ptr != tok.data() + tok.size())
        throw ParseError(path.string() + ":" + std::to_string(lineno) +
                             ": not a number: '" + tok + "'",
                         lineno);
      vals.push_back(v);
    }
    if (vals.size() != 3)
      throw ParseError(path.string() + ":" + std::to_string(lineno) +
                           ": expected 3 values, got " + std::to_string(vals.size()),
                       lineno);
    rows.emplace_back(vals[0], vals[1], vals[2]);
  }
  if (rows.empty()) throw EmptyInputError(path.string() + ": no points");
  PointCloud pc;
  pc.points.resize(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i)
    pc.points.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return pc;
}

void save_xyz(const PointCloud& pc, const std::filesystem::path& path) {
  check_cloud(pc);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  char buf[128];
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", pc.points(i, 0),
                  pc.points(i, 1), pc.points(i, 2));
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::uint8_t> encode_bin(const PointCloud& pc) {
  check_cloud(pc);
  std::vector<std::uint8_t> out(kCloudMagic, kCloudMagic + 4);
  put_u32(out, kCloudFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(pc.size()));
  out.reserve(out.size() + static_cast<std::size_t>(pc.size()) * 12);
  for (Eigen::Index i = 0; i < pc.size(); ++i)
    for (int j = 0; j < 3; ++j)
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(pc.points(i, j))));
  return out;
}

PointCloud decode_bin(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCloudMagic, 4) != 0)
    throw BadMagicError("bad magic: not a PDIF point cloud");
  if (bytes.size() < 12) throw TruncatedError("truncated PDIF header");
  std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kCloudFormatVersion)
    throw UnsupportedVersionError("unsupported PDIF version " + std::to_string(version));
  std::uint32_t n = get_u32(bytes.data() + 8);
  std::size_t need = 12 + static_cast<std::size_t>(n) * 12;
  if (bytes.size() < need)
    throw TruncatedError("truncated PDIF payload: header says " + std::to_string(n) +
                         " points, file holds " + std::to_string((bytes.size() - 12) / 12));
  if (bytes.size() > need) throw FormatError("trailing bytes after PDIF payload");
  PointCloud pc;
  pc.points.resize(n, 3);
  const std::uint8_t* p = bytes.data() + 12;
  for (std::uint32_t i = 0; i < n; ++i)
    for (int j = 0; j < 3; ++j, p += 4) pc.points(i, j) = std::bit_cast<float>(get_u32(p));
  check_cloud(pc);
  return pc;
}

PointCloud load_bin(const std::filesystem::path& path) {
  try {
    return decode_bin(read_file(path));
  } catch (const FormatError& e) {
    // Re-throw the same type with the path attached.
    std::string msg = path.string() + ": " + e.what();
    if (dynamic_cast<const BadMagicError*>(&e)) throw BadMagicError(msg);
    if (dynamic_cast<const UnsupportedVersionError*>(&e)) throw UnsupportedVersionError(msg);
    if (dynamic_cast<const TruncatedError*>(&e)) throw TruncatedError(msg);
    throw FormatError(msg);
  }
}

void save_bin(const PointCloud& pc, const std::filesystem::path& path) {
  auto bytes = encode_bin(pc);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

PointCloud normalize_unit_sphere(const PointCloud& pc) {
  check_cloud(pc);
  Eigen::RowVector3d centroid = pc.points.colwise().mean();
  Points centered = pc.points.rowwise() - centroid;
  double max_norm = centered.rowwise().norm().maxCoeff();
  if (max_norm == 0.0) return PointCloud(Points::Zero(pc.size(), 3));
  return PointCloud(centered / max_norm);
}

PointCloud subsample(const PointCloud& pc, Eigen::Index m, std::uint64_t seed) {
  check_cloud(pc);
  if (m < 1 || m > pc.size())
    throw ValidationError("subsample: need 1 <= m <= n, got m=" + std::to_string(m) +
                          " n=" + std::to_string(pc.size()));
  Rng rng(seed);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(pc.size()));
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first m slots are a uniform m-subset.
  for (Eigen::Index i = 0; i < m; ++i) {
    auto j = rng.uniform_int(i, pc.size() - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  Points out(m, 3);
  for (Eigen::Index i = 0; i < m; ++i) out.row(i) = pc.points.row(idx[static_cast<std::size_t>(i)]);
  return PointCloud(std::move(out));
}

ShapeKind parse_shape_kind(std::string_view name) {
  if (name == "sphere") return ShapeKind::sphere;
  if (name == "cube") return ShapeKind::cube;
  if (name == "torus") return ShapeKind::torus;
  throw ValidationError("unknown shape kind '" + std::string(name) + "'");
}

std::string_view to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::cube: return "cube";
    case ShapeKind::torus: return "torus";
  }
  return "?";
}

PointCloud synth_shape(ShapeKind kind, Eigen::Index n, std::uint64_t seed) {
  if (n < 1) throw ValidationError("synth_shape: n must be >= 1");
  Rng rng(seed);
  Points pts(n, 3);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (Eigen::Index i = 0; i < n; ++i) {
    switch (kind) {
      case ShapeKind::sphere: {
        Eigen::RowVector3d v;
        double norm = 0.0;
        do {
          v << rng.normal(), rng.normal(), rng.normal();
          norm = v.norm();
        } while (norm < 1e-12);
        pts.row(i) = v / norm;
        break;
      }
      case ShapeKind::cube: {
        auto face = rng.uniform_int(0, 5);
        int axis = static_cast<int>(face / 2);
        double sign = (face % 2 == 0) ? 1.0 : -1.0;
        Eigen::RowVector3d v;
        for (int a = 0; a < 3; ++a) v(a) = (a == axis) ? sign : rng.uniform(-1.0, 1.0);
        pts.row(i) = v;
        break;
      }
      case ShapeKind::torus: {
        double u = rng.uniform(0.0, two_pi);
        double w = rng.uniform(0.0, two_pi);
        double ring = kTorusMajor + kTorusMinor * std::cos(w);
        pts.row(i) << ring * std::cos(u), ring * std::sin(u), kTorusMinor * std::sin(w);
        break;
      }
      default:
        throw ValidationError("unknown shape kind");
    }
  }
  return PointCloud(std::move(pts));
}

std::vector<std::size_t> ToyDataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == split) out.push_back(i);
  return out;
}

ToyDataset make_toy_dataset(int per_class, Eigen::Index n_points, std::uint64_t seed) {
  if (per_class < 2) throw ValidationError("make_toy_dataset: per_class must be >= 2");
  if (n_points < 1) throw ValidationError("make_toy_dataset: n_points must be >= 1");
  int n_train = std::clamp(per_class * 4 / 5, 1, per_class - 1);
  ToyDataset ds;
  std::uint64_t stream = 0;
  for (int label = 0; label < kNumToyClasses; ++label) {
    for (int i = 0; i < per_class; ++i) {
      auto raw = synth_shape(static_cast<ShapeKind>(label), n_points, derive_seed(seed, stream++));
      ds.clouds.push_back(normalize_unit_sphere(raw));
      ds.labels.push_back(label);
      ds.splits.push_back(i < n_train ? Split::train : Split::val);
    }
  }
  return ds;
}

void save_dataset(const ToyDataset& ds, const std::filesystem::path& dir) {
  if (ds.clouds.size() != ds.labels.size() || ds.clouds.size() != ds.splits.size())
    throw InvariantError("save_dataset: clouds, labels and splits differ in length");
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "file,label,split\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "cloud_%05zu.bin", i);
    save_bin(ds.clouds[i], dir / name);
    manifest << name << ',' << ds.labels[i] << ',' << (ds.splits[i] == Split::train ? "train" : "val")
             << '\n';
  }
  std::ofstream out(dir / "labels.csv", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "labels.csv").string());
  out << manifest.str();
  if (!out) throw IoError("write failed: " + (dir / "labels.csv").string());
}

ToyDataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest = dir / "labels.csv";
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open dataset manifest " + manifest.string());
  ToyDataset ds;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    std::istringstream ss(line);
    std::string file, label, split;
    if (!std::getline(ss, file, ',') || !std::getline(ss, label, ',') || !std::getline(ss, split))
      throw ParseError(manifest.string() + ": expected file,label,split", line_no);
    int lab = -1;
    auto [ptr, ec] = std::from_chars(label.data(), label.data() + label.size(), lab);
    if (ec != std::errc() || ptr != label.data() + label.size() || lab < 0 || lab >= kNumToyClasses)
      throw ParseError(manifest.string() + ": bad label '" + label + "'", line_no);
    if (split != "train" && split != "val")
      throw ParseError(manifest.string() + ": bad split '" + split + "'", line_no);
    ds.clouds.push_back(load_bin(dir / file));
    ds.labels.push_back(lab);
    ds.splits.push_back(split == "train" ? Split::train : Split::val);
  }
  if (ds.clouds.empty()) throw EmptyInputError("dataset " + dir.string() + " lists no clouds");
  if (ds.indices(Split::train).empty() || ds.indices(Split::val).empty())
    throw ValidationError("dataset " + dir.string() + " needs non-empty train and val splits");
  return ds;
}

}  // namespace pointdif
