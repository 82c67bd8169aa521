#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace pointdif {

using Matrix = Eigen::MatrixXd;
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3>;

// An ordered set of n >= 1 finite 3D points, one per row.
struct PointCloud {
  Points points;

  PointCloud() = default;
  explicit PointCloud(Points p) : points(std::move(p)) {}

  Eigen::Index size() const { return points.rows(); }
  bool empty() const { return points.rows() == 0; }
};

// Throws InvariantError unless the cloud is non-empty with finite coordinates.
void check_cloud(const PointCloud& pc);

// ASCII: one "x y z" triple per line, '#' comments and blank lines skipped.
PointCloud load_xyz(const std::filesystem::path& path);
void save_xyz(const PointCloud& pc, const std::filesystem::path& path);

// Binary: "PDIF", u32 version (1), u32 n, then n*3 float32, all little-endian.
inline constexpr std::uint32_t kCloudFormatVersion = 1;
PointCloud load_bin(const std::filesystem::path& path);
void save_bin(const PointCloud& pc, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_bin(const PointCloud& pc);
PointCloud decode_bin(const std::vector<std::uint8_t>& bytes);

// Centers on the centroid and scales so the farthest point has norm 1.
// A cloud whose points all coincide maps to the origin.
PointCloud normalize_unit_sphere(const PointCloud& pc);

// m distinct points drawn uniformly without replacement, in draw order.
PointCloud subsample(const PointCloud& pc, Eigen::Index m, std::uint64_t seed);

enum class ShapeKind { sphere = 0, cube = 1, torus = 2 };

ShapeKind parse_shape_kind(std::string_view name);
std::string_view to_string(ShapeKind kind);

inline constexpr double kTorusMajor = 0.7;
inline constexpr double kTorusMinor = 0.3;

// Surface samples: unit sphere (uniform), cube of half-width 1 (uniform over
// the six faces), torus R=0.7 r=0.3 (uniform in the two angles).
PointCloud synth_shape(ShapeKind kind, Eigen::Index n, std::uint64_t seed);

enum class Split { train, val };

struct ToyDataset {
  std::vector<PointCloud> clouds;
  std::vector<int> labels;
  std::vector<Split> splits;

  std::size_t size() const { return clouds.size(); }
  std::vector<std::size_t> indices(Split split) const;
};

inline constexpr int kNumToyClasses = 3;

// per_class clouds of each shape, normalized; the first 80% (rounded down,
// at least one and leaving at least one) of every class go to train.
ToyDataset make_toy_dataset(int per_class, Eigen::Index n_points,
                            std::uint64_t seed);

// Directory form: cloud_NNNNN.bin per cloud plus labels.csv with rows
// "file,label,split". Coordinates are stored as float32.
void save_dataset(const ToyDataset& ds, const std::filesystem::path& dir);
ToyDataset load_dataset(const std::filesystem::path& dir);

}  // namespace pointdif
