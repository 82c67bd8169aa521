#pragma once

#include <cstdint>
#include <vector>

#include "pointdif/point_cloud.hpp"

namespace pointdif {

using Index = Eigen::Index;

// Greedy farthest point sampling. The first index is `start`; every later
// pick maximizes the minimum distance to those already chosen, ties going to
// the lowest point index.
std::vector<Index> fps(const PointCloud& pc, Index s, Index start = 0);

struct KnnGroups {
  std::vector<std::vector<Index>> neighbors;  // s lists of k source indices
  Matrix patches;                             // (s*k) x 3, point minus center
};

// For each center row, the k nearest source points (ties to lowest index),
// nearest first, stored relative to the center.
KnnGroups knn_group(const PointCloud& pc, const Points& centers, Index k);

struct MaskSplit {
  std::vector<Index> visible;  // ascending
  std::vector<Index> masked;   // ascending
};

// Number of masked patches for s patches at ratio m, i.e. floor(s*m). A
// 1e-9 guard keeps decimal ratios such as 0.29*100 from rounding down.
Index masked_count(Index s, double ratio);

MaskSplit mask_patches(Index s, double ratio, std::uint64_t seed);

struct PatchSet {
  std::vector<Index> center_indices;
  Points centers;                              // s x 3
  std::vector<std::vector<Index>> neighbors;   // s x k
  Matrix patches;                              // (s*k) x 3, centered
  Index k = 0;
  std::vector<Index> visible;
  std::vector<Index> masked;

  Index num_patches() const { return static_cast<Index>(center_indices.size()); }
};

struct PatchOptions {
  Index num_patches = 32;
  Index patch_size = 16;
  bool random_start = false;  // otherwise FPS starts at point 0
};

// FPS + KNN grouping; every patch is visible until apply_mask is called.
PatchSet make_patches(const PointCloud& pc, const PatchOptions& opts, std::uint64_t seed);
void apply_mask(PatchSet& ps, double ratio, std::uint64_t seed);

// Rows of `patches` belonging to the listed patches, in list order.
Matrix gather_patch_rows(const PatchSet& ps, const std::vector<Index>& which);
Points gather_centers(const PatchSet& ps, const std::vector<Index>& which);

}  // namespace pointdif
