#include "pointdif/patching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pointdif/errors.hpp"
#include "pointdif/rng.hpp"

namespace pointdif {

namespace {

double squared_distance(const Points& pts, Index i, const Eigen::RowVector3d& c) {
  double dx = pts(i, 0) - c(0), dy = pts(i, 1) - c(1), dz = pts(i, 2) - c(2);
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

std::vector<Index> fps(const PointCloud& pc, Index s, Index start) {
  check_cloud(pc);
  const Index n = pc.size();
  if (s < 1 || s > n)
    throw ValidationError("fps: need 1 <= s <= n, got s=" + std::to_string(s) +
                          " n=" + std::to_string(n));
  if (start < 0 || start >= n) throw ValidationError("fps: start index out of range");

  std::vector<Index> picked{start};
  picked.reserve(static_cast<std::size_t>(s));
  std::vector<double> min_d(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<bool> taken(static_cast<std::size_t>(n), false);
  taken[static_cast<std::size_t>(start)] = true;
  Index last = start;
  while (static_cast<Index>(picked.size()) < s) {
    Eigen::RowVector3d c = pc.points.row(last);
    Index best = -1;
    double best_d = -1.0;
    for (Index i = 0; i < n; ++i) {
      auto& d = min_d[static_cast<std::size_t>(i)];
      d = std::min(d, squared_distance(pc.points, i, c));
      // Already-chosen points are skipped so duplicates still yield s distinct indices.
      if (!taken[static_cast<std::size_t>(i)] && d > best_d) {
        best_d = d;
        best = i;
      }
    }
    picked.push_back(best);
    taken[static_cast<std::size_t>(best)] = true;
    last = best;
  }
  return picked;
}

KnnGroups knn_group(const PointCloud& pc, const Points& centers, Index k) {
  check_cloud(pc);
  const Index n = pc.size();
  if (k < 1 || k > n)
    throw ValidationError("knn_group: need 1 <= k <= n, got k=" + std::to_string(k) +
                          " n=" + std::to_string(n));
  const Index s = centers.rows();
  KnnGroups out;
  out.neighbors.resize(static_cast<std::size_t>(s));
  out.patches.resize(s * k, 3);
  std::vector<std::pair<double, Index>> dist(static_cast<std::size_t>(n));
  for (Index c = 0; c < s; ++c) {
    Eigen::RowVector3d center = centers.row(c);
    for (Index i = 0; i < n; ++i)
      dist[static_cast<std::size_t>(i)] = {squared_distance(pc.points, i, center), i};
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    auto& nb = out.neighbors[static_cast<std::size_t>(c)];
    nb.resize(static_cast<std::size_t>(k));
    for (Index j = 0; j < k; ++j) {
      Index src = dist[static_cast<std::size_t>(j)].second;
      nb[static_cast<std::size_t>(j)] = src;
      out.patches.row(c * k + j) = pc.points.row(src) - center;
    }
  }
  return out;
}

Index masked_count(Index s, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0))
    throw ValidationError("mask ratio must lie in [0, 1]");
  auto r = static_cast<Index>(std::floor(static_cast<double>(s) * ratio + 1e-9));
  return std::min(r, s);
}

MaskSplit mask_patches(Index s, double ratio, std::uint64_t seed) {
  if (s < 0) throw ValidationError("mask_patches: negative patch count");
  const Index r = masked_count(s, ratio);
  std::vector<Index> perm(static_cast<std::size_t>(s));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  for (Index i = 0; i < r; ++i) {
    auto j = rng.uniform_int(i, s - 1);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  MaskSplit out;
  out.masked.assign(perm.begin(), perm.begin() + r);
  out.visible.assign(perm.begin() + r, perm.end());
  std::sort(out.masked.begin(), out.masked.end());
  std::sort(out.visible.begin(), out.visible.end());
  return out;
}

PatchSet make_patches(const PointCloud& pc, const PatchOptions& opts, std::uint64_t seed) {
  check_cloud(pc);
  Index start = 0;
  if (opts.random_start) {
    Rng rng(seed);
    start = rng.uniform_int(0, pc.size() - 1);
  }
  PatchSet ps;
  ps.center_indices = fps(pc, opts.num_patches, start);
  ps.centers.resize(opts.num_patches, 3);
  for (Index i = 0; i < opts.num_patches; ++i)
    ps.centers.row(i) = pc.points.row(ps.center_indices[static_cast<std::size_t>(i)]);
  auto groups = knn_group(pc, ps.centers, opts.patch_size);
  ps.neighbors = std::move(groups.neighbors);
  ps.patches = std::move(groups.patches);
  ps.k = opts.patch_size;
  ps.visible.resize(static_cast<std::size_t>(opts.num_patches));
  std::iota(ps.visible.begin(), ps.visible.end(), 0);
  return ps;
}

void apply_mask(PatchSet& ps, double ratio, std::uint64_t seed) {
  auto split = mask_patches(ps.num_patches(), ratio, seed);
  ps.visible = std::move(split.visible);
  ps.masked = std::move(split.masked);
}

Matrix gather_patch_rows(const PatchSet& ps, const std::vector<Index>& which) {
  Matrix out(static_cast<Index>(which.size()) * ps.k, 3);
  for (std::size_t i = 0; i < which.size(); ++i)
    out.middleRows(static_cast<Index>(i) * ps.k, ps.k) = ps.patches.middleRows(which[i] * ps.k, ps.k);
  return out;
}

Points gather_centers(const PatchSet& ps, const std::vector<Index>& which) {
  Points out(static_cast<Index>(which.size()), 3);
  for (std::size_t i = 0; i < which.size(); ++i)
    out.row(static_cast<Index>(i)) = ps.centers.row(which[i]);
  return out;
}

}  // namespace pointdif
