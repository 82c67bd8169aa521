#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pointdif/diffusion.hpp"
#include "pointdif/networks.hpp"
#include "pointdif/point_cloud.hpp"
#include "pointdif/training.hpp"

namespace pointdif {

// Mean squared nearest-neighbour distance from a to b plus the same from b to a.
double chamfer(const Points& a, const Points& b);
inline double chamfer(const PointCloud& a, const PointCloud& b) { return chamfer(a.points, b.points); }

// ---------------------------------------------------------------------------
// Conditional generation

struct Reconstruction {
  PointCloud input;
  PointCloud masked_view;  // points of the visible patches
  PointCloud generated;
  double chamfer = 0.0;    // generated vs input
};

// Ancestral sampling of n points guided by condition c.
PointCloud generate(const Model& model, const NoiseSchedule& sched, const Eigen::RowVectorXd& c,
                    Index n_points, std::uint64_t seed);

// Masks `cloud` at `mask_ratio`, conditions on its visible patches and
// generates a cloud of the same size.
Reconstruction reconstruct(const Model& model, const NoiseSchedule& sched, const PointCloud& cloud,
                           double mask_ratio, std::uint64_t seed, const PatchOptions& patches);

// Same, but the condition comes from `condition_source` while the Chamfer
// distance is measured against `target`.
Reconstruction reconstruct_from(const Model& model, const NoiseSchedule& sched,
                                const PointCloud& target, const PointCloud& condition_source,
                                double mask_ratio, std::uint64_t seed, const PatchOptions& patches);

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeConfig {
  int steps = 300;    // full-batch gradient descent iterations
  double lr = 0.5;
  double l2 = 1e-3;
};

struct ProbeResult {
  double accuracy = 0.0;
  std::vector<double> per_class;
  Eigen::MatrixXi confusion;  // rows: true class, cols: predicted
};

// Max-pool and mean-pool of the frozen encoder latents over all patches.
Eigen::RowVectorXd probe_features(const Model& model, const PointCloud& cloud,
                                  const PatchOptions& patches);

// Multinomial logistic regression on standardized features.
ProbeResult fit_linear_classifier(const Matrix& train_x, const std::vector<int>& train_y,
                                  const Matrix& val_x, const std::vector<int>& val_y,
                                  int num_classes, const ProbeConfig& config);

ProbeResult linear_probe(const Model& model, const ToyDataset& data, const PatchOptions& patches,
                         const ProbeConfig& config);

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string setting;
  double probe_accuracy = 0.0;
  double recon_chamfer = 0.0;  // NaN when not measured
  bool operator==(const AblationRow&) const = default;
};

struct AblationReport {
  std::vector<AblationRow> rows;

  std::string to_csv() const;
  static AblationReport from_csv(const std::string& text);
  void save_csv(const std::filesystem::path& path) const;
  static AblationReport load_csv(const std::filesystem::path& path);
};

struct EvalOptions {
  ProbeConfig probe;
  int recon_shapes = 0;        // validation clouds used for the Chamfer column
  double recon_mask_ratio = 0.8;
};

// Pre-trains on the train split with `config`, then probes and optionally
// measures reconstruction.
AblationRow run_setting(const ToyDataset& data, const TrainConfig& config, const EvalOptions& eval,
                        std::string setting);

std::vector<PointCloud> train_clouds(const ToyDataset& data);

std::string interval_label(const Interval& iv);

// One row per restricted interval followed by the full-range recurrent row.
AblationReport interval_ablation(const ToyDataset& data, const std::vector<Interval>& intervals,
                                 const TrainConfig& config, const EvalOptions& eval);

AblationReport mask_ratio_sweep(const ToyDataset& data, const std::vector<double>& ratios,
                                const TrainConfig& config, const EvalOptions& eval);

AblationReport guidance_ablation(const ToyDataset& data, const std::vector<GuidanceMode>& modes,
                                 const TrainConfig& config, const EvalOptions& eval);

}  // namespace pointdif
