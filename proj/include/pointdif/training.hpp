#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pointdif/diffusion.hpp"
#include "pointdif/networks.hpp"
#include "pointdif/patching.hpp"
#include "pointdif/rng.hpp"

namespace pointdif {

struct AugmentRanges {
  bool enabled = true;
  double scale_min = 0.66;
  double scale_max = 1.5;
  double translate = 0.2;  // per-axis shift drawn from [-translate, translate]
};

struct TrainConfig {
  std::string profile = "desk";
  ModelDims dims = ModelDims::desk();
  GuidanceMode guidance = GuidanceMode::pcnet;
  PatchOptions patches{32, 16, false};
  int steps = 200;  // diffusion T
  double beta_start = 1e-3;
  double beta_end = 1e-1;
  TimestepSampler timesteps;  // h draws per cloud
  double mask_ratio = 0.8;
  int epochs = 100;
  int batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  AugmentRanges augment;
  std::uint64_t seed = 0;

  static TrainConfig paper();
  static TrainConfig desk();

  NoiseSchedule schedule() const { return linear_schedule(steps, beta_start, beta_end); }
  // Throws ValidationError listing every violated constraint.
  void validate() const;
};

struct TrainState {
  Model model;
  std::vector<Matrix> adam_m, adam_v;
  std::int64_t step = 0;
  int epoch = 0;
  Rng rng;
  std::vector<double> loss_history;  // per-epoch mean loss
  std::vector<double> lr_history;    // learning rate at the end of each epoch

  TrainState(Model m, std::uint64_t seed);
};

TrainState init_state(const TrainConfig& config);

// Isotropic scale then per-axis translation.
PointCloud apply_affine(const PointCloud& pc, double scale, const Eigen::RowVector3d& shift);
PointCloud augment(const PointCloud& pc, Rng& rng, const AugmentRanges& ranges);

struct NoiseDraw {
  int t;
  Matrix eps;
  Matrix x_t;
};

// One (t, eps, x_t) triple per sampled time step, eps drawn independently.
std::vector<NoiseDraw> draw_noise(const Matrix& x0, const TimestepSampler& sampler,
                                  const NoiseSchedule& sched, Rng& rng);

// Noise predictor plugged into the objective; defaults to cpdm_forward.
using NoisePredictor = std::function<ag::Var(Net&, const NoiseDraw&, ag::Var c)>;

// Mean over draws of the per-draw mean squared noise error.
ag::Var denoising_loss(Net& net, ag::Var c, const std::vector<NoiseDraw>& draws,
                       const NoisePredictor& predictor = {});

// Per-cloud pipeline: augment, patchify, mask, encode, condition, corrupt,
// denoise. Returns the cloud's loss on the given tape.
ag::Var cloud_loss(Net& net, const PointCloud& cloud, const TrainConfig& config,
                   const NoiseSchedule& sched, Rng& rng, const NoisePredictor& predictor = {});

// Batch mean loss; parameter gradients of the batch mean are left in
// model.parameters()[i].grad.
double batch_loss(const std::vector<const PointCloud*>& batch, Model& model,
                  const TrainConfig& config, const NoiseSchedule& sched, Rng& rng,
                  const NoisePredictor& predictor = {});

// Cosine decay from config.lr to 0 over total_steps, no warmup.
double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps);

// Decoupled weight decay Adam update using the gradients held in the model.
void adamw_update(TrainState& state, const TrainConfig& config, double lr);

// Loss + gradients + one AdamW step. Throws NumericalError on a non-finite loss.
double pretrain_step(const std::vector<const PointCloud*>& batch, TrainState& state,
                     const TrainConfig& config, const NoiseSchedule& sched, double lr);

std::int64_t steps_per_epoch(std::size_t n_train, int batch_size);

using EpochCallback = std::function<void(const TrainState&)>;

// Runs epochs state.epoch .. until_epoch-1 (until_epoch < 0: config.epochs).
// on_epoch sees the state after each completed epoch.
void fit(const std::vector<PointCloud>& train, const TrainConfig& config, TrainState& state,
         int until_epoch = -1, const EpochCallback& on_epoch = {});
TrainState fit(const std::vector<PointCloud>& train, const TrainConfig& config);

}  // namespace pointdif
