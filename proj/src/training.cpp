#include "pointdif/training.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "pointdif/errors.hpp"

namespace pointdif {

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.profile = "paper";
  c.dims = ModelDims::paper();
  c.patches = {64, 32, false};
  c.steps = 2000;
  c.beta_start = 1e-4;
  c.beta_end = 1e-2;
  c.timesteps.h = 4;
  c.mask_ratio = 0.8;
  c.epochs = 300;
  c.batch_size = 128;
  c.lr = 1e-3;
  c.weight_decay = 0.05;
  return c;
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

void TrainConfig::validate() const {
  std::vector<std::string> errs;
  try {
    dims.validate();
  } catch (const ValidationError& e) {
    errs.push_back(e.what());
  }
  if (patches.num_patches < 1) errs.push_back("patch count must be >= 1");
  if (patches.patch_size < 1) errs.push_back("patch size must be >= 1");
  if (steps < 1) errs.push_back("diffusion steps T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    errs.push_back("need 0 < beta_start <= beta_end < 1");
  if (timesteps.h < 1) errs.push_back("h must be >= 1");
  else if (!timesteps.restricted && timesteps.h > steps) errs.push_back("h must not exceed T");
  if (timesteps.restricted &&
      (timesteps.restriction.lo < 1 || timesteps.restriction.hi > steps ||
       timesteps.restriction.lo > timesteps.restriction.hi))
    errs.push_back("time interval must be a non-empty subset of [1, T]");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) errs.push_back("mask ratio must lie in [0, 1)");
  else if (masked_count(patches.num_patches, mask_ratio) >= patches.num_patches)
    errs.push_back("mask ratio leaves no visible patch");
  if (epochs < 0) errs.push_back("epochs must be >= 0");
  if (batch_size < 1) errs.push_back("batch size must be >= 1");
  if (!(lr > 0.0)) errs.push_back("learning rate must be positive");
  if (!(weight_decay >= 0.0)) errs.push_back("weight decay must be >= 0");
  if (augment.enabled && !(augment.scale_min > 0.0 && augment.scale_min <= augment.scale_max))
    errs.push_back("augmentation needs 0 < scale_min <= scale_max");
  if (augment.enabled && !(augment.translate >= 0.0))
    errs.push_back("augmentation translate must be >= 0");
  if (errs.empty()) return;
  std::ostringstream os;
  os << "invalid training config:";
  for (const auto& e : errs) os << "\n  - " << e;
  throw ValidationError(os.str());
}

TrainState::TrainState(Model m, std::uint64_t seed) : model(std::move(m)), rng(seed) {
  for (const auto& p : model.parameters()) {
    adam_m.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    adam_v.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  }
}

TrainState init_state(const TrainConfig& config) {
  config.validate();
  return TrainState(Model(config.dims, config.guidance, derive_seed(config.seed, 1)),
                    derive_seed(config.seed, 2));
}

PointCloud apply_affine(const PointCloud& pc, double scale, const Eigen::RowVector3d& shift) {
  return PointCloud((pc.points * scale).rowwise() + shift);
}

PointCloud augment(const PointCloud& pc, Rng& rng, const AugmentRanges& ranges) {
  if (!ranges.enabled) return pc;
  const double s = rng.uniform(ranges.scale_min, ranges.scale_max);
  Eigen::RowVector3d shift;
  for (int a = 0; a < 3; ++a) shift(a) = rng.uniform(-ranges.translate, ranges.translate);
  return apply_affine(pc, s, shift);
}

std::vector<NoiseDraw> draw_noise(const Matrix& x0, const TimestepSampler& sampler,
                                  const NoiseSchedule& sched, Rng& rng) {
  std::vector<NoiseDraw> out;
  for (int t : sampler.draw(sched.steps(), rng)) {
    Matrix eps = rng.normal_matrix(x0.rows(), 3);
    Matrix x_t = q_sample(x0, t, eps, sched);
    out.push_back({t, std::move(eps), std::move(x_t)});
  }
  return out;
}

ag::Var denoising_loss(Net& net, ag::Var c, const std::vector<NoiseDraw>& draws,
                       const NoisePredictor& predictor) {
  std::vector<ag::Var> terms;
  terms.reserve(draws.size());
  for (const auto& d : draws) {
    ag::Var eps_hat = predictor ? predictor(net, d, c)
                                : cpdm_forward(net, net.constant(d.x_t), c, d.t);
    terms.push_back(ag::mse(eps_hat, d.eps));
  }
  return ag::mean_scalars(terms);
}

ag::Var cloud_loss(Net& net, const PointCloud& cloud, const TrainConfig& config,
                   const NoiseSchedule& sched, Rng& rng, const NoisePredictor& predictor) {
  PointCloud x0 = augment(cloud, rng, config.augment);
  const std::uint64_t patch_seed = rng.engine()();
  const std::uint64_t mask_seed = rng.engine()();
  PatchSet ps = make_patches(x0, config.patches, patch_seed);
  apply_mask(ps, config.mask_ratio, mask_seed);
  ag::Var c = condition_from_patches(net, ps);
  auto draws = draw_noise(x0.points, config.timesteps, sched, rng);
  return denoising_loss(net, c, draws, predictor);
}

double batch_loss(const std::vector<const PointCloud*>& batch, Model& model,
                  const TrainConfig& config, const NoiseSchedule& sched, Rng& rng,
                  const NoisePredictor& predictor) {
  if (batch.empty()) throw ValidationError("empty batch");
  model.zero_grad();
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  // One tape per cloud keeps memory bounded; gradients accumulate in place.
  for (const PointCloud* pc : batch) {
    ag::Tape tape;
    Net net(tape, model);
    ag::Var loss = cloud_loss(net, *pc, config, sched, rng, predictor);
    total += loss.scalar();
    tape.backward(loss, inv);
  }
  return total * inv;
}

double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return base_lr;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac));
}

void adamw_update(TrainState& state, const TrainConfig& config, double lr) {
  ++state.step;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  auto& params = state.model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = state.adam_m[i];
    auto& v = state.adam_v[i];
    m = b1 * m + (1.0 - b1) * p.grad;
    v = b2 * v + (1.0 - b2) * p.grad.cwiseAbs2();
    if (p.decay) p.value *= (1.0 - lr * config.weight_decay);
    p.value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config.adam_eps);
  }
}

double pretrain_step(const std::vector<const PointCloud*>& batch, TrainState& state,
                     const TrainConfig& config, const NoiseSchedule& sched, double lr) {
  const double loss = batch_loss(batch, state.model, config, sched, state.rng);
  if (!std::isfinite(loss))
    throw NumericalError("non-finite loss at step " + std::to_string(state.step) +
                         " (check the noise schedule and initialization)");
  adamw_update(state, config, lr);
  return loss;
}

std::int64_t steps_per_epoch(std::size_t n_train, int batch_size) {
  return static_cast<std::int64_t>((n_train + static_cast<std::size_t>(batch_size) - 1) /
                                   static_cast<std::size_t>(batch_size));
}

void fit(const std::vector<PointCloud>& train, const TrainConfig& config, TrainState& state,
         int until_epoch, const EpochCallback& on_epoch) {
  config.validate();
  if (train.empty()) throw ValidationError("fit: empty training split");
  for (const auto& pc : train) check_cloud(pc);
  const NoiseSchedule sched = config.schedule();
  const int last = until_epoch < 0 ? config.epochs : std::min(until_epoch, config.epochs);
  const std::int64_t total = steps_per_epoch(train.size(), config.batch_size) * config.epochs;
  std::vector<std::size_t> order(train.size());
  while (state.epoch < last) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(state.rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }
    double sum = 0.0;
    double lr = config.lr;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(config.batch_size)) {
      std::vector<const PointCloud*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + static_cast<std::size_t>(config.batch_size)); ++i)
        batch.push_back(&train[order[i]]);
      lr = cosine_lr(config.lr, state.step, total);
      sum += pretrain_step(batch, state, config, sched, lr) * static_cast<double>(batch.size());
    }
    state.loss_history.push_back(sum / static_cast<double>(train.size()));
    state.lr_history.push_back(lr);
    ++state.epoch;
    if (on_epoch) on_epoch(state);
  }
}

TrainState fit(const std::vector<PointCloud>& train, const TrainConfig& config) {
  TrainState state = init_state(config);
  fit(train, config, state);
  return state;
}

}  // namespace pointdif
