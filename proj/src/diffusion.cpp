#include "pointdif/diffusion.hpp"

#include <cmath>

#include "pointdif/errors.hpp"

namespace pointdif {

NoiseSchedule::NoiseSchedule(int steps, double beta_start, double beta_end)
    : steps_(steps), beta_start_(beta_start), beta_end_(beta_end) {
  if (steps < 1) throw ValidationError("schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ValidationError("schedule: need 0 < beta_start <= beta_end < 1");
  const auto n = static_cast<std::size_t>(steps) + 1;
  beta_.assign(n, 0.0);
  alpha_.assign(n, 1.0);
  alpha_bar_.assign(n, 1.0);
  beta_tilde_.assign(n, 0.0);
  for (int t = 1; t <= steps; ++t) {
    auto i = static_cast<std::size_t>(t);
    beta_[i] = steps == 1 ? beta_start
                          : beta_start + (t - 1) * (beta_end - beta_start) / (steps - 1);
    alpha_[i] = 1.0 - beta_[i];
    alpha_bar_[i] = alpha_bar_[i - 1] * alpha_[i];
    beta_tilde_[i] = beta_[i] * (1.0 - alpha_bar_[i - 1]) / (1.0 - alpha_bar_[i]);
  }
}

std::size_t NoiseSchedule::checked(int t) const {
  if (t < 1 || t > steps_)
    throw ValidationError("time step " + std::to_string(t) + " outside [1, " +
                          std::to_string(steps_) + "]");
  return static_cast<std::size_t>(t);
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps_)
    throw ValidationError("time step " + std::to_string(t) + " outside [0, " +
                          std::to_string(steps_) + "]");
  return alpha_bar_[static_cast<std::size_t>(t)];
}

NoiseSchedule linear_schedule(int steps, double beta_start, double beta_end) {
  return NoiseSchedule(steps, beta_start, beta_end);
}

Matrix q_sample(const Matrix& x0, int t, const Matrix& eps, const NoiseSchedule& sched) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols())
    throw ValidationError("q_sample: noise shape does not match x0");
  if (t < 1 || t > sched.steps())
    throw ValidationError("q_sample: t must lie in [1, T]");
  const double ab = sched.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

PosteriorStats posterior_stats(const Matrix& x_t, const Matrix& x0, int t,
                               const NoiseSchedule& sched) {
  if (t < 2 || t > sched.steps())
    throw ValidationError("posterior_stats: t must lie in [2, T]");
  const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t - 1);
  const double beta = sched.beta(t), alpha = sched.alpha(t);
  PosteriorStats out;
  out.mean = (std::sqrt(ab_prev) * beta * x0 + std::sqrt(alpha) * (1.0 - ab_prev) * x_t) /
             (1.0 - ab);
  out.variance = sched.beta_tilde(t);
  return out;
}

Matrix predicted_mean(const Matrix& x_t, const Matrix& eps_hat, int t,
                      const NoiseSchedule& sched) {
  const double coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
  return (x_t - coef * eps_hat) / std::sqrt(sched.alpha(t));
}

Matrix reverse_step(const Matrix& x_t, const Matrix& eps_hat, int t, const Matrix& noise,
                    const NoiseSchedule& sched) {
  Matrix mean = predicted_mean(x_t, eps_hat, t, sched);
  if (t == 1) return mean;
  return mean + std::sqrt(sched.sigma_sq(t)) * noise;
}

Matrix sample_loop(const Denoiser& denoiser, Eigen::Index n_points, const NoiseSchedule& sched,
                   Rng& rng) {
  if (n_points < 1) throw ValidationError("sample_loop: n_points must be >= 1");
  Matrix x = rng.normal_matrix(n_points, 3);
  for (int t = sched.steps(); t >= 1; --t) {
    Matrix eps_hat = denoiser(x, t);
    Matrix noise = t > 1 ? rng.normal_matrix(n_points, 3) : Matrix::Zero(n_points, 3);
    x = reverse_step(x, eps_hat, t, noise, sched);
  }
  return x;
}

std::vector<Interval> recurrent_intervals(int steps, int h, RemainderPolicy policy) {
  if (h < 1) throw ValidationError("recurrent sampling: h must be >= 1");
  if (h > steps) throw ValidationError("recurrent sampling: h must not exceed T");
  const int d = steps / h;
  std::vector<Interval> out;
  out.reserve(static_cast<std::size_t>(h));
  for (int i = 0; i < h; ++i) out.push_back({d * i + 1, d * (i + 1)});
  if (policy == RemainderPolicy::absorb) out.back().hi = steps;
  return out;
}

std::vector<int> recurrent_uniform_sample(int steps, int h, Rng& rng, RemainderPolicy policy) {
  std::vector<int> out;
  for (const auto& iv : recurrent_intervals(steps, h, policy))
    out.push_back(static_cast<int>(rng.uniform_int(iv.lo, iv.hi)));
  return out;
}

std::vector<int> TimestepSampler::draw(int steps, Rng& rng) const {
  if (!restricted) return recurrent_uniform_sample(steps, h, rng, remainder);
  if (h < 1) throw ValidationError("timestep sampler: h must be >= 1");
  if (restriction.lo < 1 || restriction.hi > steps || restriction.lo > restriction.hi)
    throw ValidationError("timestep sampler: restriction must be a non-empty subset of [1, T]");
  std::vector<int> out;
  for (int i = 0; i < h; ++i)
    out.push_back(static_cast<int>(rng.uniform_int(restriction.lo, restriction.hi)));
  return out;
}

}  // namespace pointdif
