#pragma once

#include <functional>
#include <vector>

#include "pointdif/point_cloud.hpp"
#include "pointdif/rng.hpp"

namespace pointdif {

// Linear beta schedule with every derived table held in double precision.
// Tables are 1-indexed by time step; slot 0 holds the t=0 boundary values
// (alpha_bar = 1, beta = 0).
class NoiseSchedule {
 public:
  NoiseSchedule(int steps, double beta_start, double beta_end);

  int steps() const { return steps_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const { return beta_[checked(t)]; }
  double alpha(int t) const { return alpha_[checked(t)]; }
  double alpha_bar(int t) const;  // valid for t in [0, T]
  // Posterior variance beta_tilde; zero at t = 1.
  double beta_tilde(int t) const { return beta_tilde_[checked(t)]; }
  // Reverse-process variance sigma_t^2 (set to beta_tilde).
  double sigma_sq(int t) const { return beta_tilde(t); }

 private:
  std::size_t checked(int t) const;

  int steps_;
  double beta_start_, beta_end_;
  std::vector<double> beta_, alpha_, alpha_bar_, beta_tilde_;
};

NoiseSchedule linear_schedule(int steps, double beta_start, double beta_end);

// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
Matrix q_sample(const Matrix& x0, int t, const Matrix& eps, const NoiseSchedule& sched);

struct PosteriorStats {
  Matrix mean;
  double variance;
};

// Mean and variance of q(x_{t-1} | x_t, x0) in the x0 form; t in [2, T].
PosteriorStats posterior_stats(const Matrix& x_t, const Matrix& x0, int t,
                               const NoiseSchedule& sched);

// (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t).
Matrix predicted_mean(const Matrix& x_t, const Matrix& eps_hat, int t,
                      const NoiseSchedule& sched);

// predicted_mean + sigma_t * noise; at t = 1 the noise is ignored.
Matrix reverse_step(const Matrix& x_t, const Matrix& eps_hat, int t, const Matrix& noise,
                    const NoiseSchedule& sched);

using Denoiser = std::function<Matrix(const Matrix& x_t, int t)>;

// Ancestral sampling from x_T ~ N(0, I) down to x_0. The condition is bound
// into the denoiser by the caller.
Matrix sample_loop(const Denoiser& denoiser, Eigen::Index n_points,
                   const NoiseSchedule& sched, Rng& rng);

// How recurrent_uniform_sample treats T mod h leftover steps.
enum class RemainderPolicy {
  drop,    // intervals are [d*i+1, d*(i+1)], steps after d*h never drawn
  absorb,  // the last interval is extended to end at T
};

struct Interval {
  int lo, hi;  // inclusive
  bool operator==(const Interval&) const = default;
};

std::vector<Interval> recurrent_intervals(int steps, int h,
                                          RemainderPolicy policy = RemainderPolicy::drop);

// One uniform draw per interval, in interval order.
std::vector<int> recurrent_uniform_sample(int steps, int h, Rng& rng,
                                          RemainderPolicy policy = RemainderPolicy::drop);

// Time steps used per training example: recurrent uniform over [1, T] by
// default, or `h` independent uniform draws from a fixed restriction.
struct TimestepSampler {
  int h = 4;
  RemainderPolicy remainder = RemainderPolicy::drop;
  bool restricted = false;
  Interval restriction{1, 1};

  std::vector<int> draw(int steps, Rng& rng) const;
};

}  // namespace pointdif
