#pragma once

#include <cstdint>
#include <random>
#include <string>

#include <Eigen/Core>

namespace pointdif {

// splitmix64 finalizer; derives independent stream seeds from (seed, stream).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Explicit random source. Each draw builds a fresh distribution object so the
// generator state alone (and therefore state()/set_state()) fully determines
// every future draw.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform();                           // [0, 1)
  double uniform(double lo, double hi);       // [lo, hi)
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);  // inclusive
  double normal();
  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols);

  std::string state() const;
  void set_state(const std::string& state);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace pointdif
