#pragma once

#include <cstdint>
#include <random>
#include <span>

#include <Eigen/Dense>

namespace rama {

/// Seeded random stream. Every stochastic component takes one explicitly so that a
/// run is a pure function of its seeds.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0) { reseed(seed, stream); }

  void reseed(std::uint64_t seed, std::uint64_t stream = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                      0x52414d41u};
    engine_.seed(seq);
  }

  /// Uniform in [0, 1).
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

  /// Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    return std::uniform_int_distribution<std::int64_t>(0, n - 1)(engine_);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Inverse-CDF draw from (possibly unnormalized) non-negative weights.
  template <class T>
  std::int64_t categorical(std::span<const T> weights) {
    double total = 0.0;
    for (T w : weights) total += static_cast<double>(w);
    const double u = uniform() * total;
    double acc = 0.0;
    std::int64_t last_positive = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      const double w = static_cast<double>(weights[i]);
      if (w > 0.0) last_positive = static_cast<std::int64_t>(i);
      acc += w;
      if (u < acc) return static_cast<std::int64_t>(i);
    }
    return last_positive;
  }

  template <class T>
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<T>(normal());
    return m;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace rama
