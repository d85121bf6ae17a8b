#pragma once

#include <cstdint>
#include <random>

namespace fseb {

/// Independent streams derived from one root seed. Each stream seed is a
/// pure function of (root, stream, counter), so changing how many draws one
/// stream makes never shifts another.
enum class Stream : std::uint64_t {
  kInit = 1,
  kMinibatch = 2,
  kContext = 3,
  kLikelihoodNoise = 4,
  kPriorNoise = 5,
  kData = 6,
  kCorruption = 7,
  kSubsample = 8,
  kEvaluation = 9,
};

std::uint64_t splitmix64(std::uint64_t x);

std::uint64_t derive_seed(std::uint64_t root, Stream stream, std::uint64_t counter = 0);
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream, std::uint64_t counter = 0);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  /// Uniform on [lo, hi).
  double uniform(double lo = 0.0, double hi = 1.0) {
    return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace fseb
