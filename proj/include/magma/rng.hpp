#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace magma {

// Mixes a base seed with a list of stream tags (epoch, step, sample, ...)
// into an independent 64-bit seed (splitmix64 finalizer per tag).
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);

// std::mt19937_64 is bit-specified by the standard; the distributions are not,
// so the sampling helpers below are written out to keep every draw
// reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n), rejection-sampled (no modulo bias).
  std::uint64_t uniform_int(std::uint64_t n);
  // Standard normal via Box-Muller (one value per call, no caching).
  double normal();
  // Normal(0, std) truncated to [-2 std, 2 std] by rejection.
  double truncated_normal(double std);

  // Fisher-Yates permutation of [0, n).
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::mt19937_64 engine_;
};

}  // namespace magma
