#pragma once

#include <string>
#include <vector>

#include "magma/checkpoint.hpp"

namespace magma {

// Linear ramp from lr_floor to lr_peak over warmup_steps, then half-cosine
// from lr_peak down to exactly 0 at the final step (total_steps - 1).
double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double lr_peak,
             double lr_floor = 0.0);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Decoupled weight decay (p -= lr * wd * p) followed by the bias-corrected
// Adam update. Parameters whose decay flag is false skip the decay term.
class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, std::vector<bool> decay, const AdamWConfig& cfg);

  // Applies one update from the accumulated gradients; parameters without a
  // gradient are treated as having a zero gradient. Throws NonFiniteError
  // naming the parameter and step on a NaN/Inf gradient, before any write.
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return steps_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<bool> decay_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t steps_ = 0;
};

}  // namespace magma
