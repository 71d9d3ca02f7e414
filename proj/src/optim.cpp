#include "magma/optim.hpp"

#include <cmath>
#include <numbers>

#include "magma/error.hpp"

namespace magma {

double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double lr_peak, double lr_floor) {
  if (step >= total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + ")");
  }
  if (warmup_steps >= total_steps) throw ContractError("lr_at: warmup must be shorter than the run");
  if (step < warmup_steps) {
    return lr_floor + (lr_peak - lr_floor) * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const std::size_t span = total_steps - 1 - warmup_steps;
  if (span == 0) return lr_peak;
  const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
  return 0.5 * lr_peak * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(std::vector<NamedTensor> params, std::vector<bool> decay, const AdamWConfig& cfg)
    : params_(std::move(params)), decay_(std::move(decay)), cfg_(cfg) {
  if (decay_.size() != params_.size()) throw ContractError("AdamW: one decay flag per parameter required");
  if (!(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0 && cfg_.beta2 >= 0.0 && cfg_.beta2 < 1.0)) {
    throw ConfigError("AdamW betas must lie in [0, 1)");
  }
  if (!(cfg_.eps > 0.0)) throw ConfigError("AdamW eps must be positive");
  if (!(cfg_.weight_decay >= 0.0)) throw ConfigError("AdamW weight_decay must be >= 0");
  for (const auto& p : params_) {
    m_.emplace_back(p.value.numel(), 0.0);
    v_.emplace_back(p.value.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  for (const auto& p : params_) {
    for (double g : p.value.grad()) {
      if (!std::isfinite(g)) {
        throw NonFiniteError("non-finite gradient for '" + p.name + "' at optimizer step " + std::to_string(steps_));
      }
    }
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].value.mutable_data();
    const auto g = params_[i].value.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const double shrink = decay_[i] ? 1.0 - lr * cfg_.weight_decay : 1.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g.empty() ? 0.0 : g[k];
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
      w[k] *= shrink;
      w[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

}  // namespace magma
