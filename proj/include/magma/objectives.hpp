#pragma once

#include <string>

#include "magma/manifold_reg.hpp"
#include "magma/tensor.hpp"
#include "magma/vit.hpp"

namespace magma {

enum class Method { mae, m_mae, u_mae, mu_mae };

std::string to_string(Method m);
Method parse_method(const std::string& s);
bool uses_manifold(Method m);
bool uses_uniformity(Method m);

struct Schedule {
  double lambda = 1.0;
  int e_st = 10;
  int e_dur = 100;
  double uniformity_weight = 0.0;

  // lambda forced to 0 for methods without the regularizer; uniformity
  // weight 0.01 for the U- methods.
  static Schedule for_method(Method m);
  void validate() const;  // throws ConfigError
};

struct ObjectiveConfig {
  Method method = Method::mae;
  RegConfig reg;
  Schedule sched;
  bool normalize_targets = true;
};

struct LossBreakdown {
  double total = 0.0;
  double reconstruction = 0.0;
  double regularizer = 0.0;
  double uniformity = 0.0;
  double effective_lambda = 0.0;
};

struct LossResult {
  Tensor total;
  LossBreakdown parts;
};

// Squared error averaged over the masked patches only. Targets are
// constants; with normalize_targets each target patch is standardized by
// its own mean and population variance (eps 1e-6).
Tensor reconstruction_loss(const Tensor& pred, const Tensor& target_patches, const MaskPlan& plan,
                           bool normalize_targets);

// log of the mean over ordered pairs i != j of exp(-t ||z_i - z_j||^2) on
// L2-normalized rows.
Tensor uniformity_loss(const Tensor& z, double t = 2.0);

// lambda inside [e_st, e_st + e_dur), else 0.
double effective_lambda(int epoch, const Schedule& sched);

// Pooled representation per regularized layer, class token excluded.
LayerActivations pooled_layers(const Encoded& enc, const RegConfig& reg);

// The regularizer is always evaluated. Outside the active window it is
// computed without recording so it cannot reach the gradient.
LossResult total_loss(const Tensor& pred, const Tensor& target_patches, const MaskPlan& plan, const Encoded& enc,
                      const ObjectiveConfig& cfg, int epoch);

}  // namespace magma
