#include "magma/objectives.hpp"

#include <cmath>

#include "magma/error.hpp"

namespace magma {

std::string to_string(Method m) {
  switch (m) {
    case Method::mae: return "mae";
    case Method::m_mae: return "m_mae";
    case Method::u_mae: return "u_mae";
    case Method::mu_mae: return "mu_mae";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  if (s == "mae") return Method::mae;
  if (s == "m_mae") return Method::m_mae;
  if (s == "u_mae") return Method::u_mae;
  if (s == "mu_mae") return Method::mu_mae;
  throw ConfigError("unknown method '" + s + "' (expected mae, m_mae, u_mae or mu_mae)");
}

bool uses_manifold(Method m) { return m == Method::m_mae || m == Method::mu_mae; }
bool uses_uniformity(Method m) { return m == Method::u_mae || m == Method::mu_mae; }

Schedule Schedule::for_method(Method m) {
  Schedule s;
  if (!uses_manifold(m)) s.lambda = 0.0;
  if (uses_uniformity(m)) s.uniformity_weight = 0.01;
  return s;
}

void Schedule::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be a finite value >= 0");
  if (e_st < 0) throw ConfigError("e_st must be >= 0");
  if (e_dur < 1) throw ConfigError("e_dur must be >= 1");
  if (!(uniformity_weight >= 0.0) || !std::isfinite(uniformity_weight)) {
    throw ConfigError("uniformity_weight must be a finite value >= 0");
  }
}

Tensor reconstruction_loss(const Tensor& pred, const Tensor& target_patches, const MaskPlan& plan,
                           bool normalize_targets) {
  if (pred.shape() != target_patches.shape() || pred.rank() != 3) {
    throw DimensionError("reconstruction_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target_patches.shape()));
  }
  if (plan.batch() != pred.dim(0) || plan.num_patches != pred.dim(1)) {
    throw ContractError("reconstruction_loss: mask plan does not match predictions");
  }
  if (plan.num_masked() == 0) throw ContractError("reconstruction_loss: no masked patches");
  std::vector<std::vector<std::size_t>> masked;
  for (const auto& o : plan.order) masked.emplace_back(o.begin() + static_cast<std::ptrdiff_t>(plan.num_visible), o.end());

  Tensor target = gather_tokens(target_patches.detach(), masked);
  if (normalize_targets) {
    const std::size_t d = target.dim(2);
    std::vector<double> t(target.data().begin(), target.data().end());
    for (std::size_t r = 0; r < t.size() / d; ++r) {
      double mu = 0.0, var = 0.0;
      for (std::size_t e = 0; e < d; ++e) mu += t[r * d + e];
      mu /= static_cast<double>(d);
      for (std::size_t e = 0; e < d; ++e) var += (t[r * d + e] - mu) * (t[r * d + e] - mu);
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + 1e-6);
      for (std::size_t e = 0; e < d; ++e) t[r * d + e] = (t[r * d + e] - mu) * inv;
    }
    target = Tensor(target.shape(), std::move(t));
  }
  Tensor diff = sub(gather_tokens(pred, masked), target);
  return mean(mul(diff, diff));
}

Tensor uniformity_loss(const Tensor& z, double t) {
  if (z.rank() != 2) throw DimensionError("uniformity_loss: expected [B,D], got " + shape_str(z.shape()));
  const std::size_t b = z.dim(0), d = z.dim(1);
  if (b < 2) throw DegenerateInputError("uniformity_loss needs at least two rows");
  for (std::size_t i = 0; i < b; ++i) {
    double n = 0.0;
    for (std::size_t e = 0; e < d; ++e) n += z[i * d + e] * z[i * d + e];
    if (n == 0.0) throw DegenerateInputError("uniformity_loss: row " + std::to_string(i) + " has zero norm");
  }
  Tensor norms = sqrt(sum(mul(z, z), {1}));
  Tensor unit = mul_rows(z, reciprocal(norms));
  // diagonal terms are exp(0) = 1 exactly
  Tensor s = add_scalar(sum(exp(scale(pairwise_sq_dists(unit), -t))), -static_cast<double>(b));
  return log(scale(s, 1.0 / static_cast<double>(b * (b - 1))));
}

double effective_lambda(int epoch, const Schedule& sched) {
  return (epoch >= sched.e_st && epoch < sched.e_st + sched.e_dur) ? sched.lambda : 0.0;
}

LayerActivations pooled_layers(const Encoded& enc, const RegConfig& reg) {
  LayerActivations out;
  for (int l : reg.layers()) {
    auto it = enc.blocks.find(l);
    if (it == enc.blocks.end()) throw ConfigError("regularizer layer " + std::to_string(l) + " not produced by the encoder");
    out[l] = pool_patches(it->second, enc.has_class_token);
  }
  return out;
}

LossResult total_loss(const Tensor& pred, const Tensor& target_patches, const MaskPlan& plan, const Encoded& enc,
                      const ObjectiveConfig& cfg, int epoch) {
  LossResult res;
  Tensor rec = reconstruction_loss(pred, target_patches, plan, cfg.normalize_targets);
  res.parts.reconstruction = rec.item();
  Tensor total = rec;

  if (cfg.sched.uniformity_weight > 0.0) {
    Tensor unif = uniformity_loss(pool_patches(enc.final, enc.has_class_token));
    res.parts.uniformity = unif.item();
    total = add(total, scale(unif, cfg.sched.uniformity_weight));
  }

  const double lam = effective_lambda(epoch, cfg.sched);
  res.parts.effective_lambda = lam;
  if (lam > 0.0) {
    Tensor reg = reg_loss(pooled_layers(enc, cfg.reg), cfg.reg);
    res.parts.regularizer = reg.item();
    total = add(total, scale(reg, lam));
  } else {
    NoGradGuard guard;
    res.parts.regularizer = reg_loss(pooled_layers(enc, cfg.reg), cfg.reg).item();
  }
  res.total = total;
  res.parts.total = total.item();
  return res;
}

}  // namespace magma
