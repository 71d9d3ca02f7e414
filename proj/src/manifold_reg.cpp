#include "magma/manifold_reg.hpp"

#include <algorithm>
#include <cmath>

#include "magma/error.hpp"

namespace magma {

std::string to_string(LaplacianMode m) {
  switch (m) {
    case LaplacianMode::unnormalized: return "unnormalized";
    case LaplacianMode::symmetric_normalized: return "symmetric_normalized";
    case LaplacianMode::literal_paper: return "literal_paper";
  }
  return "?";
}

std::string to_string(KernelGrad m) { return m == KernelGrad::flow ? "flow" : "detach"; }

std::string to_string(PairMode m) {
  return m == PairMode::single_directed_pair ? "single_directed_pair" : "all_ordered_pairs";
}

LaplacianMode parse_laplacian_mode(const std::string& s) {
  if (s == "unnormalized") return LaplacianMode::unnormalized;
  if (s == "symmetric_normalized") return LaplacianMode::symmetric_normalized;
  if (s == "literal_paper") return LaplacianMode::literal_paper;
  throw ConfigError("unknown laplacian_mode '" + s + "'");
}

KernelGrad parse_kernel_grad(const std::string& s) {
  if (s == "flow") return KernelGrad::flow;
  if (s == "detach") return KernelGrad::detach;
  throw ConfigError("unknown kernel_grad '" + s + "'");
}

PairMode parse_pair_mode(const std::string& s) {
  if (s == "single_directed_pair") return PairMode::single_directed_pair;
  if (s == "all_ordered_pairs") return PairMode::all_ordered_pairs;
  throw ConfigError("unknown pair_mode '" + s + "'");
}

RegConfig RegConfig::for_depth(int depth) {
  RegConfig cfg;
  cfg.ref_layer = depth - 1;
  cfg.target_layer = depth;
  return cfg;
}

std::vector<int> RegConfig::layers() const {
  std::vector<int> k = layer_set.empty() ? std::vector<int>{ref_layer, target_layer} : layer_set;
  std::sort(k.begin(), k.end());
  k.erase(std::unique(k.begin(), k.end()), k.end());
  return k;
}

void RegConfig::validate(int depth) const {
  if (ref_layer == target_layer) {
    throw ConfigError("regularizer needs two distinct layers, got ref_layer = target_layer = " +
                      std::to_string(ref_layer));
  }
  if (pair_mode == PairMode::all_ordered_pairs && layers().size() < 2) {
    throw ConfigError("all_ordered_pairs needs at least two layers in the layer set");
  }
  if (!(sigma_floor > 0.0)) throw ConfigError("sigma_floor must be positive");
  if (fixed_sigma && !(*fixed_sigma > 0.0)) throw ConfigError("fixed sigma must be positive");
  if (depth > 0) {
    for (int l : layers()) {
      if (l < 1 || l > depth) {
        throw ConfigError("regularizer layer " + std::to_string(l) + " outside [1, " + std::to_string(depth) + "]");
      }
    }
  }
}

Tensor pool_patches(const Tensor& tokens, bool exclude_class_token) {
  if (tokens.rank() != 3) throw DimensionError("pool_patches: expected [B,T,D], got " + shape_str(tokens.shape()));
  const std::size_t t = tokens.dim(1);
  const std::size_t skip = exclude_class_token ? 1 : 0;
  if (t <= skip) throw DegenerateInputError("pool_patches: no patch tokens left to average");
  Tensor patches = skip ? slice(tokens, 1, skip, t - skip) : tokens;
  return mean(patches, {1});
}

double adaptive_sigma(const Tensor& d2, double sigma_floor) {
  if (d2.rank() != 2 || d2.dim(0) != d2.dim(1) || d2.dim(0) < 2) {
    throw DimensionError("adaptive_sigma: expected square [B,B] with B >= 2, got " + shape_str(d2.shape()));
  }
  const std::size_t b = d2.dim(0);
  const double count = static_cast<double>(b * (b - 1));
  double mu = 0.0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j)
      if (i != j) mu += d2[i * b + j];
  mu /= count;
  double var = 0.0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j)
      if (i != j) var += (d2[i * b + j] - mu) * (d2[i * b + j] - mu);
  var /= count;
  if (!std::isfinite(var)) throw NonFiniteError("adaptive_sigma: non-finite pairwise distances");
  return std::sqrt(std::max(var, sigma_floor));
}

KernelMatrix rbf_kernel(const Tensor& d2, double sigma) {
  if (!(sigma > 0.0)) throw ContractError("rbf_kernel: sigma must be positive");
  KernelMatrix k{exp(scale(d2, -1.0 / (2.0 * sigma))), sigma};
  if (finite_checks_enabled()) check_kernel_matrix(k);
  return k;
}

void check_kernel_matrix(const KernelMatrix& kernel, double tol) {
  const Tensor& w = kernel.w;
  const std::size_t b = w.dim(0);
  for (std::size_t i = 0; i < b; ++i) {
    if (w[i * b + i] != 1.0) throw ContractError("kernel diagonal entry is not exactly 1");
    for (std::size_t j = 0; j < b; ++j) {
      const double v = w[i * b + j];
      if (v < 0.0 || v > 1.0) throw ContractError("kernel entry outside [0, 1]");
      if (std::abs(v - w[j * b + i]) > tol) throw ContractError("kernel matrix is not symmetric");
    }
  }
}

Tensor laplacian(const KernelMatrix& kernel, LaplacianMode mode) {
  const Tensor& w = kernel.w;
  const std::size_t b = w.dim(0);
  Tensor degree = sum(w, {1});
  for (double d : degree.data()) {
    // W_ii = 1 implies every degree is at least 1
    if (!(d >= 1.0 - 1e-12)) throw ContractError("laplacian: degree below 1");
  }
  if (mode == LaplacianMode::unnormalized) {
    // Self-weights cancel in D - W; dropping them first keeps L_ii exact when
    // the off-diagonal weights are far below 1.
    Tensor off = sub(w, Tensor::eye(b));
    return sub(diag(sum(off, {1})), off);
  }
  Tensor inv_sqrt = reciprocal(sqrt(degree));
  Tensor normalized = mul_cols(mul_rows(w, inv_sqrt), inv_sqrt);
  if (mode == LaplacianMode::literal_paper) return normalized;
  return sub(Tensor::eye(b), normalized);
}

namespace {

void check_pair(const Tensor& z_ref, const Tensor& z_tgt) {
  if (z_ref.rank() != 2 || z_tgt.rank() != 2) {
    throw DimensionError("regularizer expects pooled [B,D] layers, got " + shape_str(z_ref.shape()) + " and " +
                         shape_str(z_tgt.shape()));
  }
  if (z_ref.dim(0) != z_tgt.dim(0)) {
    throw ContractError("regularizer batch mismatch: " + std::to_string(z_ref.dim(0)) + " vs " +
                        std::to_string(z_tgt.dim(0)));
  }
  if (z_ref.dim(0) < 2) throw ContractError("regularizer needs a batch of at least 2 samples");
}

}  // namespace

KernelMatrix reference_kernel(const Tensor& z_ref, const RegConfig& cfg) {
  Tensor d2 = pairwise_sq_dists(cfg.kernel_grad == KernelGrad::detach ? z_ref.detach() : z_ref);
  const double sigma = cfg.fixed_sigma ? *cfg.fixed_sigma : adaptive_sigma(d2, cfg.sigma_floor);
  return rbf_kernel(d2, sigma);
}

Tensor reg_loss_double_sum(const Tensor& z_ref, const Tensor& z_tgt, const RegConfig& cfg) {
  check_pair(z_ref, z_tgt);
  const double b = static_cast<double>(z_ref.dim(0));
  KernelMatrix k = reference_kernel(z_ref, cfg);
  return scale(sum(mul(k.w, pairwise_sq_dists(z_tgt))), 1.0 / (b * b));
}

Tensor reg_loss_trace(const Tensor& z_ref, const Tensor& z_tgt, const RegConfig& cfg) {
  check_pair(z_ref, z_tgt);
  const double b = static_cast<double>(z_ref.dim(0));
  Tensor lap = laplacian(reference_kernel(z_ref, cfg), cfg.laplacian_mode);
  // Tr(Z^T L Z) = sum_ij Z_ij (L Z)_ij
  return scale(sum(mul(z_tgt, matmul(lap, z_tgt))), 1.0 / (b * b));
}

Tensor reg_loss(const LayerActivations& activations, const RegConfig& cfg) {
  cfg.validate();
  auto layer = [&](int l) -> const Tensor& {
    auto it = activations.find(l);
    if (it == activations.end()) {
      throw ConfigError("regularizer layer " + std::to_string(l) + " missing from activations");
    }
    return it->second;
  };
  if (cfg.pair_mode == PairMode::single_directed_pair) {
    return reg_loss_trace(layer(cfg.ref_layer), layer(cfg.target_layer), cfg);
  }
  const auto k = cfg.layers();
  Tensor total;
  for (int a : k) {
    for (int b : k) {
      if (a == b) continue;
      Tensor term = reg_loss_trace(layer(a), layer(b), cfg);
      total = total.defined() ? add(total, term) : term;
    }
  }
  return total;
}

}  // namespace magma
