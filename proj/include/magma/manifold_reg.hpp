#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "magma/tensor.hpp"

namespace magma {

enum class LaplacianMode {
  unnormalized,          // D - W
  symmetric_normalized,  // I - D^-1/2 W D^-1/2
  literal_paper,         // D^-1/2 W D^-1/2 (not PSD; kept for fidelity experiments)
};
enum class KernelGrad { flow, detach };
enum class PairMode { single_directed_pair, all_ordered_pairs };

std::string to_string(LaplacianMode m);
std::string to_string(KernelGrad m);
std::string to_string(PairMode m);
LaplacianMode parse_laplacian_mode(const std::string& s);
KernelGrad parse_kernel_grad(const std::string& s);
PairMode parse_pair_mode(const std::string& s);

// Layer indices are 1-based encoder block indices.
struct RegConfig {
  int ref_layer = 3;
  int target_layer = 4;
  // Layer set K used by all_ordered_pairs; empty means {ref_layer, target_layer}.
  std::vector<int> layer_set;
  LaplacianMode laplacian_mode = LaplacianMode::symmetric_normalized;
  KernelGrad kernel_grad = KernelGrad::flow;
  PairMode pair_mode = PairMode::single_directed_pair;
  double sigma_floor = 1e-8;
  // When set, used as the kernel bandwidth instead of the adaptive estimate.
  std::optional<double> fixed_sigma;

  // Penultimate block as reference, last block as target.
  static RegConfig for_depth(int depth);
  std::vector<int> layers() const;
  // Throws ConfigError. depth <= 0 skips the range check.
  void validate(int depth = 0) const;
};

struct KernelMatrix {
  Tensor w;      // [B,B]
  double sigma;  // bandwidth actually used
};

// Per-layer pooled representations, keyed by 1-based layer index. Each
// entry is [B,D] with rows in batch order.
using LayerActivations = std::map<int, Tensor>;

// tokens[B,T,D] -> [B,D] arithmetic mean over tokens; the class token is
// token 0 when present.
Tensor pool_patches(const Tensor& tokens, bool exclude_class_token);

// sqrt(max(population variance of the off-diagonal entries, floor)).
// A plain number: the bandwidth is not differentiated through. Throws
// NonFiniteError when the distances are not finite.
double adaptive_sigma(const Tensor& d2, double sigma_floor);

// W_ij = exp(-D2_ij / (2 sigma)).
KernelMatrix rbf_kernel(const Tensor& d2, double sigma);

Tensor laplacian(const KernelMatrix& kernel, LaplacianMode mode);

// Kernel on the reference layer, with bandwidth chosen per cfg.
KernelMatrix reference_kernel(const Tensor& z_ref, const RegConfig& cfg);

// (1/B^2) sum_ij W_ij(z_ref) ||z_tgt_i - z_tgt_j||^2
Tensor reg_loss_double_sum(const Tensor& z_ref, const Tensor& z_tgt, const RegConfig& cfg);
// (1/B^2) Tr(z_tgt^T L(W(z_ref)) z_tgt)
Tensor reg_loss_trace(const Tensor& z_ref, const Tensor& z_tgt, const RegConfig& cfg);

Tensor reg_loss(const LayerActivations& activations, const RegConfig& cfg);

// Symmetry, unit diagonal and [0, 1] range; throws ContractError.
void check_kernel_matrix(const KernelMatrix& kernel, double tol = 1e-12);

}  // namespace magma
