#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "magma/checkpoint.hpp"
#include "magma/tensor.hpp"

namespace magma {

struct VitConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t enc_depth = 4;
  std::size_t enc_dim = 32;
  std::size_t enc_heads = 4;
  std::size_t dec_depth = 1;
  std::size_t dec_dim = 32;
  std::size_t dec_heads = 4;
  std::size_t mlp_ratio = 4;
  double mask_ratio = 0.75;
  bool use_class_token = true;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  // Throws ConfigError.
  void validate() const;
};

// Per-sample random shuffle of patch indices; the first num_visible entries
// of each order are the visible patches, in that order.
struct MaskPlan {
  std::size_t num_patches = 0;
  std::size_t num_visible = 0;
  std::vector<std::vector<std::size_t>> order;
  std::vector<std::vector<bool>> masked;

  std::size_t batch() const { return order.size(); }
  std::size_t num_masked() const { return num_patches - num_visible; }
  std::vector<std::vector<std::size_t>> visible_indices() const;
  // Every patch visible, natural order (evaluation).
  static MaskPlan none(std::size_t batch, std::size_t num_patches);
};

// Number of masked patches, round-half-away-from-zero of ratio * P.
std::size_t masked_count(std::size_t num_patches, double mask_ratio);

// Sample b draws from the stream derive_seed(seed, {mask tag, epoch, step, b}).
MaskPlan make_mask(std::uint64_t seed, std::uint64_t epoch, std::uint64_t step, std::size_t batch,
                   std::size_t num_patches, double mask_ratio);

// images[B,C,H,W] -> [B,P,C*p*p]; patches in row-major grid order, each
// patch flattened as (row, col, channel).
Tensor patchify(const Tensor& images, const VitConfig& cfg);
Tensor unpatchify(const Tensor& patches, const VitConfig& cfg);

// Fixed 2-D sin-cos table [grid*grid, dim]; dim must be divisible by 4.
Tensor sincos_pos_embed(std::size_t dim, std::size_t grid);

struct LinearParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
};

struct NormParams {
  Tensor gain;
  Tensor bias;
};

struct BlockParams {
  NormParams norm1;
  LinearParams qkv;
  LinearParams proj;
  NormParams norm2;
  LinearParams fc1;
  LinearParams fc2;
};

struct EncodeOptions {
  bool keep_attention = false;  // softmax weights per block, [B,H,T,T]
  bool keep_keys = false;       // key vectors per block, heads concatenated, [B,T,D]
};

struct Encoded {
  // Block outputs after the residual add, before the final norm; 1-based.
  // Token 0 is the class token when enabled.
  std::map<int, Tensor> blocks;
  Tensor final;  // last block output through the final norm
  std::vector<Tensor> attention;
  std::vector<Tensor> keys;
  std::size_t num_visible = 0;
  bool has_class_token = false;
};

class VitMae {
 public:
  // Truncated-normal (std 0.02) linears, zero biases, unit norm gains,
  // normal (std 0.02) class and mask tokens.
  VitMae(const VitConfig& cfg, std::uint64_t seed);

  const VitConfig& config() const { return cfg_; }

  Encoded encode(const Tensor& images, const MaskPlan& plan, const EncodeOptions& opts = {}) const;
  // [B,P,patch_dim] predictions for every patch position.
  Tensor decode(const Encoded& encoded, const MaskPlan& plan) const;

  // Stable names, registration order: patch_embed, cls_token, enc.block{i},
  // enc.norm, dec.embed, dec.mask_token, dec.block{i}, dec.norm, dec.head.
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  // Parameters excluded from weight decay (biases, norm gains, tokens).
  bool decays(const std::string& name) const;

  // Copies values from a checkpoint; names and shapes must match exactly.
  void load(const std::vector<NamedTensor>& tensors);
  void set_requires_grad(bool on);

  const BlockParams& encoder_block(std::size_t i) const { return enc_blocks_.at(i); }
  const LinearParams& head() const { return dec_head_; }

 private:
  Tensor run_block(const Tensor& x, const BlockParams& p, std::size_t heads, Tensor* attention, Tensor* keys) const;

  VitConfig cfg_;
  LinearParams patch_embed_;
  Tensor cls_token_;
  std::vector<BlockParams> enc_blocks_;
  NormParams enc_norm_;
  LinearParams dec_embed_;
  Tensor mask_token_;
  std::vector<BlockParams> dec_blocks_;
  NormParams dec_norm_;
  LinearParams dec_head_;
  Tensor enc_pos_;  // [P, enc_dim], constant
  Tensor dec_pos_;  // [P, dec_dim], constant
  std::vector<NamedTensor> params_;
};

}  // namespace magma
