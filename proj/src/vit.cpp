#include "magma/vit.hpp"

#include <cmath>

#include "magma/error.hpp"
#include "magma/rng.hpp"

namespace magma {

namespace {

constexpr std::uint64_t kMaskStream = 0x6d61736b;  // "mask"

Tensor trunc_normal(Rng& rng, const Shape& shape, double std) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.truncated_normal(std);
  return Tensor(shape, std::move(v));
}

Tensor normal(Rng& rng, const Shape& shape, double std) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = std * rng.normal();
  return Tensor(shape, std::move(v));
}

LinearParams make_linear(Rng& rng, std::size_t in, std::size_t out) {
  return {trunc_normal(rng, {out, in}, 0.02), Tensor::zeros({out})};
}

NormParams make_norm(std::size_t dim) { return {Tensor::ones({dim}), Tensor::zeros({dim})}; }

BlockParams make_block(Rng& rng, std::size_t dim, std::size_t mlp_ratio) {
  BlockParams b;
  b.norm1 = make_norm(dim);
  b.qkv = make_linear(rng, dim, 3 * dim);
  b.proj = make_linear(rng, dim, dim);
  b.norm2 = make_norm(dim);
  b.fc1 = make_linear(rng, dim, mlp_ratio * dim);
  b.fc2 = make_linear(rng, mlp_ratio * dim, dim);
  return b;
}

void add_linear(std::vector<NamedTensor>& out, const std::string& prefix, const LinearParams& p) {
  out.push_back({prefix + ".weight", p.weight});
  out.push_back({prefix + ".bias", p.bias});
}

void add_norm(std::vector<NamedTensor>& out, const std::string& prefix, const NormParams& p) {
  out.push_back({prefix + ".gain", p.gain});
  out.push_back({prefix + ".bias", p.bias});
}

void add_block(std::vector<NamedTensor>& out, const std::string& prefix, const BlockParams& b) {
  add_norm(out, prefix + ".norm1", b.norm1);
  add_linear(out, prefix + ".attn.qkv", b.qkv);
  add_linear(out, prefix + ".attn.proj", b.proj);
  add_norm(out, prefix + ".norm2", b.norm2);
  add_linear(out, prefix + ".mlp.fc1", b.fc1);
  add_linear(out, prefix + ".mlp.fc2", b.fc2);
}

// Constant [B, n, D] with row j of sample b taken from table[index[b][j]].
Tensor gather_rows(const Tensor& table, const std::vector<std::vector<std::size_t>>& index) {
  const std::size_t d = table.dim(1), n = index.front().size();
  std::vector<double> out(index.size() * n * d);
  for (std::size_t b = 0; b < index.size(); ++b)
    for (std::size_t j = 0; j < n; ++j)
      std::copy_n(table.data().begin() + index[b][j] * d, d, out.begin() + (b * n + j) * d);
  return Tensor({index.size(), n, d}, std::move(out));
}

}  // namespace

void VitConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (image_size == 0 || patch_size == 0 || channels == 0) fail("image_size, patch_size and channels must be positive");
  if (image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " not divisible by patch_size " + std::to_string(patch_size));
  }
  if (enc_depth == 0 || dec_depth == 0) fail("enc_depth and dec_depth must be positive");
  if (enc_heads == 0 || enc_dim % enc_heads != 0) fail("enc_dim must be divisible by enc_heads");
  if (dec_heads == 0 || dec_dim % dec_heads != 0) fail("dec_dim must be divisible by dec_heads");
  if (enc_dim % 4 != 0 || dec_dim % 4 != 0) fail("enc_dim and dec_dim must be divisible by 4 (2-D sin-cos positions)");
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) fail("mask_ratio must lie in (0, 1)");
  const std::size_t m = masked_count(num_patches(), mask_ratio);
  if (m < 1 || m + 1 > num_patches()) {
    fail("mask_ratio " + std::to_string(mask_ratio) + " masks " + std::to_string(m) + " of " +
         std::to_string(num_patches()) + " patches; need between 1 and P-1");
  }
}

// ---------------------------------------------------------------- masking

std::vector<std::vector<std::size_t>> MaskPlan::visible_indices() const {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(order.size());
  for (const auto& o : order) out.emplace_back(o.begin(), o.begin() + static_cast<std::ptrdiff_t>(num_visible));
  return out;
}

MaskPlan MaskPlan::none(std::size_t batch, std::size_t num_patches) {
  MaskPlan plan;
  plan.num_patches = num_patches;
  plan.num_visible = num_patches;
  std::vector<std::size_t> identity(num_patches);
  for (std::size_t i = 0; i < num_patches; ++i) identity[i] = i;
  plan.order.assign(batch, identity);
  plan.masked.assign(batch, std::vector<bool>(num_patches, false));
  return plan;
}

std::size_t masked_count(std::size_t num_patches, double mask_ratio) {
  return static_cast<std::size_t>(std::lround(mask_ratio * static_cast<double>(num_patches)));
}

MaskPlan make_mask(std::uint64_t seed, std::uint64_t epoch, std::uint64_t step, std::size_t batch,
                   std::size_t num_patches, double mask_ratio) {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must lie in (0, 1)");
  const std::size_t m = masked_count(num_patches, mask_ratio);
  if (m < 1 || m + 1 > num_patches) {
    throw ConfigError("mask_ratio " + std::to_string(mask_ratio) + " leaves no masked or no visible patch of " +
                      std::to_string(num_patches));
  }
  MaskPlan plan;
  plan.num_patches = num_patches;
  plan.num_visible = num_patches - m;
  for (std::size_t b = 0; b < batch; ++b) {
    Rng rng(derive_seed(seed, {kMaskStream, epoch, step, b}));
    auto order = rng.permutation(num_patches);
    std::vector<bool> masked(num_patches, true);
    for (std::size_t j = 0; j < plan.num_visible; ++j) masked[order[j]] = false;
    plan.order.push_back(std::move(order));
    plan.masked.push_back(std::move(masked));
  }
  return plan;
}

// ---------------------------------------------------------------- patches

Tensor patchify(const Tensor& images, const VitConfig& cfg) {
  const std::size_t s = cfg.image_size, c = cfg.channels, p = cfg.patch_size, g = cfg.grid();
  if (images.rank() != 4 || images.dim(1) != c || images.dim(2) != s || images.dim(3) != s) {
    throw DimensionError("patchify: expected [B," + std::to_string(c) + "," + std::to_string(s) + "," +
                         std::to_string(s) + "], got " + shape_str(images.shape()));
  }
  const std::size_t b = images.dim(0), pd = cfg.patch_dim();
  std::vector<double> out(images.numel());
  const auto in = images.data();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx) {
        double* dst = out.data() + (n * g * g + gy * g + gx) * pd;
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            for (std::size_t ch = 0; ch < c; ++ch)
              *dst++ = in[((n * c + ch) * s + gy * p + py) * s + gx * p + px];
      }
  return Tensor({b, g * g, pd}, std::move(out));
}

Tensor unpatchify(const Tensor& patches, const VitConfig& cfg) {
  const std::size_t s = cfg.image_size, c = cfg.channels, p = cfg.patch_size, g = cfg.grid(), pd = cfg.patch_dim();
  if (patches.rank() != 3 || patches.dim(1) != g * g || patches.dim(2) != pd) {
    throw DimensionError("unpatchify: expected [B," + std::to_string(g * g) + "," + std::to_string(pd) + "], got " +
                         shape_str(patches.shape()));
  }
  const std::size_t b = patches.dim(0);
  std::vector<double> out(patches.numel());
  const auto in = patches.data();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx) {
        const double* src = in.data() + (n * g * g + gy * g + gx) * pd;
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            for (std::size_t ch = 0; ch < c; ++ch)
              out[((n * c + ch) * s + gy * p + py) * s + gx * p + px] = *src++;
      }
  return Tensor({b, c, s, s}, std::move(out));
}

Tensor sincos_pos_embed(std::size_t dim, std::size_t grid) {
  if (dim % 4 != 0) throw ConfigError("positional embedding width must be divisible by 4");
  const std::size_t quarter = dim / 4;
  std::vector<double> out(grid * grid * dim);
  for (std::size_t y = 0; y < grid; ++y)
    for (std::size_t x = 0; x < grid; ++x) {
      double* row = out.data() + (y * grid + x) * dim;
      // first half encodes the column, second half the row
      for (std::size_t half = 0; half < 2; ++half) {
        const double pos = static_cast<double>(half == 0 ? x : y);
        for (std::size_t i = 0; i < quarter; ++i) {
          const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
          row[half * 2 * quarter + i] = std::sin(pos * omega);
          row[half * 2 * quarter + quarter + i] = std::cos(pos * omega);
        }
      }
    }
  return Tensor({grid * grid, dim}, std::move(out));
}

// ---------------------------------------------------------------- model

VitMae::VitMae(const VitConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t d = cfg_.enc_dim, dd = cfg_.dec_dim;
  patch_embed_ = make_linear(rng, cfg_.patch_dim(), d);
  if (cfg_.use_class_token) cls_token_ = normal(rng, {1, 1, d}, 0.02);
  for (std::size_t i = 0; i < cfg_.enc_depth; ++i) enc_blocks_.push_back(make_block(rng, d, cfg_.mlp_ratio));
  enc_norm_ = make_norm(d);
  dec_embed_ = make_linear(rng, d, dd);
  mask_token_ = normal(rng, {1, 1, dd}, 0.02);
  for (std::size_t i = 0; i < cfg_.dec_depth; ++i) dec_blocks_.push_back(make_block(rng, dd, cfg_.mlp_ratio));
  dec_norm_ = make_norm(dd);
  dec_head_ = make_linear(rng, dd, cfg_.patch_dim());
  enc_pos_ = sincos_pos_embed(d, cfg_.grid());
  dec_pos_ = sincos_pos_embed(dd, cfg_.grid());

  add_linear(params_, "patch_embed", patch_embed_);
  if (cfg_.use_class_token) params_.push_back({"cls_token", cls_token_});
  for (std::size_t i = 0; i < enc_blocks_.size(); ++i) add_block(params_, "enc.block" + std::to_string(i + 1), enc_blocks_[i]);
  add_norm(params_, "enc.norm", enc_norm_);
  add_linear(params_, "dec.embed", dec_embed_);
  params_.push_back({"dec.mask_token", mask_token_});
  for (std::size_t i = 0; i < dec_blocks_.size(); ++i) add_block(params_, "dec.block" + std::to_string(i + 1), dec_blocks_[i]);
  add_norm(params_, "dec.norm", dec_norm_);
  add_linear(params_, "dec.head", dec_head_);
  set_requires_grad(true);
}

std::size_t VitMae::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

bool VitMae::decays(const std::string& name) const {
  return name.size() >= 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

void VitMae::set_requires_grad(bool on) {
  for (auto& p : params_) p.value.set_requires_grad(on);
}

void VitMae::load(const std::vector<NamedTensor>& tensors) {
  if (tensors.size() != params_.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                          std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (tensors[i].name != params_[i].name) {
      throw CheckpointError("checkpoint tensor " + std::to_string(i) + " is '" + tensors[i].name + "', expected '" +
                            params_[i].name + "'");
    }
    if (tensors[i].value.shape() != params_[i].value.shape()) {
      throw CheckpointError("shape mismatch for '" + params_[i].name + "': " + shape_str(tensors[i].value.shape()) +
                            " vs " + shape_str(params_[i].value.shape()));
    }
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto dst = params_[i].value.mutable_data();
    const auto src = tensors[i].value.data();
    std::copy(src.begin(), src.end(), dst.begin());
    params_[i].value.zero_grad();
  }
}

Tensor VitMae::run_block(const Tensor& x, const BlockParams& p, std::size_t heads, Tensor* attention,
                         Tensor* keys) const {
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2), dh = d / heads;
  Tensor h = layer_norm(x, p.norm1.gain, p.norm1.bias);
  Tensor qkv = permute(reshape(linear(h, p.qkv.weight, p.qkv.bias), {b, t, 3, heads, dh}), {2, 0, 3, 1, 4});
  Tensor q = reshape(slice(qkv, 0, 0, 1), {b * heads, t, dh});
  Tensor k = reshape(slice(qkv, 0, 1, 1), {b * heads, t, dh});
  Tensor v = reshape(slice(qkv, 0, 2, 1), {b * heads, t, dh});
  Tensor att = softmax(scale(bmm(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh))), 2);
  if (attention) *attention = reshape(att, {b, heads, t, t}).detach();
  if (keys) *keys = reshape(permute(reshape(k, {b, heads, t, dh}), {0, 2, 1, 3}), {b, t, d}).detach();
  Tensor o = reshape(permute(reshape(bmm(att, v), {b, heads, t, dh}), {0, 2, 1, 3}), {b, t, d});
  Tensor y = add(x, linear(o, p.proj.weight, p.proj.bias));
  Tensor m = linear(gelu(linear(layer_norm(y, p.norm2.gain, p.norm2.bias), p.fc1.weight, p.fc1.bias)), p.fc2.weight,
                    p.fc2.bias);
  return add(y, m);
}

Encoded VitMae::encode(const Tensor& images, const MaskPlan& plan, const EncodeOptions& opts) const {
  const std::size_t b = images.dim(0);
  if (plan.batch() != b || plan.num_patches != cfg_.num_patches()) {
    throw ContractError("mask plan for " + std::to_string(plan.batch()) + "x" + std::to_string(plan.num_patches) +
                        " does not match batch " + std::to_string(b) + "x" + std::to_string(cfg_.num_patches()));
  }
  const auto visible = plan.visible_indices();
  Tensor patches = gather_tokens(patchify(images, cfg_), visible);
  Tensor x = add(linear(patches, patch_embed_.weight, patch_embed_.bias), gather_rows(enc_pos_, visible));
  if (cfg_.use_class_token) x = concat({repeat_batch(cls_token_, b), x}, 1);

  Encoded out;
  out.num_visible = plan.num_visible;
  out.has_class_token = cfg_.use_class_token;
  for (std::size_t i = 0; i < enc_blocks_.size(); ++i) {
    Tensor att, key;
    x = run_block(x, enc_blocks_[i], cfg_.enc_heads, opts.keep_attention ? &att : nullptr,
                  opts.keep_keys ? &key : nullptr);
    out.blocks[static_cast<int>(i + 1)] = x;
    if (opts.keep_attention) out.attention.push_back(att);
    if (opts.keep_keys) out.keys.push_back(key);
  }
  out.final = layer_norm(x, enc_norm_.gain, enc_norm_.bias);
  return out;
}

Tensor VitMae::decode(const Encoded& encoded, const MaskPlan& plan) const {
  const std::size_t b = encoded.final.dim(0), np = cfg_.num_patches(), dd = cfg_.dec_dim;
  if (plan.batch() != b || plan.num_visible != encoded.num_visible || plan.num_patches != np) {
    throw ContractError("decode: mask plan does not match the encoded batch");
  }
  const std::size_t off = encoded.has_class_token ? 1 : 0, nv = plan.num_visible;
  Tensor y = linear(encoded.final, dec_embed_.weight, dec_embed_.bias);
  Tensor seq = slice(y, 1, off, nv);
  if (nv < np) {
    Tensor fill = repeat_batch(reshape(repeat_batch(reshape(mask_token_, {1, dd}), np - nv), {1, np - nv, dd}), b);
    seq = concat({seq, fill}, 1);
  }
  // restore[b][p] = position of patch p in the shuffled sequence
  std::vector<std::vector<std::size_t>> restore(b, std::vector<std::size_t>(np));
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t j = 0; j < np; ++j) restore[n][plan.order[n][j]] = j;
  std::vector<std::vector<std::size_t>> natural(b, std::vector<std::size_t>(np));
  for (auto& row : natural)
    for (std::size_t j = 0; j < np; ++j) row[j] = j;
  Tensor z = add(gather_tokens(seq, restore), gather_rows(dec_pos_, natural));
  if (off) z = concat({slice(y, 1, 0, 1), z}, 1);
  for (const auto& blk : dec_blocks_) z = run_block(z, blk, cfg_.dec_heads, nullptr, nullptr);
  z = layer_norm(z, dec_norm_.gain, dec_norm_.bias);
  Tensor pred = linear(z, dec_head_.weight, dec_head_.bias);
  return off ? slice(pred, 1, 1, np) : pred;
}

}  // namespace magma
