#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "magma/rng.hpp"
#include "magma/tensor.hpp"

namespace magma {

// In-memory image corpus. Images are sample-major, channel-major u8.
struct Dataset {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::uint32_t class_count = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint16_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return std::size_t{height} * width * channels; }
  std::span<const std::uint8_t> image(std::size_t i) const;
  std::vector<std::size_t> class_histogram() const;
  // Throws DataError.
  void validate() const;
};

// "MGDS" container: magic, u32 version 1, u32 N, H, W, C, class_count,
// N*C*H*W image bytes, N u16 labels; little-endian.
inline constexpr std::uint32_t kDatasetVersion = 1;

std::string encode_dataset(const Dataset& ds);
Dataset decode_dataset(const std::string& bytes);
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

struct SyntheticSpec {
  std::size_t class_count = 3;
  std::size_t per_class = 200;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  // Pixel noise std (in [0,1] intensity units); per-sample color jitter is
  // 1.5x this value.
  double noise = 0.1;
  std::uint64_t seed = 0;

  void validate() const;  // throws ValidationError
};

// Each class is an oriented sinusoidal grating with its own integer spatial
// frequency and base color. Class appearance does not depend on the seed,
// so containers generated with different seeds share classes (train/test).
// Sample i has label i % class_count.
Dataset generate_synthetic(const SyntheticSpec& spec);

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
};

// Population per-channel statistics of pixel/255; std floored at 1e-6.
NormStats compute_norm_stats(const Dataset& ds);

struct AugmentConfig {
  double scale_min = 0.08;
  double scale_max = 1.0;
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
  double hflip_prob = 0.5;
  std::size_t output_size = 32;
  NormStats norm;

  void validate() const;  // throws ConfigError
};

struct CropBox {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

// Area fraction uniform in [scale_min, scale_max], log-uniform aspect; ten
// attempts, then a center crop clamped to the aspect range.
CropBox sample_crop(std::size_t height, std::size_t width, const AugmentConfig& cfg, Rng& rng);

// Bilinear resize of a C x h x w crop of src (values in [0,1]) to C x S x S,
// half-pixel centers, edge-clamped.
std::vector<double> resized_crop(std::span<const double> src, std::size_t channels, std::size_t height,
                                 std::size_t width, const CropBox& box, std::size_t size);

void hflip(std::vector<double>& img, std::size_t channels, std::size_t size);
void normalize(std::vector<double>& img, const NormStats& norm, std::size_t channels);

// Image i scaled to [0,1].
std::vector<double> image_unit(const Dataset& ds, std::size_t i);

// Crop + flip, before normalization. Draws from the stream
// derive_seed(seed, {augment tag, epoch, sample_index}).
std::vector<double> augment_unnormalized(const Dataset& ds, std::size_t i, const AugmentConfig& cfg,
                                         std::uint64_t seed, std::uint64_t epoch);
std::vector<double> augment(const Dataset& ds, std::size_t i, const AugmentConfig& cfg, std::uint64_t seed,
                            std::uint64_t epoch);
// Resize to the output size and normalize; no randomness.
std::vector<double> eval_transform(const Dataset& ds, std::size_t i, std::size_t size, const NormStats& norm);

// Shuffled index batches for one epoch, deterministic in (seed, epoch).
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::uint64_t epoch, bool drop_last);

struct Batch {
  Tensor images;  // [B,C,S,S]
  std::vector<std::size_t> labels;
  std::vector<std::size_t> indices;
};

Batch train_batch(const Dataset& ds, const std::vector<std::size_t>& indices, const AugmentConfig& cfg,
                  std::uint64_t seed, std::uint64_t epoch);
Batch eval_batch(const Dataset& ds, const std::vector<std::size_t>& indices, std::size_t size,
                 const NormStats& norm);

}  // namespace magma
