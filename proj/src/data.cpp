#include "magma/data.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>

#include "magma/binary_io.hpp"
#include "magma/error.hpp"

namespace magma {

namespace {

constexpr std::uint64_t kSampleStream = 0x73616d706c;  // "sampl"
constexpr std::uint64_t kAugmentStream = 0x6175676d;   // "augm"
constexpr std::uint64_t kShuffleStream = 0x73687566;   // "shuf"

struct ClassLook {
  int fx = 1, fy = 0;
  std::vector<double> color;
};

// Nonzero integer frequency pairs up to 3 per axis, one per sign class,
// ordered by magnitude.
std::vector<std::pair<int, int>> frequency_table() {
  std::vector<std::pair<int, int>> out;
  for (int fx = 0; fx <= 3; ++fx)
    for (int fy = -3; fy <= 3; ++fy) {
      if (fx == 0 && fy <= 0) continue;
      out.emplace_back(fx, fy);
    }
  std::stable_sort(out.begin(), out.end(), [](auto a, auto b) {
    return a.first * a.first + a.second * a.second < b.first * b.first + b.second * b.second;
  });
  return out;
}

ClassLook class_look(std::size_t c, std::size_t class_count, std::size_t channels) {
  static const auto table = frequency_table();
  ClassLook look;
  std::tie(look.fx, look.fy) = table[c % table.size()];
  // hues evenly spaced around the color wheel; gray ramp for one channel
  const double hue = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(class_count);
  for (std::size_t k = 0; k < channels; ++k) {
    if (channels == 1) {
      look.color.push_back(0.35 + 0.3 * static_cast<double>(c) / static_cast<double>(std::max<std::size_t>(1, class_count - 1)));
    } else {
      look.color.push_back(0.5 + 0.15 * std::cos(hue - 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(channels)));
    }
  }
  return look;
}

double sample_pixel(Rng& rng, double base, double wave, double noise) {
  double v = base + wave + (noise > 0.0 ? noise * rng.normal() : 0.0);
  return std::clamp(v, 0.0, 1.0);
}

}  // namespace

// ---------------------------------------------------------------- container

std::span<const std::uint8_t> Dataset::image(std::size_t i) const {
  if (i >= size()) throw DataError("image index " + std::to_string(i) + " out of range " + std::to_string(size()));
  return {pixels.data() + i * image_bytes(), image_bytes()};
}

std::vector<std::size_t> Dataset::class_histogram() const {
  std::vector<std::size_t> h(class_count, 0);
  for (auto l : labels) {
    if (l < class_count) ++h[l];
  }
  return h;
}

void Dataset::validate() const {
  if (height == 0 || width == 0 || channels == 0) throw DataError("dataset dimensions must be positive");
  if (class_count == 0) throw DataError("dataset class_count must be positive");
  if (pixels.size() != size() * image_bytes()) {
    throw DataError("dataset payload holds " + std::to_string(pixels.size()) + " bytes, expected " +
                    std::to_string(size() * image_bytes()));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= class_count) {
      throw DataError("label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) + " >= class_count " +
                      std::to_string(class_count));
    }
  }
}

std::string encode_dataset(const Dataset& ds) {
  ds.validate();
  std::string out = "MGDS";
  binio::put_u32(out, kDatasetVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(ds.size()));
  binio::put_u32(out, ds.height);
  binio::put_u32(out, ds.width);
  binio::put_u32(out, ds.channels);
  binio::put_u32(out, ds.class_count);
  out.append(reinterpret_cast<const char*>(ds.pixels.data()), ds.pixels.size());
  for (auto l : ds.labels) binio::put_u16(out, l);
  return out;
}

Dataset decode_dataset(const std::string& bytes) {
  binio::Reader r(bytes);
  if (!r.has(28) || r.take(4) != "MGDS") throw DataError("not an MGDS container (bad magic or short header)");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) throw DataError("unsupported container version " + std::to_string(version));
  Dataset ds;
  const std::uint32_t n = r.u32();
  ds.height = r.u32();
  ds.width = r.u32();
  ds.channels = r.u32();
  ds.class_count = r.u32();
  const std::size_t payload = std::size_t{n} * ds.image_bytes() + 2 * std::size_t{n};
  if (r.remaining() != payload) {
    throw DataError("container payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                    std::to_string(payload));
  }
  const auto img = r.take(std::size_t{n} * ds.image_bytes());
  ds.pixels.assign(img.begin(), img.end());
  ds.labels.resize(n);
  for (auto& l : ds.labels) l = r.u16();
  ds.validate();
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) { binio::write_file(path, encode_dataset(ds)); }

Dataset load_dataset(const std::string& path) { return decode_dataset(binio::read_file(path)); }

// ---------------------------------------------------------------- synthetic

void SyntheticSpec::validate() const {
  if (class_count < 1 || class_count > 65535) throw ValidationError("class_count must be in [1, 65535]");
  if (per_class < 1) throw ValidationError("per_class must be >= 1");
  if (image_size < 1) throw ValidationError("image_size must be >= 1");
  if (channels < 1) throw ValidationError("channels must be >= 1");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ValidationError("noise must be a finite value >= 0");
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t s = spec.image_size, c = spec.channels, n = spec.class_count * spec.per_class;
  Dataset ds;
  ds.height = ds.width = static_cast<std::uint32_t>(s);
  ds.channels = static_cast<std::uint32_t>(c);
  ds.class_count = static_cast<std::uint32_t>(spec.class_count);
  ds.pixels.reserve(n * c * s * s);
  std::vector<ClassLook> looks;
  for (std::size_t k = 0; k < spec.class_count; ++k) looks.push_back(class_look(k, spec.class_count, c));

  constexpr double kAmplitude = 0.25;
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % spec.class_count;
    const ClassLook& look = looks[label];
    Rng rng(derive_seed(spec.seed, {kSampleStream, i}));
    const double phase = rng.uniform(0.0, two_pi);
    std::vector<double> color(c);
    for (std::size_t k = 0; k < c; ++k) color[k] = look.color[k] + (spec.noise > 0.0 ? 1.5 * spec.noise * rng.normal() : 0.0);
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          const double arg = two_pi * (look.fx * static_cast<double>(x) + look.fy * static_cast<double>(y)) /
                                 static_cast<double>(s) + phase;
          const double v = sample_pixel(rng, color[k], kAmplitude * std::sin(arg), spec.noise);
          ds.pixels.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
        }
    ds.labels.push_back(static_cast<std::uint16_t>(label));
  }
  return ds;
}

// ---------------------------------------------------------------- statistics

NormStats compute_norm_stats(const Dataset& ds) {
  if (ds.size() == 0) throw DataError("cannot compute statistics of an empty dataset");
  const std::size_t c = ds.channels, plane = std::size_t{ds.height} * ds.width;
  NormStats st;
  for (std::size_t k = 0; k < c; ++k) {
    double sum = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const std::uint8_t* p = ds.pixels.data() + i * ds.image_bytes() + k * plane;
      for (std::size_t j = 0; j < plane; ++j) sum += p[j] / 255.0;
    }
    const double count = static_cast<double>(ds.size() * plane);
    const double mu = sum / count;
    double var = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const std::uint8_t* p = ds.pixels.data() + i * ds.image_bytes() + k * plane;
      for (std::size_t j = 0; j < plane; ++j) var += (p[j] / 255.0 - mu) * (p[j] / 255.0 - mu);
    }
    st.mean.push_back(mu);
    st.std.push_back(std::max(std::sqrt(var / count), 1e-6));
  }
  return st;
}

// ---------------------------------------------------------------- transforms

void AugmentConfig::validate() const {
  if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0)) {
    throw ConfigError("crop scale must satisfy 0 < scale_min <= scale_max <= 1");
  }
  if (!(ratio_min > 0.0 && ratio_min <= ratio_max)) throw ConfigError("crop ratio must satisfy 0 < min <= max");
  if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) throw ConfigError("hflip_prob must lie in [0, 1]");
  if (output_size == 0) throw ConfigError("output_size must be positive");
  if (norm.mean.size() != norm.std.size()) throw ConfigError("normalization mean/std lengths differ");
}

CropBox sample_crop(std::size_t height, std::size_t width, const AugmentConfig& cfg, Rng& rng) {
  const double area = static_cast<double>(height * width);
  const double log_lo = std::log(cfg.ratio_min), log_hi = std::log(cfg.ratio_max);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(cfg.scale_min, cfg.scale_max);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const long w = std::lround(std::sqrt(target * aspect));
    const long h = std::lround(std::sqrt(target / aspect));
    if (w > 0 && h > 0 && static_cast<std::size_t>(w) <= width && static_cast<std::size_t>(h) <= height) {
      CropBox box;
      box.height = static_cast<std::size_t>(h);
      box.width = static_cast<std::size_t>(w);
      box.top = rng.uniform_int(height - box.height + 1);
      box.left = rng.uniform_int(width - box.width + 1);
      return box;
    }
  }
  const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
  CropBox box{0, 0, height, width};
  if (in_ratio < cfg.ratio_min) {
    box.height = static_cast<std::size_t>(std::lround(static_cast<double>(width) / cfg.ratio_min));
  } else if (in_ratio > cfg.ratio_max) {
    box.width = static_cast<std::size_t>(std::lround(static_cast<double>(height) * cfg.ratio_max));
  }
  box.top = (height - box.height) / 2;
  box.left = (width - box.width) / 2;
  return box;
}

std::vector<double> resized_crop(std::span<const double> src, std::size_t channels, std::size_t height,
                                 std::size_t width, const CropBox& box, std::size_t size) {
  std::vector<double> out(channels * size * size);
  const double sy = static_cast<double>(box.height) / static_cast<double>(size);
  const double sx = static_cast<double>(box.width) / static_cast<double>(size);
  auto coord = [](double pos, std::size_t extent, std::size_t& i0, std::size_t& i1, double& frac) {
    pos = std::clamp(pos, 0.0, static_cast<double>(extent - 1));
    i0 = static_cast<std::size_t>(std::floor(pos));
    i1 = std::min(i0 + 1, extent - 1);
    frac = pos - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < size; ++y) {
    std::size_t y0, y1;
    double fy;
    coord((static_cast<double>(y) + 0.5) * sy - 0.5, box.height, y0, y1, fy);
    for (std::size_t x = 0; x < size; ++x) {
      std::size_t x0, x1;
      double fx;
      coord((static_cast<double>(x) + 0.5) * sx - 0.5, box.width, x0, x1, fx);
      for (std::size_t k = 0; k < channels; ++k) {
        const double* plane = src.data() + k * height * width;
        auto at = [&](std::size_t r, std::size_t c) { return plane[(box.top + r) * width + box.left + c]; };
        const double top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        const double bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        out[(k * size + y) * size + x] = top * (1.0 - fy) + bot * fy;
      }
    }
  }
  return out;
}

void hflip(std::vector<double>& img, std::size_t channels, std::size_t size) {
  for (std::size_t k = 0; k < channels; ++k)
    for (std::size_t y = 0; y < size; ++y) {
      auto row = img.begin() + static_cast<std::ptrdiff_t>((k * size + y) * size);
      std::reverse(row, row + static_cast<std::ptrdiff_t>(size));
    }
}

void normalize(std::vector<double>& img, const NormStats& norm, std::size_t channels) {
  if (norm.mean.empty()) return;
  if (norm.mean.size() != channels) throw ConfigError("normalization stats do not match the channel count");
  const std::size_t plane = img.size() / channels;
  for (std::size_t k = 0; k < channels; ++k)
    for (std::size_t j = 0; j < plane; ++j) img[k * plane + j] = (img[k * plane + j] - norm.mean[k]) / norm.std[k];
}

std::vector<double> image_unit(const Dataset& ds, std::size_t i) {
  const auto img = ds.image(i);
  std::vector<double> out(img.size());
  for (std::size_t j = 0; j < img.size(); ++j) out[j] = img[j] / 255.0;
  return out;
}

std::vector<double> augment_unnormalized(const Dataset& ds, std::size_t i, const AugmentConfig& cfg,
                                         std::uint64_t seed, std::uint64_t epoch) {
  Rng rng(derive_seed(seed, {kAugmentStream, epoch, i}));
  const CropBox box = sample_crop(ds.height, ds.width, cfg, rng);
  std::vector<double> out = resized_crop(image_unit(ds, i), ds.channels, ds.height, ds.width, box, cfg.output_size);
  if (rng.uniform() < cfg.hflip_prob) hflip(out, ds.channels, cfg.output_size);
  return out;
}

std::vector<double> augment(const Dataset& ds, std::size_t i, const AugmentConfig& cfg, std::uint64_t seed,
                            std::uint64_t epoch) {
  std::vector<double> out = augment_unnormalized(ds, i, cfg, seed, epoch);
  normalize(out, cfg.norm, ds.channels);
  return out;
}

std::vector<double> eval_transform(const Dataset& ds, std::size_t i, std::size_t size, const NormStats& norm) {
  std::vector<double> out =
      resized_crop(image_unit(ds, i), ds.channels, ds.height, ds.width, {0, 0, ds.height, ds.width}, size);
  normalize(out, norm, ds.channels);
  return out;
}

// ---------------------------------------------------------------- batching

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::uint64_t epoch, bool drop_last) {
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (batch_size > n) {
    throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds dataset size " + std::to_string(n));
  }
  Rng rng(derive_seed(seed, {kShuffleStream, epoch}));
  const auto order = rng.permutation(n);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t len = std::min(batch_size, n - start);
    if (len < batch_size && drop_last) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(start + len));
  }
  return out;
}

namespace {

Batch assemble(const Dataset& ds, const std::vector<std::size_t>& indices, std::size_t size,
               const std::function<std::vector<double>(std::size_t)>& load) {
  Batch b;
  std::vector<double> data;
  data.reserve(indices.size() * ds.channels * size * size);
  for (std::size_t i : indices) {
    const auto img = load(i);
    data.insert(data.end(), img.begin(), img.end());
    b.labels.push_back(ds.labels.at(i));
  }
  b.indices = indices;
  b.images = Tensor({indices.size(), ds.channels, size, size}, std::move(data));
  return b;
}

}  // namespace

Batch train_batch(const Dataset& ds, const std::vector<std::size_t>& indices, const AugmentConfig& cfg,
                  std::uint64_t seed, std::uint64_t epoch) {
  return assemble(ds, indices, cfg.output_size, [&](std::size_t i) { return augment(ds, i, cfg, seed, epoch); });
}

Batch eval_batch(const Dataset& ds, const std::vector<std::size_t>& indices, std::size_t size,
                 const NormStats& norm) {
  return assemble(ds, indices, size, [&](std::size_t i) { return eval_transform(ds, i, size, norm); });
}

}  // namespace magma
