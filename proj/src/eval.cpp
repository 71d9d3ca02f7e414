#include "magma/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "magma/error.hpp"
#include "magma/manifold_reg.hpp"
#include "magma/rng.hpp"

namespace magma {

namespace {

constexpr std::uint64_t kProbeStream = 0x70726f6265;  // "probe"

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

void require_compatible(const Features& a, const Features& b, const char* op) {
  if (a.dim != b.dim) {
    throw DimensionError(std::string(op) + ": feature widths differ (" + std::to_string(a.dim) + " vs " +
                         std::to_string(b.dim) + ")");
  }
}

}  // namespace

std::string to_string(FeatureKind k) { return k == FeatureKind::pooled_patches ? "pooled" : "class_token"; }

FeatureKind parse_feature_kind(const std::string& s) {
  if (s == "pooled") return FeatureKind::pooled_patches;
  if (s == "class_token") return FeatureKind::class_token;
  throw ConfigError("unknown feature kind '" + s + "' (expected pooled or class_token)");
}

Features extract_features(const VitMae& model, const Dataset& ds, const NormStats& norm, FeatureKind kind,
                          std::size_t batch_size) {
  const VitConfig& cfg = model.config();
  if (kind == FeatureKind::class_token && !cfg.use_class_token) {
    throw ConfigError("class-token features requested but the model has no class token");
  }
  if (ds.channels != cfg.channels) throw DataError("dataset channel count does not match the model");
  NoGradGuard guard;
  Features f;
  f.rows = ds.size();
  f.dim = cfg.enc_dim;
  f.values.reserve(f.rows * f.dim);
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, ds.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    Batch b = eval_batch(ds, idx, cfg.image_size, norm);
    Encoded e = model.encode(b.images, MaskPlan::none(idx.size(), cfg.num_patches()));
    const Tensor& last = e.blocks.at(static_cast<int>(cfg.enc_depth));
    Tensor z = kind == FeatureKind::pooled_patches ? pool_patches(last, e.has_class_token)
                                                   : reshape(slice(last, 1, 0, 1), {idx.size(), cfg.enc_dim});
    f.values.insert(f.values.end(), z.data().begin(), z.data().end());
    f.labels.insert(f.labels.end(), b.labels.begin(), b.labels.end());
  }
  return f;
}

// ---------------------------------------------------------------- kNN

std::vector<std::size_t> knn_predict(const Features& train, const Features& test, std::size_t k) {
  if (train.rows == 0) throw ContractError("knn: empty training set");
  if (k == 0 || k > train.rows) {
    throw ContractError("knn: k = " + std::to_string(k) + " must lie in [1, " + std::to_string(train.rows) + "]");
  }
  require_compatible(train, test, "knn");
  std::size_t classes = 0;
  for (std::size_t l : train.labels) classes = std::max(classes, l + 1);
  std::vector<std::size_t> pred(test.rows);
  std::vector<std::pair<double, std::size_t>> d(train.rows);
  for (std::size_t i = 0; i < test.rows; ++i) {
    for (std::size_t j = 0; j < train.rows; ++j) d[j] = {sq_dist(test.row(i), train.row(j), train.dim), j};
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    std::vector<std::size_t> votes(classes, 0);
    std::vector<double> dist_sum(classes, 0.0);
    for (std::size_t r = 0; r < k; ++r) {
      const std::size_t c = train.labels[d[r].second];
      ++votes[c];
      dist_sum[c] += std::sqrt(d[r].first);
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (votes[c] > votes[best] || (votes[c] == votes[best] && dist_sum[c] < dist_sum[best])) best = c;
    }
    pred[i] = best;
  }
  return pred;
}

double knn_accuracy(const Features& train, const Features& test, std::size_t k) {
  if (test.rows == 0) throw ContractError("knn: empty test set");
  const auto pred = knn_predict(train, test, k);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.rows; ++i) correct += pred[i] == test.labels[i];
  return static_cast<double>(correct) / static_cast<double>(test.rows);
}

// ---------------------------------------------------------------- DBI

double davies_bouldin(const Features& f) {
  std::size_t classes = 0;
  for (std::size_t l : f.labels) classes = std::max(classes, l + 1);
  std::vector<std::vector<double>> centroid(classes, std::vector<double>(f.dim, 0.0));
  std::vector<std::size_t> count(classes, 0);
  for (std::size_t i = 0; i < f.rows; ++i) {
    ++count[f.labels[i]];
    for (std::size_t k = 0; k < f.dim; ++k) centroid[f.labels[i]][k] += f.row(i)[k];
  }
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < classes; ++c) {
    if (count[c] == 0) continue;
    for (double& v : centroid[c]) v /= static_cast<double>(count[c]);
    present.push_back(c);
  }
  if (present.size() < 2) throw DegenerateInputError("davies_bouldin needs at least two populated classes");
  std::vector<double> scatter(classes, 0.0);
  for (std::size_t i = 0; i < f.rows; ++i) {
    scatter[f.labels[i]] += std::sqrt(sq_dist(f.row(i), centroid[f.labels[i]].data(), f.dim));
  }
  for (std::size_t c : present) scatter[c] /= static_cast<double>(count[c]);
  double total = 0.0;
  for (std::size_t a : present) {
    double worst = 0.0;
    for (std::size_t b : present) {
      if (a == b) continue;
      const double m = std::sqrt(sq_dist(centroid[a].data(), centroid[b].data(), f.dim));
      if (m == 0.0) return std::numeric_limits<double>::infinity();
      worst = std::max(worst, (scatter[a] + scatter[b]) / m);
    }
    total += worst;
  }
  return total / static_cast<double>(present.size());
}

// ---------------------------------------------------------------- linear probe

void ProbeConfig::validate() const {
  if (epochs == 0) throw ConfigError("probe epochs must be positive");
  if (!(lr > 0.0)) throw ConfigError("probe lr must be positive");
  if (batch_size == 0) throw ConfigError("probe batch_size must be positive");
  for (std::size_t m : milestones) {
    if (m >= epochs) {
      throw ConfigError("probe milestone " + std::to_string(m) + " must be < epochs " + std::to_string(epochs));
    }
  }
}

double probe_lr(std::size_t epoch, const ProbeConfig& cfg) {
  double lr = cfg.lr;
  for (std::size_t m : cfg.milestones) {
    if (epoch >= m) lr *= cfg.gamma;
  }
  return lr;
}

ProbeResult linear_probe(const Features& train, const Features& test, std::size_t class_count,
                         const ProbeConfig& cfg) {
  cfg.validate();
  require_compatible(train, test, "linear_probe");
  if (train.rows == 0 || test.rows == 0) throw ContractError("linear_probe: empty feature set");
  for (const Features* f : {&train, &test}) {
    for (std::size_t l : f->labels) {
      if (l >= class_count) {
        throw DataError("label " + std::to_string(l) + " out of range for " + std::to_string(class_count) + " classes");
      }
    }
  }
  const std::size_t d = train.dim;
  std::vector<double> mu(d, 0.0), sd(d, 1.0);
  if (cfg.standardize) {
    for (std::size_t i = 0; i < train.rows; ++i)
      for (std::size_t k = 0; k < d; ++k) mu[k] += train.row(i)[k];
    for (double& v : mu) v /= static_cast<double>(train.rows);
    std::fill(sd.begin(), sd.end(), 0.0);
    for (std::size_t i = 0; i < train.rows; ++i)
      for (std::size_t k = 0; k < d; ++k) sd[k] += (train.row(i)[k] - mu[k]) * (train.row(i)[k] - mu[k]);
    for (double& v : sd) v = std::max(std::sqrt(v / static_cast<double>(train.rows)), 1e-6);
  }
  auto prepare = [&](const Features& f, const std::vector<std::size_t>& rows) {
    std::vector<double> x(rows.size() * d);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t k = 0; k < d; ++k) x[r * d + k] = (f.row(rows[r])[k] - mu[k]) / sd[k];
    return Tensor({rows.size(), d}, std::move(x));
  };

  Tensor w = Tensor::zeros({class_count, d}, true);
  Tensor b = Tensor::zeros({class_count}, true);
  ProbeResult res;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = probe_lr(epoch, cfg);
    Rng rng(derive_seed(cfg.seed, {kProbeStream, epoch}));
    const auto order = rng.permutation(train.rows);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < train.rows; start += cfg.batch_size) {
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(std::min(start + cfg.batch_size, train.rows)));
      std::vector<std::size_t> labels;
      for (std::size_t r : rows) labels.push_back(train.labels[r]);
      Tape tape;
      Tensor loss = cross_entropy(linear(prepare(train, rows), w, b), labels);
      tape.backward(loss);
      loss_sum += loss.item();
      ++batches;
      for (Tensor* p : {&w, &b}) {
        auto data = p->mutable_data();
        const auto g = p->grad();
        for (std::size_t k = 0; k < data.size(); ++k) data[k] -= lr * g[k];
        p->zero_grad();
      }
    }
    res.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
  }
  auto accuracy = [&](const Features& f) {
    std::vector<std::size_t> all(f.rows);
    std::iota(all.begin(), all.end(), 0);
    Tensor logits = linear(prepare(f, all), w.detach(), b.detach());
    std::size_t correct = 0;
    for (std::size_t i = 0; i < f.rows; ++i) {
      const double* row = logits.data().data() + i * class_count;
      correct += static_cast<std::size_t>(std::max_element(row, row + class_count) - row) == f.labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(f.rows);
  };
  res.train_accuracy = accuracy(train);
  res.test_accuracy = accuracy(test);
  return res;
}

// ---------------------------------------------------------------- PCA / attention

PowerIteration leading_eigenpair(const std::vector<double>& c, std::size_t n, double tol, std::size_t max_iter) {
  if (c.size() != n * n || n == 0) throw DimensionError("leading_eigenpair: matrix is not " + std::to_string(n) + "^2");
  auto apply = [&](const std::vector<double>& v) {
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i] += c[i * n + j] * v[j];
    return out;
  };
  auto norm = [](const std::vector<double>& v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); };
  PowerIteration res;
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + static_cast<double>(i) / static_cast<double>(n);
  const double n0 = norm(v);
  for (double& x : v) x /= n0;
  for (res.iterations = 1; res.iterations <= max_iter; ++res.iterations) {
    std::vector<double> cv = apply(v);
    const double lambda = std::inner_product(v.begin(), v.end(), cv.begin(), 0.0);
    double r = 0.0;
    for (std::size_t i = 0; i < n; ++i) r += (cv[i] - lambda * v[i]) * (cv[i] - lambda * v[i]);
    res.eigenvalue = lambda;
    res.residual = std::sqrt(r) / std::max(std::abs(lambda), 1e-300);
    const double len = norm(cv);
    if (len == 0.0) {
      res.eigenvalue = 0.0;
      res.residual = 0.0;
      res.converged = true;
      break;
    }
    if (res.residual < tol) {
      res.converged = true;
      break;
    }
    for (std::size_t i = 0; i < n; ++i) v[i] = cv[i] / len;
  }
  res.iterations = std::min(res.iterations, max_iter);
  const auto big = std::max_element(v.begin(), v.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
  if (*big < 0.0) {
    for (double& x : v) x = -x;
  }
  res.vector = std::move(v);
  return res;
}

std::vector<LayerMap> pca_layer_maps(const VitMae& model, const Tensor& images) {
  const VitConfig& cfg = model.config();
  const std::size_t n = images.dim(0), np = cfg.num_patches(), d = cfg.enc_dim, g = cfg.grid();
  NoGradGuard guard;
  EncodeOptions opts;
  opts.keep_keys = true;
  Encoded e = model.encode(images, MaskPlan::none(n, np), opts);
  const std::size_t off = e.has_class_token ? 1 : 0, t = np + off;
  std::vector<LayerMap> out;
  for (std::size_t l = 0; l < e.keys.size(); ++l) {
    const auto keys = e.keys[l].data();
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < np; ++p)
        for (std::size_t k = 0; k < d; ++k) mean[k] += keys[(i * t + off + p) * d + k];
    for (double& v : mean) v /= static_cast<double>(n * np);
    std::vector<double> cov(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < np; ++p) {
        const double* x = keys.data() + (i * t + off + p) * d;
        for (std::size_t a = 0; a < d; ++a)
          for (std::size_t b = 0; b < d; ++b) cov[a * d + b] += (x[a] - mean[a]) * (x[b] - mean[b]);
      }
    for (double& v : cov) v /= static_cast<double>(n * np);
    LayerMap map;
    map.layer = static_cast<int>(l + 1);
    map.pca = leading_eigenpair(cov, d);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> grid(np);
      for (std::size_t p = 0; p < np; ++p) {
        const double* x = keys.data() + (i * t + off + p) * d;
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += (x[k] - mean[k]) * map.pca.vector[k];
        grid[p] = s;
      }
      map.per_image.push_back(resized_crop(grid, 1, g, g, {0, 0, g, g}, cfg.image_size));
    }
    out.push_back(std::move(map));
  }
  return out;
}

Tensor attention_maps(const VitMae& model, const Tensor& image) {
  const VitConfig& cfg = model.config();
  if (!cfg.use_class_token) throw ConfigError("attention maps need the class token (use_class_token = true)");
  if (image.rank() != 4 || image.dim(0) != 1) throw DimensionError("attention_maps expects a single image [1,C,H,W]");
  NoGradGuard guard;
  EncodeOptions opts;
  opts.keep_attention = true;
  const std::size_t np = cfg.num_patches(), h = cfg.enc_heads, g = cfg.grid(), t = np + 1;
  Encoded e = model.encode(image, MaskPlan::none(1, np), opts);
  const auto att = e.attention.back().data();
  std::vector<double> out(h * np);
  for (std::size_t head = 0; head < h; ++head)
    for (std::size_t p = 0; p < np; ++p) out[head * np + p] = att[head * t * t + 1 + p];
  return Tensor({h, g, g}, std::move(out));
}

// ---------------------------------------------------------------- exports

std::string format_matrix(std::size_t rows, std::size_t cols, const std::vector<double>& values) {
  if (values.size() != rows * cols) throw DimensionError("format_matrix: value count does not match rows x cols");
  std::string out = std::to_string(rows) + " " + std::to_string(cols) + "\n";
  char buf[32];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", values[r * cols + c]);
      if (c) out += ' ';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

std::string format_pgm(std::size_t rows, std::size_t cols, const std::vector<double>& values) {
  if (values.size() != rows * cols) throw DimensionError("format_pgm: value count does not match rows x cols");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double span = *hi - *lo;
  std::string out = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  for (double v : values) {
    const double u = span > 0.0 ? (v - *lo) / span : 0.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(u * 255.0))));
  }
  return out;
}

}  // namespace magma
