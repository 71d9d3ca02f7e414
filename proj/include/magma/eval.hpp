#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "magma/data.hpp"
#include "magma/tensor.hpp"
#include "magma/vit.hpp"

namespace magma {

enum class FeatureKind { pooled_patches, class_token };

std::string to_string(FeatureKind k);
FeatureKind parse_feature_kind(const std::string& s);

// Row-major [N, D] feature matrix with its labels.
struct Features {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<double> values;
  std::vector<std::size_t> labels;

  const double* row(std::size_t i) const { return values.data() + i * dim; }
};

// Last encoder block output on unmasked, eval-transformed images; the
// pooled variant averages the patch tokens. Runs without a tape.
Features extract_features(const VitMae& model, const Dataset& ds, const NormStats& norm, FeatureKind kind,
                          std::size_t batch_size = 64);

// ---------------------------------------------------------------- kNN

// Neighbors ordered by (distance, train index). Vote ties go to the class
// with the smallest summed neighbor distance, then the lowest class index.
std::vector<std::size_t> knn_predict(const Features& train, const Features& test, std::size_t k);
double knn_accuracy(const Features& train, const Features& test, std::size_t k);

// ---------------------------------------------------------------- DBI

// Mean over classes of max_{j != i} (S_i + S_j) / M_ij; +infinity when two
// centroids coincide. Only classes with at least one point take part.
double davies_bouldin(const Features& feats);

// ---------------------------------------------------------------- linear probe

struct ProbeConfig {
  std::size_t epochs = 100;
  double lr = 0.1;
  std::vector<std::size_t> milestones = {60, 80};
  double gamma = 0.1;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  // Standardize features with the train-set mean and std before the probe.
  bool standardize = true;

  void validate() const;  // throws ConfigError
};

// lr * gamma^(number of milestones <= epoch).
double probe_lr(std::size_t epoch, const ProbeConfig& cfg);

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

// Softmax regression trained by plain SGD on fixed features.
ProbeResult linear_probe(const Features& train, const Features& test, std::size_t class_count,
                         const ProbeConfig& cfg);

// ---------------------------------------------------------------- PCA / attention

struct PowerIteration {
  std::vector<double> vector;  // unit norm, largest-magnitude entry positive
  double eigenvalue = 0.0;
  double residual = 0.0;       // ||C v - lambda v|| / max(|lambda|, tiny)
  std::size_t iterations = 0;
  bool converged = false;
};

// Leading eigenpair of a symmetric PSD matrix [n, n] (row-major).
PowerIteration leading_eigenpair(const std::vector<double>& matrix, std::size_t n, double tol = 1e-9,
                                 std::size_t max_iter = 1000);

struct LayerMap {
  int layer = 0;
  std::vector<std::vector<double>> per_image;  // image_size x image_size each
  PowerIteration pca;
};

// Per layer: key vectors of every patch token across the image set,
// centered, projected on the leading principal axis, reshaped to the patch
// grid and bilinearly upsampled to the image size.
std::vector<LayerMap> pca_layer_maps(const VitMae& model, const Tensor& images);

// Class-token attention over the patch grid for each head of the last
// block: [heads, grid, grid]. Requires the class token.
Tensor attention_maps(const VitMae& model, const Tensor& image);

// ---------------------------------------------------------------- exports

// "rows cols" header, then one line per row of %.17g values.
std::string format_matrix(std::size_t rows, std::size_t cols, const std::vector<double>& values);
// Binary P5 PGM, min-max scaled to 0..255 (constant input maps to 0).
std::string format_pgm(std::size_t rows, std::size_t cols, const std::vector<double>& values);

}  // namespace magma
