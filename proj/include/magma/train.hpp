#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "magma/data.hpp"
#include "magma/eval.hpp"
#include "magma/objectives.hpp"
#include "magma/optim.hpp"
#include "magma/vit.hpp"

namespace magma {

// Weight-initialization stream of a run, derived from its seed.
std::uint64_t model_init_seed(std::uint64_t seed);

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 50;
  std::size_t warmup_epochs = 5;
  double lr = 1.5e-3;
  double lr_floor = 0.0;
  AdamWConfig adamw;
  std::uint64_t seed = 0;
  // Online kNN every probe_interval epochs (0 disables) on the held-out set.
  std::size_t probe_interval = 0;
  std::size_t knn_k = 10;
  // Periodic checkpoint every checkpoint_interval epochs (0: final only).
  std::size_t checkpoint_interval = 0;
  // Output directory for metrics.jsonl and checkpoints; empty keeps
  // everything in memory.
  std::string out_dir;

  void validate(std::size_t dataset_size) const;  // throws ConfigError
};

struct EpochMetrics {
  std::size_t epoch = 0;
  LossBreakdown loss;  // means over the epoch's steps
  double lr = 0.0;     // at the epoch's last step
  double imgs_per_sec = 0.0;
  std::optional<double> online_knn;
};

// One JSON object: epoch, loss_total, loss_rec, loss_reg, loss_unif,
// lambda_eff, lr, imgs_per_sec, online_knn (null when not evaluated).
std::string metrics_json(const EpochMetrics& m);

struct PretrainResult {
  std::vector<EpochMetrics> epochs;
  std::size_t steps = 0;
};

struct PretrainInputs {
  const Dataset* train = nullptr;
  const Dataset* heldout = nullptr;  // required when probe_interval > 0
  AugmentConfig augment;             // carries the frozen norm stats
};

// Trains in place. Mask streams use (seed, epoch, step-in-epoch, sample);
// augmentation streams use (seed, epoch, sample index). A non-finite loss
// or gradient aborts with NonFiniteError after writing last_good.mgwt (the
// weights at the end of the last completed epoch) when out_dir is set.
PretrainResult pretrain(VitMae& model, const PretrainInputs& in, const ObjectiveConfig& obj, const TrainConfig& cfg,
                        const std::function<void(const EpochMetrics&)>& on_epoch = {});

}  // namespace magma
