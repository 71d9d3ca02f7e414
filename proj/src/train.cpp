#include "magma/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "magma/checkpoint.hpp"
#include "magma/error.hpp"

namespace magma {

namespace {

std::vector<NamedTensor> snapshot(const VitMae& model) {
  std::vector<NamedTensor> out;
  for (const auto& p : model.parameters()) out.push_back({p.name, p.value.detach()});
  return out;
}

std::string join(const std::string& dir, const std::string& file) {
  return (std::filesystem::path(dir) / file).string();
}

constexpr std::uint64_t kInitStream = 0x696e6974;

}  // namespace

std::uint64_t model_init_seed(std::uint64_t seed) { return derive_seed(seed, {kInitStream}); }

void TrainConfig::validate(std::size_t dataset_size) const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (the regularizer needs pairs)");
  if (batch_size > dataset_size) {
    throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds the training set size " +
                      std::to_string(dataset_size));
  }
  if (warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be < epochs");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (!(lr_floor >= 0.0 && lr_floor <= lr)) throw ConfigError("lr_floor must lie in [0, lr]");
  if (knn_k == 0) throw ConfigError("knn_k must be positive");
}

std::string metrics_json(const EpochMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["loss_total"] = m.loss.total;
  j["loss_rec"] = m.loss.reconstruction;
  j["loss_reg"] = m.loss.regularizer;
  j["loss_unif"] = m.loss.uniformity;
  j["lambda_eff"] = m.loss.effective_lambda;
  j["lr"] = m.lr;
  j["imgs_per_sec"] = m.imgs_per_sec;
  j["online_knn"] = m.online_knn ? nlohmann::ordered_json(*m.online_knn) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

PretrainResult pretrain(VitMae& model, const PretrainInputs& in, const ObjectiveConfig& obj, const TrainConfig& cfg,
                        const std::function<void(const EpochMetrics&)>& on_epoch) {
  if (in.train == nullptr) throw ContractError("pretrain: no training set");
  const Dataset& train = *in.train;
  const VitConfig& vc = model.config();
  cfg.validate(train.size());
  obj.sched.validate();
  obj.reg.validate(static_cast<int>(vc.enc_depth));
  in.augment.validate();
  if (in.augment.output_size != vc.image_size) throw ConfigError("augment output size must equal the model image size");
  if (train.channels != vc.channels) throw ConfigError("dataset channels do not match the model");
  if (cfg.probe_interval > 0 && in.heldout == nullptr) throw ConfigError("online kNN needs a held-out dataset");

  std::ofstream metrics_file;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    metrics_file.open(join(cfg.out_dir, "metrics.jsonl"), std::ios::binary | std::ios::trunc);
    if (!metrics_file) throw IoError("cannot write " + join(cfg.out_dir, "metrics.jsonl"));
  }

  std::vector<bool> decay;
  for (const auto& p : model.parameters()) decay.push_back(model.decays(p.name));
  AdamW opt(model.parameters(), decay, cfg.adamw);
  model.set_requires_grad(true);

  const std::size_t steps_per_epoch = train.size() / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  const std::size_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;
  PretrainResult result;
  std::vector<NamedTensor> last_good = snapshot(model);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = batch_indices(train.size(), cfg.batch_size, cfg.seed, epoch, true);
    EpochMetrics em;
    em.epoch = epoch;
    double seconds = 0.0;
    try {
      for (std::size_t s = 0; s < batches.size(); ++s) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = lr_at(result.steps, total_steps, warmup_steps, cfg.lr, cfg.lr_floor);
        Batch batch = train_batch(train, batches[s], in.augment, cfg.seed, epoch);
        MaskPlan plan = make_mask(cfg.seed, epoch, s, batches[s].size(), vc.num_patches(), vc.mask_ratio);
        LossBreakdown parts;
        {
          Tape tape;
          Encoded enc = model.encode(batch.images, plan);
          Tensor pred = model.decode(enc, plan);
          LossResult loss = total_loss(pred, patchify(batch.images, vc), plan, enc, obj, static_cast<int>(epoch));
          parts = loss.parts;
          if (!std::isfinite(parts.total) || !std::isfinite(parts.regularizer)) {
            throw NonFiniteError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(s));
          }
          tape.backward(loss.total);
        }
        opt.step(lr);
        opt.zero_grad();
        seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ++result.steps;
        em.lr = lr;
        em.loss.total += parts.total;
        em.loss.reconstruction += parts.reconstruction;
        em.loss.regularizer += parts.regularizer;
        em.loss.uniformity += parts.uniformity;
        em.loss.effective_lambda = parts.effective_lambda;
      }
    } catch (const NonFiniteError&) {
      if (!cfg.out_dir.empty()) save_checkpoint(join(cfg.out_dir, "last_good.mgwt"), last_good);
      throw;
    }
    const double n = static_cast<double>(batches.size());
    em.loss.total /= n;
    em.loss.reconstruction /= n;
    em.loss.regularizer /= n;
    em.loss.uniformity /= n;
    em.imgs_per_sec = seconds > 0.0 ? static_cast<double>(batches.size() * cfg.batch_size) / seconds : 0.0;

    if (cfg.probe_interval > 0 && ((epoch + 1) % cfg.probe_interval == 0 || epoch + 1 == cfg.epochs)) {
      const Features tr = extract_features(model, train, in.augment.norm, FeatureKind::pooled_patches);
      const Features te = extract_features(model, *in.heldout, in.augment.norm, FeatureKind::pooled_patches);
      em.online_knn = knn_accuracy(tr, te, std::min(cfg.knn_k, tr.rows));
    }
    last_good = snapshot(model);
    if (metrics_file) {
      metrics_file << metrics_json(em) << '\n';
      metrics_file.flush();
    }
    if (!cfg.out_dir.empty() && cfg.checkpoint_interval > 0 && (epoch + 1) % cfg.checkpoint_interval == 0 &&
        epoch + 1 < cfg.epochs) {
      save_checkpoint(join(cfg.out_dir, "checkpoint_epoch" + std::to_string(epoch + 1) + ".mgwt"), last_good);
    }
    if (on_epoch) on_epoch(em);
    result.epochs.push_back(em);
  }
  if (!cfg.out_dir.empty()) save_checkpoint(join(cfg.out_dir, "final.mgwt"), model.parameters());
  return result;
}

}  // namespace magma
