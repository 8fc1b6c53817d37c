#pragma once

// Training loop with warm-up, early stopping and best-epoch selection, plus
// the patch pre-training and transfer protocols built on it.

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "patchtl/augmentation.hpp"
#include "patchtl/cohort.hpp"
#include "patchtl/losses.hpp"
#include "patchtl/metrics.hpp"
#include "patchtl/models.hpp"
#include "patchtl/patching.hpp"

namespace patchtl {

struct TrainConfig {
  std::size_t batch_size = 64;
  double lr_main = 1e-5;
  double lr_warmup = 1e-8;
  int warmup_epochs = 5;
  int max_epochs = 100;
  int early_stop_patience = 40;
  double early_stop_min_delta = 1e-4;
  double l2_coeff = 0.0;
  LossConfig loss;
  FreezePlan freeze;
  bool freeze_norm_stats = true;
  AugmentConfig augment;
  AdamConfig adam;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (!(lr_main > 0.0)) throw ValidationError("lr_main must be > 0");
    if (!(lr_warmup > 0.0)) throw ValidationError("lr_warmup must be > 0");
    if (warmup_epochs < 0) throw ValidationError("warmup_epochs must be >= 0");
    if (max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
    if (early_stop_patience < 1) throw ValidationError("early_stop_patience must be >= 1");
    if (!(early_stop_min_delta >= 0.0)) throw ValidationError("early_stop_min_delta must be >= 0");
    if (!(l2_coeff >= 0.0)) throw ValidationError("l2_coeff must be >= 0");
    loss.validate();
    augment.validate();
  }
};

/// Flat (N,C,H,W) image block with per-sample labels and owners.
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::string> patient_ids;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return images.size() / std::max<std::size_t>(size(), 1); }
  bool has_both_classes() const {
    const auto pos = std::count(labels.begin(), labels.end(), 1);
    return pos > 0 && std::size_t(pos) < labels.size();
  }
};

namespace train_detail {

inline void put_image(Dataset& d, std::size_t i, const Tensor& img, std::size_t channels) {
  const std::size_t n = img.size();
  for (std::size_t c = 0; c < channels; ++c) std::copy(img.data(), img.data() + n, d.images.data() + (i * channels + c) * n);
}

}  // namespace train_detail

/// Single-channel images become (N,channels,H,W), replicated per channel.
inline Dataset make_dataset(const std::vector<SliceSample>& samples, std::size_t channels = 1) {
  Dataset d;
  if (samples.empty()) return d;
  const std::size_t h = samples[0].image.dim(0), w = samples[0].image.dim(1);
  d.images = Tensor({samples.size(), channels, h, w});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].image.dim(0) != h || samples[i].image.dim(1) != w)
      throw ValidationError("dataset images differ in size");
    train_detail::put_image(d, i, samples[i].image, channels);
    d.labels.push_back(samples[i].label);
    d.patient_ids.push_back(samples[i].patient_id);
  }
  return d;
}

inline Dataset make_dataset(const std::vector<Patch>& patches, std::size_t channels = 1) {
  Dataset d;
  if (patches.empty()) return d;
  const std::size_t s = patches[0].pixels.dim(0);
  d.images = Tensor({patches.size(), channels, s, s});
  for (std::size_t i = 0; i < patches.size(); ++i) {
    train_detail::put_image(d, i, patches[i].pixels, channels);
    d.labels.push_back(patches[i].label);
    d.patient_ids.push_back(patches[i].patient_id);
  }
  return d;
}

/// Copies the listed samples into a (k,C,H,W) batch.
inline Tensor gather(const Dataset& d, std::span<const std::size_t> idx) {
  Shape shape = d.images.shape();
  shape[0] = idx.size();
  Tensor out(shape);
  const std::size_t n = d.sample_size();
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy_n(d.images.data() + idx[k] * n, n, out.data() + k * n);
  return out;
}

inline std::vector<double> predict_all(Backend& model, const Dataset& d, std::size_t batch = 256) {
  std::vector<double> out;
  out.reserve(d.size());
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < d.size(); i += batch) {
    idx.resize(std::min(batch, d.size() - i));
    std::iota(idx.begin(), idx.end(), i);
    const auto p = model.predict(gather(d, idx));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

enum class StopReason { kEarlyStop, kMaxEpochs };

inline std::string to_string(StopReason r) { return r == StopReason::kEarlyStop ? "EARLY_STOP" : "MAX_EPOCHS"; }

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_auc = 0.0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"lr", r.lr}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}, {"val_auc", r.val_auc}};
}

struct TrainHistory {
  std::vector<EpochRecord> records;
  int best_epoch = 0;
  StopReason stop_reason = StopReason::kMaxEpochs;

  const EpochRecord& best() const { return records.at(std::size_t(best_epoch - 1)); }
};

struct TrainOutcome {
  WeightMap best_weights;
  TrainHistory history;
};

struct TrainHooks {
  /// When set, every batch's owners must be in this set.
  const std::set<std::string>* allowed_patients = nullptr;
  std::function<void(const EpochRecord&)> on_epoch;
};

inline void check_patients(const std::vector<std::string>& ids, std::span<const std::size_t> idx,
                           const std::set<std::string>& allowed) {
  for (auto i : idx)
    if (!allowed.count(ids[i])) throw LeakageError("batch contains patient '" + ids[i] + "' outside the training split");
}

/// Adam on data loss + l2 * sum(w^2). Warm-up epochs run at lr_warmup and do
/// not count toward patience. The model is left holding the best weights.
inline TrainOutcome train(Backend& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                          const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.size() == 0) throw ValidationError("empty training set");
  if (!train_set.has_both_classes()) throw ValidationError("training set needs both classes");
  if (val_set.size() == 0) throw ValidationError("empty validation set");
  if (!val_set.has_both_classes()) throw UndefinedAucError("validation set has a single class; AUC undefined");

  Rng order_rng(derive_seed(cfg.seed, "train/order"));
  Rng aug_rng(derive_seed(cfg.seed, "train/augment"));
  TrainOutcome out;
  double best_auc = -1.0;
  double best_loss = std::numeric_limits<double>::infinity();
  int stale = 0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    model.begin_epoch(epoch);
    const bool warm = epoch <= cfg.warmup_epochs;
    const double lr = warm ? cfg.lr_warmup : cfg.lr_main;
    order_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    std::vector<int> labels;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + b, std::min(cfg.batch_size, order.size() - b));
      if (hooks.allowed_patients) check_patients(train_set.patient_ids, idx, *hooks.allowed_patients);
      Tensor batch = gather(train_set, idx);
      if (cfg.augment.enabled) {
        const std::size_t n = train_set.sample_size();
        Shape one(batch.shape().begin() + 1, batch.shape().end());
        for (std::size_t k = 0; k < idx.size(); ++k) {
          Tensor img(one, std::vector<float>(batch.data() + k * n, batch.data() + (k + 1) * n));
          img = augment(img, cfg.augment, aug_rng);
          std::copy_n(img.data(), n, batch.data() + k * n);
        }
      }
      labels.clear();
      for (auto i : idx) labels.push_back(train_set.labels[i]);
      const double l = model.train_step(batch, labels, cfg.loss, cfg.adam, lr, cfg.l2_coeff);
      if (!std::isfinite(l)) throw DivergenceError(epoch, "non-finite training loss");
      loss_sum += l * double(idx.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / double(order.size());
    const auto scores = predict_all(model, val_set);
    for (double s : scores)
      if (!std::isfinite(s)) throw DivergenceError(epoch, "non-finite validation output");
    rec.val_loss = mean_loss(cfg.loss, scores, val_set.labels);
    rec.val_auc = roc_auc(scores, val_set.labels).auc;
    out.history.records.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);

    if (rec.val_auc > best_auc) {
      best_auc = rec.val_auc;
      out.history.best_epoch = epoch;
      out.best_weights = model.export_weights();
    }
    if (warm) continue;
    if (rec.val_loss < best_loss - cfg.early_stop_min_delta) {
      best_loss = rec.val_loss;
      stale = 0;
    } else if (++stale >= cfg.early_stop_patience) {
      out.history.stop_reason = StopReason::kEarlyStop;
      break;
    }
  }
  model.import_weights(out.best_weights);
  return out;
}

// ---------------------------------------------------------------------------
// Protocols

struct StageResult {
  Checkpoint checkpoint;
  TrainHistory history;
};

struct StageContext {
  const SplitManifest* split = nullptr;  // enables leakage checks
  std::string config_hash;
  std::function<void(const EpochRecord&)> on_epoch;
};

namespace train_detail {

inline StageResult run_stage(Model& model, Domain domain, Modality modality, const Dataset& train_set,
                             const Dataset& val_set, const TrainConfig& cfg, const StageContext& ctx) {
  std::set<std::string> allowed;
  if (ctx.split) {
    allowed = ctx.split->patients_in(SplitSet::kTrain);
    for (const auto* d : {&train_set, &val_set})
      for (const auto& p : d->patient_ids)
        if (ctx.split->set_of(p) == SplitSet::kTest)
          throw LeakageError("patient '" + p + "' belongs to the test split");
  }
  apply_freeze(model, cfg.freeze, cfg.freeze_norm_stats);
  TrainHooks hooks{ctx.split ? &allowed : nullptr, ctx.on_epoch};
  auto outcome = train(model, train_set, val_set, cfg, hooks);
  StageResult r;
  r.history = std::move(outcome.history);
  r.checkpoint.weights = std::move(outcome.best_weights);
  r.checkpoint.meta.domain = domain;
  r.checkpoint.meta.modality = modality;
  r.checkpoint.meta.backbone = model.spec();
  r.checkpoint.meta.config_hash = ctx.config_hash;
  r.checkpoint.meta.best_val_auc = r.history.best().val_auc;
  r.checkpoint.meta.epoch = r.history.best_epoch;
  return r;
}

}  // namespace train_detail

/// Plain training on whole slices (the baseline protocol).
inline StageResult train_on_slices(Model& model, Modality modality, const Dataset& train_set, const Dataset& val_set,
                                   const TrainConfig& cfg, const StageContext& ctx = {}) {
  return train_detail::run_stage(model, Domain::kSlice, modality, train_set, val_set, cfg, ctx);
}

/// Source-domain training on patches of training-split patients.
inline StageResult pretrain_on_patches(Model& model, Modality modality, const Dataset& patch_train,
                                       const Dataset& patch_val, const TrainConfig& cfg, const StageContext& ctx = {}) {
  return train_detail::run_stage(model, Domain::kPatch, modality, patch_train, patch_val, cfg, ctx);
}

struct TransferResult {
  StageResult stage;
  Model model;  // holds the best weights
};

namespace train_detail {

inline TransferResult transfer(const Checkpoint& source, const BackboneSpec& target_spec, Modality target_modality,
                               const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                               const StageContext& ctx) {
  Model model = transplant_conv_stack(source, target_spec, derive_seed(cfg.seed, "transfer/head"));
  StageResult r = run_stage(model, Domain::kSlice, target_modality, train_set, val_set, cfg, ctx);
  r.checkpoint.meta.source_checkpoint_hash = source.hash();
  r.checkpoint.meta.source_modality = source.meta.modality;
  return {std::move(r), std::move(model)};
}

}  // namespace train_detail

/// Patch checkpoint -> same-modality slice classifier.
inline TransferResult self_transfer(const Checkpoint& patch_ckpt, const BackboneSpec& slice_spec, Modality modality,
                                    const Dataset& slice_train, const Dataset& slice_val, const TrainConfig& cfg,
                                    const StageContext& ctx = {}) {
  if (patch_ckpt.meta.domain != Domain::kPatch) throw ProtocolError("self transfer needs a patch-domain checkpoint");
  if (patch_ckpt.meta.modality != modality)
    throw ProtocolError("self transfer requires matching modalities (" + to_string(patch_ckpt.meta.modality) + " -> " +
                        to_string(modality) + "); use cross transfer");
  return train_detail::transfer(patch_ckpt, slice_spec, modality, slice_train, slice_val, cfg, ctx);
}

/// Patch checkpoint of one modality -> slice classifier of the other.
inline TransferResult cross_transfer(const Checkpoint& source_ckpt, const BackboneSpec& slice_spec,
                                     Modality target_modality, const Dataset& slice_train, const Dataset& slice_val,
                                     const TrainConfig& cfg, const StageContext& ctx = {}) {
  if (source_ckpt.meta.modality == target_modality)
    throw ProtocolError("cross transfer requires different modalities, both are " + to_string(target_modality));
  return train_detail::transfer(source_ckpt, slice_spec, target_modality, slice_train, slice_val, cfg, ctx);
}

inline Model model_from_checkpoint(const Checkpoint& ck) {
  Model m(ck.meta.backbone, build_network(ck.meta.backbone));
  m.import_weights(ck.weights);
  return m;
}

}  // namespace patchtl
