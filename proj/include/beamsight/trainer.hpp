#pragma once

// Mini-batch SGD with momentum, epoch bookkeeping, confusion matrices and the
// transfer-versus-scratch experiment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "beamsight/checkpoint.hpp"
#include "beamsight/dataset.hpp"
#include "beamsight/error.hpp"
#include "beamsight/graph.hpp"
#include "beamsight/parallel.hpp"
#include "beamsight/random.hpp"
#include "beamsight/resnet.hpp"

namespace beamsight {

struct HParams {
  std::size_t batch_size = 16;
  std::size_t epochs = 20;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  bool augment = true;

  void validate() const {
    if (batch_size < 1) fail(ErrorKind::InvalidConfig, "batch_size must be >= 1");
    if (epochs < 1) fail(ErrorKind::InvalidConfig, "epochs must be >= 1");
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) fail(ErrorKind::InvalidConfig, "learning_rate must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) fail(ErrorKind::InvalidConfig, "momentum must be in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const HParams& h) {
  j = {{"batch_size", h.batch_size}, {"epochs", h.epochs},   {"learning_rate", h.learning_rate},
       {"momentum", h.momentum},     {"seed", h.seed},       {"augment", h.augment}};
}

inline void from_json(const nlohmann::json& j, HParams& h) {
  h.batch_size = j.value("batch_size", h.batch_size);
  h.epochs = j.value("epochs", h.epochs);
  h.learning_rate = j.value("learning_rate", h.learning_rate);
  h.momentum = j.value("momentum", h.momentum);
  h.seed = j.value("seed", h.seed);
  h.augment = j.value("augment", h.augment);
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_accuracy = 0.0;
  double validation_accuracy = 0.0;
  double mean_loss = 0.0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

/// counts[actual][predicted]; class 0 is Hazardous, class 1 NonHazardous.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 2) : k_(classes), counts_(classes * classes, 0) {}

  static ConfusionMatrix from_counts(std::size_t classes, std::vector<std::size_t> counts) {
    if (counts.size() != classes * classes) fail(ErrorKind::ShapeMismatch, "confusion counts must be K*K");
    ConfusionMatrix m(classes);
    m.counts_ = std::move(counts);
    return m;
  }

  std::size_t classes() const { return k_; }
  std::size_t& at(std::size_t actual, std::size_t predicted) { return counts_.at(actual * k_ + predicted); }
  std::size_t at(std::size_t actual, std::size_t predicted) const { return counts_.at(actual * k_ + predicted); }
  void add(std::size_t actual, std::size_t predicted) { ++at(actual, predicted); }

  std::size_t total() const {
    std::size_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }
  std::size_t trace() const {
    std::size_t t = 0;
    for (std::size_t i = 0; i < k_; ++i) t += at(i, i);
    return t;
  }
  std::size_t row_sum(std::size_t actual) const {
    std::size_t t = 0;
    for (std::size_t p = 0; p < k_; ++p) t += at(actual, p);
    return t;
  }
  double accuracy() const { return total() ? static_cast<double>(trace()) / static_cast<double>(total()) : 0.0; }
  /// Per-class recall; 0 for a class with no samples.
  double recall(std::size_t actual) const {
    const std::size_t n = row_sum(actual);
    return n ? static_cast<double>(at(actual, actual)) / static_cast<double>(n) : 0.0;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t k_;
  std::vector<std::size_t> counts_;
};

inline std::string class_name(std::size_t c, std::size_t classes) {
  return classes == 2 ? label_name(static_cast<int>(c)) : "class" + std::to_string(c);
}

inline std::string confusion_text(const ConfusionMatrix& m) {
  std::ostringstream os;
  os << "actual\\predicted";
  for (std::size_t p = 0; p < m.classes(); ++p) os << '\t' << class_name(p, m.classes());
  os << '\n';
  for (std::size_t a = 0; a < m.classes(); ++a) {
    os << class_name(a, m.classes());
    for (std::size_t p = 0; p < m.classes(); ++p) os << '\t' << m.at(a, p);
    os << '\n';
  }
  os << std::fixed << std::setprecision(4);
  os << "accuracy\t" << m.accuracy() << "\t(" << m.trace() << "/" << m.total() << ")\n";
  for (std::size_t a = 0; a < m.classes(); ++a)
    os << "recall_" << class_name(a, m.classes()) << '\t' << m.recall(a) << "\t(" << m.at(a, a) << "/" << m.row_sum(a)
       << ")\n";
  return os.str();
}

inline std::string history_tsv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch\ttrain_acc\tval_acc\tloss\n" << std::setprecision(9);
  for (const auto& r : history)
    os << r.epoch << '\t' << r.train_accuracy << '\t' << r.validation_accuracy << '\t' << r.mean_loss << '\n';
  return os.str();
}

template <typename T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t k = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (logits[row * k + j] > logits[row * k + best]) best = j;
  return best;
}

inline constexpr std::size_t kEvalBatch = 32;

/// Eval-mode argmax predictions. Never touches the model's mode or statistics.
template <typename T>
std::vector<std::size_t> predict(const Model<T>& model, const std::vector<ImageSample>& data) {
  std::vector<std::size_t> out(data.size());
  for (std::size_t lo = 0; lo < data.size(); lo += kEvalBatch) {
    const std::size_t hi = std::min(data.size(), lo + kEvalBatch);
    std::vector<const ImageSample*> batch;
    for (std::size_t i = lo; i < hi; ++i) batch.push_back(&data[i]);
    const Tensor<T> logits = model.classify(to_batch<T>(batch));
    for (std::size_t i = lo; i < hi; ++i) out[i] = argmax_row(logits, i - lo);
  }
  return out;
}

template <typename T>
ConfusionMatrix evaluate(const Model<T>& model, const std::vector<ImageSample>& data) {
  if (data.empty()) fail(ErrorKind::EmptyDataset, "evaluation set is empty");
  const std::size_t k = model.config().num_classes;
  ConfusionMatrix m(k);
  const auto pred = predict(model, data);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].label < 0 || static_cast<std::size_t>(data[i].label) >= k)
      fail(ErrorKind::InvalidConfig, "label outside the model's classes");
    m.add(static_cast<std::size_t>(data[i].label), pred[i]);
  }
  return m;
}

/// Raised when the training loss becomes non-finite; carries the last finite model.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::vector<std::uint8_t> checkpoint)
      : Error(ErrorKind::DivergedLoss, what), checkpoint_(std::move(checkpoint)) {}
  const std::vector<std::uint8_t>& last_checkpoint() const noexcept { return checkpoint_; }

 private:
  std::vector<std::uint8_t> checkpoint_;
};

template <typename T>
struct TrainResult {
  std::vector<EpochRecord> history;
  Model<T> best;
  std::size_t best_epoch = 0;
  double best_accuracy = -1.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// SGD with momentum (v = mu v + g; p -= lr v) on unfrozen parameters. Batches
/// are reshuffled every epoch and the short final batch is kept; training
/// samples are re-augmented each epoch from streams keyed by (seed, epoch, sample).
template <typename T>
TrainResult<T> train(Model<T>& model, const std::vector<ImageSample>& train_set, const std::vector<ImageSample>& val_set,
                     const HParams& hp, const EpochCallback& on_epoch = {}) {
  hp.validate();
  if (train_set.empty()) fail(ErrorKind::EmptyDataset, "training set is empty");
  if (val_set.empty()) fail(ErrorKind::EmptyDataset, "validation set is empty");

  std::vector<Tensor<T>> velocity;
  for (const auto& p : model.params()) velocity.emplace_back(p.value.shape());

  TrainResult<T> result;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= hp.epochs; ++epoch) {
    model.set_mode(Mode::train);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RandomStream shuffle = keyed_stream(hp.seed, hash_label("shuffle"), epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0, batch_index = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += hp.batch_size, ++batch_index) {
      const std::size_t hi = std::min(order.size(), lo + hp.batch_size);
      std::vector<ImageSample> augmented(hi - lo);
      std::vector<const ImageSample*> batch(hi - lo);
      std::vector<int> labels(hi - lo);
      parallel_for(lo, hi, [&](std::size_t i) {
        const ImageSample& s = train_set[order[i]];
        if (hp.augment) {
          RandomStream rng = augment_stream(hp.seed, epoch, s);
          augmented[i - lo] = augment(s, rng);
          batch[i - lo] = &augmented[i - lo];
        } else {
          batch[i - lo] = &s;
        }
        labels[i - lo] = s.label;
      });

      Graph<T> g;
      ForwardOptions opt;
      opt.mode = Mode::train;
      opt.dropout_stream = keyed_stream(hp.seed, hash_label("dropout"), epoch, batch_index);
      std::optional<Gradients<T>> grads;
      NodeId loss_id{};
      ForwardPass<T> pass;
      const auto bn_before = model.batch_norms();
      try {
        pass = model.forward(g, to_batch<T>(batch), opt);
        loss_id = g.softmax_xent(pass.logits, labels);
        grads.emplace(g.backward(loss_id));
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::NonFinite) throw;
        model.batch_norms() = bn_before;
        model.set_mode(Mode::eval);
        throw TrainingDiverged("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index) + ": " + e.what(),
                               checkpoint_bytes(model));
      }
      const Tensor<T>& logits = g.value(pass.logits);
      for (std::size_t i = 0; i < labels.size(); ++i) correct += argmax_row(logits, i) == static_cast<std::size_t>(labels[i]);
      seen += labels.size();
      loss_sum += static_cast<double>(g.value(loss_id)[0]) * static_cast<double>(labels.size());

      // Stage every update first so a non-finite step leaves the model untouched.
      const T lr = static_cast<T>(hp.learning_rate), mu = static_cast<T>(hp.momentum);
      std::vector<std::pair<Tensor<T>, Tensor<T>>> staged(model.params().size());
      for (std::size_t pi = 0; pi < model.params().size(); ++pi) {
        const auto& p = model.params()[pi];
        if (p.frozen) continue;
        const Tensor<T> grad = grads->of(pass.params[pi]);
        Tensor<T> v = velocity[pi], w = p.value;
        for (std::size_t j = 0; j < grad.size(); ++j) {
          v[j] = mu * v[j] + grad[j];
          w[j] -= lr * v[j];
        }
        if (!w.all_finite() || !v.all_finite()) {
          model.batch_norms() = bn_before;
          model.set_mode(Mode::eval);
          throw TrainingDiverged("epoch " + std::to_string(epoch) + ": update of " + p.name + " is non-finite",
                                 checkpoint_bytes(model));
        }
        staged[pi] = {std::move(v), std::move(w)};
      }
      for (std::size_t pi = 0; pi < model.params().size(); ++pi) {
        if (model.params()[pi].frozen) continue;
        velocity[pi] = std::move(staged[pi].first);
        model.params()[pi].value = std::move(staged[pi].second);
      }
    }

    model.set_mode(Mode::eval);
    std::optional<ConfusionMatrix> cm;
    try {
      cm.emplace(evaluate(model, val_set));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NonFinite) throw;
      throw TrainingDiverged("epoch " + std::to_string(epoch) + " evaluation: " + e.what(), checkpoint_bytes(model));
    }
    EpochRecord rec{epoch, static_cast<double>(correct) / static_cast<double>(seen), cm->accuracy(),
                    loss_sum / static_cast<double>(seen)};
    result.history.push_back(rec);
    if (rec.validation_accuracy > result.best_accuracy) {
      result.best_accuracy = rec.validation_accuracy;
      result.best_epoch = epoch;
      result.best = model;
    }
    if (on_epoch) on_epoch(rec);
  }
  model.set_mode(Mode::eval);
  return result;
}

// ---------------------------------------------------------------------------
// Transfer experiment

struct TransferOptions {
  ModelConfig model;                 // target architecture (num_classes = 2)
  std::uint64_t seed = 0;
  HParams source_hparams;            // Stage A
  HParams target_hparams;            // Stage B and the scratch arm
  double source_val_fraction = 0.2;
};

template <typename T>
struct ArmReport {
  std::vector<EpochRecord> history;
  Model<T> best;
  std::size_t best_epoch = 0;
  double best_accuracy = 0.0;
  std::size_t trained_parameters = 0;
};

template <typename T>
struct TransferReport {
  std::vector<EpochRecord> pretrain_history;  // Stage A, source task
  double pretrain_best_accuracy = 0.0;
  ArmReport<T> transfer;
  ArmReport<T> scratch;
  bool frozen_backbone_identical = false;
};

/// True when every non-head parameter and every batch-norm buffer of `a` and `b` match byte for byte.
template <typename T>
bool backbone_identical(const Model<T>& a, const Model<T>& b) {
  if (a.params().size() != b.params().size() || a.batch_norms().size() != b.batch_norms().size()) return false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    if (Model<T>::is_head(a.params()[i].name)) continue;
    if (!bitwise_equal(a.params()[i].value, b.params()[i].value)) return false;
  }
  for (std::size_t i = 0; i < a.batch_norms().size(); ++i) {
    if (!bitwise_equal(a.batch_norms()[i].stats.running_mean, b.batch_norms()[i].stats.running_mean)) return false;
    if (!bitwise_equal(a.batch_norms()[i].stats.running_var, b.batch_norms()[i].stats.running_var)) return false;
  }
  return true;
}

using StageCallback = std::function<void(const std::string& stage, const EpochRecord&)>;

/// Stage A pretrains every parameter on the source task; Stage B resets the
/// head, freezes everything else and trains on the target. The scratch arm
/// trains an identically configured fresh model on the target with Stage B's budget.
template <typename T = float>
TransferReport<T> transfer_experiment(const std::vector<ImageSample>& source_set, const std::vector<ImageSample>& target_train,
                                      const std::vector<ImageSample>& target_val, const TransferOptions& opt,
                                      const StageCallback& on_epoch = {}) {
  if (source_set.empty()) fail(ErrorKind::EmptyDataset, "source set is empty");
  int source_classes = 0;
  for (const auto& s : source_set) source_classes = std::max(source_classes, s.label + 1);
  if (source_classes < 2) fail(ErrorKind::InvalidConfig, "source task needs at least 2 classes");

  auto cb = [&](const std::string& stage) -> EpochCallback {
    if (!on_epoch) return {};
    return [&on_epoch, stage](const EpochRecord& r) { on_epoch(stage, r); };
  };

  SplitSpec sspec;
  sspec.val_fraction = opt.source_val_fraction;
  sspec.seed = opt.seed;
  sspec.group_by_source = false;
  const Split source = split(source_set, sspec);

  TransferReport<T> report;
  ModelConfig source_cfg = opt.model;
  source_cfg.num_classes = static_cast<std::size_t>(source_classes);
  Model<T> pre = build_model<T>(source_cfg, keyed_stream(opt.seed, hash_label("stage-a")).next_u64());
  pre.apply_freeze_policy(FreezePolicy::none);
  HParams hp_a = opt.source_hparams;
  TrainResult<T> a = train(pre, source.train, source.val, hp_a, cb("pretrain"));
  report.pretrain_history = a.history;
  report.pretrain_best_accuracy = a.best_accuracy;

  Model<T> tl = a.best;
  tl.reset_head(opt.model.num_classes, keyed_stream(opt.seed, hash_label("head")).next_u64());
  tl.apply_freeze_policy(FreezePolicy::head_only);
  report.transfer.trained_parameters = tl.trainable_parameter_count();
  TrainResult<T> b = train(tl, target_train, target_val, opt.target_hparams, cb("transfer"));
  report.transfer.history = b.history;
  report.transfer.best = b.best;
  report.transfer.best_epoch = b.best_epoch;
  report.transfer.best_accuracy = b.best_accuracy;
  report.frozen_backbone_identical = backbone_identical(a.best, b.best) && backbone_identical(a.best, tl);

  Model<T> fresh = build_model<T>(opt.model, keyed_stream(opt.seed, hash_label("scratch")).next_u64());
  fresh.apply_freeze_policy(FreezePolicy::none);
  report.scratch.trained_parameters = fresh.trainable_parameter_count();
  TrainResult<T> s = train(fresh, target_train, target_val, opt.target_hparams, cb("scratch"));
  report.scratch.history = s.history;
  report.scratch.best = s.best;
  report.scratch.best_epoch = s.best_epoch;
  report.scratch.best_accuracy = s.best_accuracy;
  return report;
}

}  // namespace beamsight
