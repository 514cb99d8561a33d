#pragma once

// Loss, AdamW, the warmup / plateau / cosine learning-rate schedule, the
// freeze schedule, the training loop, grid search and deep ensembles.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <future>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "marmot/metrics.hpp"
#include "marmot/model.hpp"

namespace marmot {

struct AdamConfig {
  double eps = 1e-8;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 0.01;

  bool operator==(const AdamConfig&) const = default;
};

struct TrainConfig {
  double learning_rate = 5e-5;
  std::size_t batch_size = 16;
  std::size_t epochs = 8;
  double warmup_fraction = 0.10;
  std::size_t freeze_decoder_epochs = 0;
  std::size_t freeze_encoder_epochs = 0;
  AdamConfig adam;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
      throw ContractError("warmup_fraction must lie in [0, 1)");
    if (freeze_decoder_epochs > freeze_encoder_epochs || freeze_encoder_epochs > epochs)
      throw ContractError("freeze epochs must satisfy decoder <= encoder <= epochs");
    if (batch_size == 0) throw ContractError("batch_size must be positive");
    if (epochs == 0) throw ContractError("epochs must be positive");
    if (!(learning_rate >= 0.0)) throw ContractError("learning_rate must be non-negative");
  }

  bool operator==(const TrainConfig&) const = default;
};

/// Which parameter groups the optimizer may update in a given epoch. The
/// classifier head is always trainable.
struct GroupFlags {
  bool image_path = true;
  bool translation_decoder = true;
  bool fusion = true;

  bool allows(ParamGroup g) const {
    switch (g) {
      case ParamGroup::image_path: return image_path;
      case ParamGroup::translation_decoder: return translation_decoder;
      case ParamGroup::fusion: return fusion;
      case ParamGroup::head: return true;
    }
    return false;
  }

  bool operator==(const GroupFlags&) const = default;
};

/// Epochs [0, freeze_decoder): image path only. [freeze_decoder, freeze_encoder):
/// decoder joins. From freeze_encoder on: everything.
inline GroupFlags trainable_groups(std::size_t epoch, const TrainConfig& cfg) {
  GroupFlags f;
  f.image_path = true;
  f.translation_decoder = epoch >= cfg.freeze_decoder_epochs;
  f.fusion = epoch >= cfg.freeze_encoder_epochs;
  return f;
}

/// Learning rate for optimizer step `iteration` of `total_iterations`.
///  1. linear warmup 0 -> lr over the first warmup_fraction of all steps;
///  2. constant lr while any group is still frozen;
///  3. cosine lr -> 0 over the remaining steps.
/// Without freezing, stage 2 is empty.
inline double lr_at(std::size_t iteration, std::size_t total_iterations, const TrainConfig& cfg) {
  if (total_iterations == 0) return 0.0;
  const double lr = cfg.learning_rate;
  const auto warmup = static_cast<std::size_t>(cfg.warmup_fraction * static_cast<double>(total_iterations));
  if (iteration < warmup) return lr * static_cast<double>(iteration) / static_cast<double>(warmup);
  const std::size_t frozen_until = total_iterations * cfg.freeze_encoder_epochs / cfg.epochs;
  if (iteration < frozen_until) return lr;
  const std::size_t start = std::max(warmup, frozen_until);
  const std::size_t span = total_iterations - start;
  if (span == 0) return lr;
  const double progress = static_cast<double>(iteration - start) / static_cast<double>(span);
  return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Per-tensor Adam moments and step count.
struct AdamSlot {
  std::vector<double> m, v;
  std::size_t step = 0;
};

/// One AdamW update of `w` in place: decoupled decay w -= lr * wd * w, then the
/// bias-corrected Adam step.
inline void adam_update(std::span<double> w, std::span<const double> g, AdamSlot& slot, double lr,
                        const AdamConfig& cfg) {
  if (slot.m.empty()) {
    slot.m.assign(w.size(), 0.0);
    slot.v.assign(w.size(), 0.0);
  }
  ++slot.step;
  const double t = static_cast<double>(slot.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < w.size(); ++i) {
    slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g[i];
    slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mhat = slot.m[i] / c1;
    const double vhat = slot.v[i] / c2;
    w[i] -= lr * cfg.weight_decay * w[i];
    w[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

using AdamState = std::map<std::string, AdamSlot>;

/// Updates every parameter whose group is trainable; frozen tensors are not
/// touched (no decay, no moment update). Throws NumericError naming the
/// parameter and group on a non-finite gradient.
inline void adam_step(MarmotParams& params, AdamState& state, double lr, const AdamConfig& cfg,
                      const GroupFlags& flags) {
  params.for_each([&](const std::string& name, Tensor& t, ParamGroup group) {
    if (!flags.allows(group)) return;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError(std::string("non-finite gradient in parameter group '") +
                           group_name(group) + "' (" + name + ")");
      }
    }
  });
  params.for_each([&](const std::string& name, Tensor& t, ParamGroup group) {
    if (!flags.allows(group)) return;
    const auto g = t.grad();
    adam_update(t.mutable_values(), g, state[name], lr, cfg);
  });
}

inline Tensor example_loss(const MultimodalExample& ex, const MarmotParams& params) {
  if (!ex.label || (*ex.label != 0 && *ex.label != 1)) {
    throw ContractError("example '" + ex.id + "' needs a 0/1 label for training");
  }
  return cross_entropy(forward(ex, params).logits, static_cast<std::size_t>(*ex.label));
}

struct EpochRecord {
  double train_loss = 0.0;       // mean over examples, accumulated during the epoch
  double train_accuracy = 0.0;   // end-of-epoch parameters
  std::optional<double> val_accuracy;
  double last_lr = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainReport {
  ModelConfig model;
  TrainConfig config;
  std::vector<EpochRecord> epochs;
  MarmotParams params;
  bool diverged = false;
  std::string message;
};

inline std::vector<Prediction> predict_all(std::span<const MultimodalExample> data,
                                           const MarmotParams& params, double threshold = 0.5) {
  std::vector<Prediction> out;
  out.reserve(data.size());
  for (const auto& ex : data) out.push_back(predict(ex, params, threshold));
  return out;
}

inline double accuracy(std::span<const MultimodalExample> data, const MarmotParams& params,
                       double threshold = 0.5) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& ex : data) {
    if (!ex.label) throw ContractError("example '" + ex.id + "' has no label to score against");
    if (predict(ex, params, threshold).label == *ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Called after every completed epoch with the epoch index and current parameters.
using EpochObserver = std::function<void(std::size_t, const MarmotParams&)>;

/// Mini-batch AdamW training from `init`. Deterministic given the inputs and
/// cfg.seed. A non-finite loss stops training and returns the epochs so far
/// with diverged = true.
inline TrainReport train(std::span<const MultimodalExample> train_set,
                         std::span<const MultimodalExample> val_set, const MarmotParams& init,
                         const TrainConfig& cfg, const EpochObserver& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw ContractError("train: empty training set");
  TrainReport report{init.config, cfg, {}, init.clone(), false, {}};
  MarmotParams& params = report.params;
  AdamState state;
  Rng rng(Rng::derive(cfg.seed, 0x7a11));

  const std::size_t n = train_set.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = steps_per_epoch * cfg.epochs;
  std::vector<std::size_t> order(n);
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const GroupFlags flags = trainable_groups(epoch, cfg);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));

    EpochRecord rec;
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - begin);
      params.zero_grads();
      for (std::size_t b = begin; b < end; ++b) {
        auto loss = example_loss(train_set[order[b]], params);
        const double value = loss.item();
        if (!std::isfinite(value)) {
          report.diverged = true;
          report.message = "non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step);
          return report;
        }
        loss_sum += value;
        backward(scale(loss, inv_batch));
      }
      rec.last_lr = lr_at(step, total, cfg);
      adam_step(params, state, rec.last_lr, cfg.adam, flags);
      ++step;
    }
    params.zero_grads();
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.train_accuracy = accuracy(train_set, params);
    if (!val_set.empty()) rec.val_accuracy = accuracy(val_set, params);
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(epoch, params);
  }
  return report;
}

/// Runs fn(i) for i in [0, count), on up to `threads` worker threads.
inline void parallel_for(std::size_t count, std::size_t threads,
                         const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  for (std::size_t start = 0; start < count; start += threads) {
    std::vector<std::future<void>> jobs;
    for (std::size_t i = start; i < std::min(count, start + threads); ++i)
      jobs.push_back(std::async(std::launch::async, fn, i));
    for (auto& j : jobs) j.get();
  }
}

enum class SelectionMetric { f1, auc, accuracy };

/// Validation score used for model selection; undefined metrics score -inf.
inline double selection_score(std::span<const MultimodalExample> data, const MarmotParams& params,
                              SelectionMetric metric) {
  std::vector<double> p;
  std::vector<int> y;
  for (const auto& ex : data) {
    if (!ex.label) throw ContractError("example '" + ex.id + "' has no label to score against");
    p.push_back(predict(ex, params).p_positive);
    y.push_back(*ex.label);
  }
  const auto r = evaluate(p, y);
  std::optional<double> s;
  switch (metric) {
    case SelectionMetric::f1: s = r.f1_1; break;
    case SelectionMetric::auc: s = r.auc; break;
    case SelectionMetric::accuracy: s = r.accuracy; break;
  }
  return s.value_or(-std::numeric_limits<double>::infinity());
}

struct GridSpec {
  std::vector<double> learning_rates{2e-5, 3e-5, 5e-5};
  std::vector<std::size_t> batch_sizes{16, 32};
  std::vector<std::size_t> epochs{4};
};

struct GridCell {
  TrainConfig config;
  double score = 0.0;
};

struct GridResult {
  std::vector<GridCell> cells;  // learning-rate major, then batch size, then epochs
  std::size_t best = 0;

  const TrainConfig& best_config() const { return cells.at(best).config; }
};

/// Index of the largest score; the first one wins ties.
inline std::size_t argmax_first(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

/// Trains one model per grid cell from the same initial parameters and keeps
/// the cell with the best validation metric.
inline GridResult grid_search(const GridSpec& grid, const TrainConfig& base, const MarmotParams& init,
                              std::span<const MultimodalExample> train_set,
                              std::span<const MultimodalExample> val_set, SelectionMetric metric,
                              std::size_t threads = 1) {
  GridResult result;
  for (double lr : grid.learning_rates)
    for (std::size_t bs : grid.batch_sizes)
      for (std::size_t ep : grid.epochs) {
        TrainConfig c = base;
        c.learning_rate = lr;
        c.batch_size = bs;
        c.epochs = ep;
        c.freeze_encoder_epochs = std::min(c.freeze_encoder_epochs, ep);
        c.freeze_decoder_epochs = std::min(c.freeze_decoder_epochs, c.freeze_encoder_epochs);
        result.cells.push_back({c, 0.0});
      }
  if (result.cells.empty()) throw ContractError("grid_search: empty grid");
  parallel_for(result.cells.size(), threads, [&](std::size_t i) {
    const auto report = train(train_set, val_set, init, result.cells[i].config);
    result.cells[i].score = report.diverged ? -std::numeric_limits<double>::infinity()
                                            : selection_score(val_set, report.params, metric);
  });
  std::vector<double> s;
  for (const auto& c : result.cells) s.push_back(c.score);
  result.best = argmax_first(s);
  return result;
}

/// Majority class of an odd number of votes.
inline int majority_vote(std::span<const int> votes) {
  if (votes.empty() || votes.size() % 2 == 0) {
    throw ContractError("majority_vote needs an odd number of votes, got " +
                        std::to_string(votes.size()));
  }
  std::size_t positive = 0;
  for (int v : votes) positive += v == 1 ? 1 : 0;
  return 2 * positive > votes.size() ? 1 : 0;
}

/// Member i is initialized and trained with seed derive(cfg.seed, i).
inline std::vector<TrainReport> deep_ensemble(const ModelConfig& model, const TrainConfig& cfg,
                                              std::span<const MultimodalExample> train_set,
                                              std::span<const MultimodalExample> val_set,
                                              std::size_t members = 11, std::size_t threads = 1) {
  if (members == 0 || members % 2 == 0) {
    throw ContractError("deep_ensemble needs an odd member count, got " + std::to_string(members));
  }
  std::vector<std::optional<TrainReport>> slots(members);
  parallel_for(members, threads, [&](std::size_t i) {
    TrainConfig c = cfg;
    c.seed = Rng::derive(cfg.seed, i);
    Rng rng(c.seed);
    slots[i] = train(train_set, val_set, MarmotParams::random(model, rng), c);
  });
  std::vector<TrainReport> out;
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

struct EnsemblePrediction {
  int label = 0;
  std::size_t positive_votes = 0;
  double mean_p_positive = 0.0;
};

inline EnsemblePrediction ensemble_predict(std::span<const MarmotParams> members,
                                           const MultimodalExample& ex, double threshold = 0.5) {
  std::vector<int> votes;
  EnsemblePrediction out;
  for (const auto& m : members) {
    const auto p = predict(ex, m, threshold);
    votes.push_back(p.label);
    out.positive_votes += p.label == 1 ? 1 : 0;
    out.mean_p_positive += p.p_positive;
  }
  out.label = majority_vote(votes);
  if (!members.empty()) out.mean_p_positive /= static_cast<double>(members.size());
  return out;
}

}  // namespace marmot
