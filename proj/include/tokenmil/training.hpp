#pragma once

// Joint token-selection / bag-classification training.
//
// For a mini-batch with positive bags P and negative bags N:
//   L_MIL    = mean_{b in P} (1 - mean_{i in top-k(b)} s_i) + mean_{b in N} mean_{i in top-k(b)} s_i
//   L_Smooth = mean_{b in P u N} mean_{i=1..t_b-1} (s_i - s_{i-1})^2        (0 for t_b = 1)
//   L        = L_MIL + L_Smooth
// Only the selected positions receive dL_MIL/ds; selection is redone every step.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokenmil/adam.hpp"
#include "tokenmil/dataset.hpp"
#include "tokenmil/detector.hpp"
#include "tokenmil/errors.hpp"
#include "tokenmil/evaluation.hpp"
#include "tokenmil/rng.hpp"
#include "tokenmil/selection.hpp"
#include "tokenmil/uncertainty.hpp"

namespace tokenmil {

/// 1 - mean(pos) + mean(neg) for one positive/negative pair of selected score lists.
inline double mil_loss(std::span<const double> pos_topk, std::span<const double> neg_topk) {
  if (pos_topk.empty() || neg_topk.empty()) throw DomainError("mil_loss: empty score list");
  auto mean = [](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  return 1.0 - std::abs(mean(pos_topk)) + std::abs(mean(neg_topk));
}

/// Mean squared difference of adjacent scores; 0 for a single token.
inline double smoothness_loss(std::span<const double> scores) {
  if (scores.empty()) throw DomainError("smoothness_loss: empty score vector");
  if (scores.size() == 1) return 0.0;
  double s = 0.0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const double d = scores[i] - scores[i - 1];
    s += d * d;
  }
  return s / static_cast<double>(scores.size() - 1);
}

/// A bag's slice of a concatenated score vector.
struct BagSlice {
  std::size_t offset = 0;
  std::size_t length = 0;
  Label label = Label::clean;
};

struct ObjectiveValue {
  double loss_mil = 0.0;
  double loss_smooth = 0.0;
  double loss_total = 0.0;
  std::vector<double> score_grad;                  // dL/ds, one entry per row
  std::vector<std::vector<std::size_t>> selected;  // per bag, positions within the bag
};

/// Batch objective and its gradient w.r.t. every token score. Passing `frozen`
/// reuses a previous selection instead of re-selecting.
inline ObjectiveValue mil_objective(std::span<const double> scores, std::span<const BagSlice> bags,
                                    const SelectionPolicy& policy, bool smoothness_enabled,
                                    const std::vector<std::vector<std::size_t>>* frozen = nullptr) {
  ObjectiveValue v;
  v.score_grad.assign(scores.size(), 0.0);
  std::size_t n_pos = 0;
  for (const auto& b : bags) n_pos += b.label == Label::hallucinated;
  const std::size_t n_neg = bags.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DataError("objective needs positive and negative bags in the batch");

  double pos_term = 0.0, neg_term = 0.0, smooth = 0.0;
  const double n_bags = static_cast<double>(bags.size());
  for (std::size_t bi = 0; bi < bags.size(); ++bi) {
    const auto& b = bags[bi];
    const auto s = scores.subspan(b.offset, b.length);
    auto sel = frozen ? (*frozen)[bi] : select_instances(policy, s);
    double mean = 0.0;
    for (auto i : sel) mean += s[i];
    mean /= static_cast<double>(sel.size());
    const bool pos = b.label == Label::hallucinated;
    const double weight = pos ? -1.0 / static_cast<double>(n_pos) : 1.0 / static_cast<double>(n_neg);
    (pos ? pos_term : neg_term) += pos ? (1.0 - mean) : mean;
    for (auto i : sel) v.score_grad[b.offset + i] += weight / static_cast<double>(sel.size());

    if (smoothness_enabled && b.length > 1) {
      const double pairs = static_cast<double>(b.length - 1);
      smooth += smoothness_loss(s) / n_bags;
      for (std::size_t i = 1; i < b.length; ++i) {
        const double g = 2.0 * (s[i] - s[i - 1]) / (pairs * n_bags);
        v.score_grad[b.offset + i] += g;
        v.score_grad[b.offset + i - 1] -= g;
      }
    }
    v.selected.push_back(std::move(sel));
  }
  v.loss_mil = pos_term / static_cast<double>(n_pos) + neg_term / static_cast<double>(n_neg);
  v.loss_smooth = smooth;
  v.loss_total = v.loss_mil + v.loss_smooth;
  return v;
}

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_bags = 32;
  AdamConfig adam{};
  std::uint64_t seed = 0;
  bool smoothness_enabled = true;
  AugmentationConfig augmentation{};
  SelectionPolicy selection{};
  std::size_t hidden_dim = 256;
  std::size_t layer_count = 2;
};

inline void validate(const TrainConfig& c) {
  if (!(c.adam.learning_rate > 0.0)) throw DataError("learning_rate must be positive");
  if (c.batch_bags < 2) throw DataError("batch_bags must be >= 2");
  if (c.epochs == 0) throw DataError("epochs must be >= 1");
  if (c.augmentation.lambda < 0.0) throw DataError("lambda must be >= 0");
  validate(c.selection);
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_bags", c.batch_bags},
          {"learning_rate", c.adam.learning_rate},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"adam_epsilon", c.adam.epsilon},
          {"seed", c.seed},
          {"smoothness", c.smoothness_enabled},
          {"uncertainty", to_string(c.augmentation.mode)},
          {"lambda", c.augmentation.lambda},
          {"policy", to_string(c.selection.kind)},
          {"rk", c.selection.r_k},
          {"hidden_dim", c.hidden_dim},
          {"layers", c.layer_count}};
}

/// Reads any subset of the keys written by to_json over `base`.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  try {
    if (j.contains("epochs")) base.epochs = j["epochs"].get<std::size_t>();
    if (j.contains("batch_bags")) base.batch_bags = j["batch_bags"].get<std::size_t>();
    if (j.contains("learning_rate")) base.adam.learning_rate = j["learning_rate"].get<double>();
    if (j.contains("beta1")) base.adam.beta1 = j["beta1"].get<double>();
    if (j.contains("beta2")) base.adam.beta2 = j["beta2"].get<double>();
    if (j.contains("adam_epsilon")) base.adam.epsilon = j["adam_epsilon"].get<double>();
    if (j.contains("seed")) base.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("smoothness")) base.smoothness_enabled = j["smoothness"].get<bool>();
    if (j.contains("uncertainty")) base.augmentation.mode = parse_augmentation_mode(j["uncertainty"].get<std::string>());
    if (j.contains("lambda")) base.augmentation.lambda = j["lambda"].get<double>();
    if (j.contains("policy")) base.selection.kind = parse_selection_kind(j["policy"].get<std::string>());
    if (j.contains("rk")) base.selection.r_k = j["rk"].get<double>();
    if (j.contains("hidden_dim")) base.hidden_dim = j["hidden_dim"].get<std::size_t>();
    if (j.contains("layers")) base.layer_count = j["layers"].get<std::size_t>();
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("invalid training config: ") + ex.what());
  }
  return base;
}

struct TrainingStep {
  std::size_t epoch = 0;
  std::size_t step = 0;  // global step index
  double loss_mil = 0.0;
  double loss_smooth = 0.0;
  double loss_total = 0.0;
  double grad_norm = 0.0;
  std::vector<std::string> bag_ids;
  std::vector<std::vector<std::size_t>> selected_indices;
  std::optional<double> selection_recall;  // over planted positive bags in the batch
};

inline nlohmann::json to_json(const TrainingStep& s) {
  nlohmann::json j = {{"epoch", s.epoch},          {"step", s.step},
                      {"loss_mil", s.loss_mil},    {"loss_smooth", s.loss_smooth},
                      {"loss_total", s.loss_total}, {"grad_norm", s.grad_norm}};
  if (s.selection_recall) j["selection_recall"] = *s.selection_recall;
  return j;
}

struct TrainResult {
  DetectorParams params;
  std::vector<TrainingStep> steps;

  /// Mean loss_total per epoch.
  std::vector<double> epoch_losses() const {
    std::vector<double> sums, counts;
    for (const auto& s : steps) {
      if (s.epoch >= sums.size()) {
        sums.resize(s.epoch + 1, 0.0);
        counts.resize(s.epoch + 1, 0.0);
      }
      sums[s.epoch] += s.loss_total;
      counts[s.epoch] += 1.0;
    }
    for (std::size_t e = 0; e < sums.size(); ++e) sums[e] /= std::max(counts[e], 1.0);
    return sums;
  }
};

/// Fresh detector for `input_dim` with weights drawn from the "init" substream of the config seed.
inline DetectorParams initial_detector(std::size_t input_dim, const TrainConfig& config) {
  return init_params(input_dim, config.hidden_dim, config.layer_count, substream_seed(config.seed, "init"));
}

namespace detail {

/// Per-label pool of bag indices, reshuffled at every epoch start.
struct BagPool {
  std::vector<std::size_t> order;
  std::size_t cursor = 0;

  std::size_t remaining() const noexcept { return order.size() - cursor; }

  /// Takes up to `want` distinct bags. When `wrap` is set an exhausted pool is
  /// reshuffled and reused (minority label); otherwise the draw stops at the end.
  std::vector<std::size_t> take(std::size_t want, bool wrap, Xoshiro256ss& rng) {
    want = std::min(want, order.size());
    std::vector<std::size_t> out;
    while (out.size() < want) {
      if (cursor == order.size()) {
        if (!wrap) break;
        rng.shuffle(order);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      if (std::find(out.begin(), out.end(), idx) == out.end()) out.push_back(idx);
    }
    return out;
  }
};

}  // namespace detail

/// Trains `params` on the train split of `ds`. Deterministic for a fixed config.seed.
inline TrainResult train(const Dataset& ds, DetectorParams params, const TrainConfig& config) {
  validate(config);
  require_trainable(ds.manifest);
  if (ds.manifest.dim != params.input_dim)
    throw DataError("dataset dim " + std::to_string(ds.manifest.dim) + " does not match detector input dim " +
                    std::to_string(params.input_dim));

  // Augmented copies of the training bags; the scaled inputs stay fixed for the whole run.
  std::vector<TokenBag> bags;
  for (const TokenBag* b : ds.in_split(Split::train)) {
    bags.push_back(config.augmentation.mode == AugmentationMode::none
                       ? *b
                       : augment(*b, ds.annotation(b->bag_id), config.augmentation));
  }
  if (config.selection.kind == SelectionKind::before_last &&
      std::any_of(bags.begin(), bags.end(), [](const TokenBag& b) { return b.token_count() == 1; }))
    std::cerr << "warning: before-last selection on single-token bags falls back to position 0\n";

  detail::BagPool pos, neg;
  for (std::size_t i = 0; i < bags.size(); ++i) (bags[i].positive() ? pos : neg).order.push_back(i);

  const std::size_t want_pos = (config.batch_bags + 1) / 2;
  const std::size_t want_neg = config.batch_bags / 2;
  const auto per_label_steps = [](std::size_t n, std::size_t per) { return (n + per - 1) / per; };
  const std::size_t pos_steps = per_label_steps(pos.order.size(), want_pos);
  const std::size_t neg_steps = per_label_steps(neg.order.size(), want_neg);
  const std::size_t steps_per_epoch = std::max(pos_steps, neg_steps);
  const bool pos_wraps = pos_steps < neg_steps;
  const bool neg_wraps = !pos_wraps && neg_steps < pos_steps;

  Xoshiro256ss rng = make_stream(config.seed, "batching");
  Adam adam(params.parameter_count(), config.adam);
  TrainResult result;
  std::ptrdiff_t last_good = -1;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(pos.order);
    rng.shuffle(neg.order);
    pos.cursor = neg.cursor = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      auto batch_idx = pos.take(pos_wraps ? want_pos : std::min(want_pos, pos.remaining()), pos_wraps, rng);
      auto neg_idx = neg.take(neg_wraps ? want_neg : std::min(want_neg, neg.remaining()), neg_wraps, rng);
      // A label pool that ran dry at the end of the epoch is topped up so both labels appear.
      if (batch_idx.empty()) batch_idx = pos.take(want_pos, true, rng);
      if (neg_idx.empty()) neg_idx = neg.take(want_neg, true, rng);
      batch_idx.insert(batch_idx.end(), neg_idx.begin(), neg_idx.end());

      std::size_t rows = 0;
      std::vector<BagSlice> slices;
      for (auto bi : batch_idx) {
        slices.push_back({rows, bags[bi].token_count(), bags[bi].label});
        rows += bags[bi].token_count();
      }
      Matrix x(rows, params.input_dim);
      for (std::size_t k = 0; k < batch_idx.size(); ++k) {
        const auto& e = bags[batch_idx[k]].embeddings;
        std::copy(e.begin(), e.end(), x.data.begin() + static_cast<std::ptrdiff_t>(slices[k].offset * params.input_dim));
      }

      auto cache = forward(params, x, DetectorMode::train);
      auto obj = mil_objective(cache.scores, slices, config.selection, config.smoothness_enabled);
      if (!std::isfinite(obj.loss_total)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                  std::to_string(result.steps.size()),
                              last_good);
      }
      update_running_stats(params, cache);
      auto grads = backward(params, cache, obj.score_grad, false);
      double norm2 = 0.0;
      for (double g : grads.params) norm2 += g * g;
      adam.step(params.values, grads.params);

      TrainingStep step;
      step.epoch = epoch;
      step.step = result.steps.size();
      step.loss_mil = obj.loss_mil;
      step.loss_smooth = obj.loss_smooth;
      step.loss_total = obj.loss_total;
      step.grad_norm = std::sqrt(norm2);
      std::vector<const TokenBag*> batch_bags;
      for (auto bi : batch_idx) {
        step.bag_ids.push_back(bags[bi].bag_id);
        batch_bags.push_back(&bags[bi]);
      }
      if (std::any_of(batch_bags.begin(), batch_bags.end(),
                      [](const TokenBag* b) { return b->positive() && b->planted_indices; }))
        step.selection_recall = selection_recall(batch_bags, obj.selected);
      step.selected_indices = std::move(obj.selected);
      result.steps.push_back(std::move(step));
      last_good = static_cast<std::ptrdiff_t>(result.steps.size()) - 1;
    }
  }
  result.params = std::move(params);
  return result;
}

/// Convenience: fresh detector from the config, then train().
inline TrainResult train(const Dataset& ds, const TrainConfig& config) {
  return train(ds, initial_detector(ds.manifest.dim, config), config);
}

struct LayerCandidateResult {
  int layer_index = 0;
  std::optional<double> validation_auroc;  // nullopt when skipped
  std::string skipped_reason;
};

struct LayerSelection {
  int layer_index = 0;
  std::vector<LayerCandidateResult> candidates;
};

/// Trains one detector per candidate layer and keeps the best validation AUROC
/// (ties to the lowest layer index). Candidates that cannot be trained are skipped.
inline LayerSelection select_layer(std::span<const Dataset> per_layer, const TrainConfig& config) {
  if (per_layer.empty()) throw DataError("select_layer: no candidate layers");
  LayerSelection out;
  std::optional<double> best;
  for (const auto& ds : per_layer) {
    LayerCandidateResult c;
    c.layer_index = ds.manifest.layer_index;
    try {
      if (ds.manifest.count(Split::validation, Label::hallucinated) == 0 ||
          ds.manifest.count(Split::validation, Label::clean) == 0)
        throw DataError("validation split lacks one of the labels");
      auto trained = train(ds, config);
      c.validation_auroc =
          evaluate(trained.params, ds, Split::validation, config.selection, config.augmentation).auroc;
    } catch (const std::exception& ex) {
      c.skipped_reason = ex.what();
      std::cerr << "warning: skipping layer " << c.layer_index << ": " << ex.what() << '\n';
    }
    if (c.validation_auroc &&
        (!best || *c.validation_auroc > *best ||
         (*c.validation_auroc == *best && c.layer_index < out.layer_index))) {
      best = c.validation_auroc;
      out.layer_index = c.layer_index;
    }
    out.candidates.push_back(std::move(c));
  }
  if (!best) throw DataError("select_layer: every candidate layer failed");
  return out;
}

}  // namespace tokenmil
