#pragma once

// Bag-level scoring, AUROC, the perplexity baseline and token-selection recall.

#include <algorithm>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokenmil/dataset.hpp"
#include "tokenmil/detector.hpp"
#include "tokenmil/errors.hpp"
#include "tokenmil/selection.hpp"
#include "tokenmil/uncertainty.hpp"

namespace tokenmil {

struct ScoredLabel {
  double score = 0.0;
  Label label = Label::clean;
};

/// Mann-Whitney AUROC by average ranks: P(s+ > s-) + 0.5 P(s+ == s-).
inline double auroc(std::span<const ScoredLabel> scored) {
  const std::size_t n = scored.size();
  std::size_t n_pos = 0;
  for (const auto& s : scored) n_pos += s.label == Label::hallucinated;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DataError("AUROC undefined: input needs both labels");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scored[a].score < scored[b].score; });

  // Twice the average rank keeps tied ranks integral.
  double rank_sum_x2 = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && scored[order[j]].score == scored[order[i]].score) ++j;
    const double twice_rank = static_cast<double>(i + 1 + j);  // (i+1) + j, ranks are 1-based
    for (std::size_t k = i; k < j; ++k)
      if (scored[order[k]].label == Label::hallucinated) rank_sum_x2 += twice_rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  const double u_x2 = rank_sum_x2 - np * (np + 1.0);
  return u_x2 / (2.0 * np * static_cast<double>(n_neg));
}

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};

/// ROC curve with one point per distinct score, thresholds descending.
inline std::vector<RocPoint> roc_curve(std::span<const ScoredLabel> scored) {
  std::vector<ScoredLabel> s(scored.begin(), scored.end());
  std::stable_sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  double n_pos = 0, n_neg = 0;
  for (const auto& x : s) (x.label == Label::hallucinated ? n_pos : n_neg) += 1.0;
  if (n_pos == 0 || n_neg == 0) throw DataError("ROC undefined: input needs both labels");
  std::vector<RocPoint> out{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < s.size();) {
    std::size_t j = i;
    while (j < s.size() && s[j].score == s[i].score) {
      (s[j].label == Label::hallucinated ? tp : fp) += 1.0;
      ++j;
    }
    out.push_back({s[i].score, fp / n_neg, tp / n_pos});
    i = j;
  }
  return out;
}

/// Rows of `bag` after the configured augmentation, as a double matrix.
inline Matrix augmented_batch(const TokenBag& bag, const UncertaintyAnnotation* annotation,
                              const AugmentationConfig& aug) {
  return to_matrix(aug.mode == AugmentationMode::none ? bag : augment(bag, annotation, aug));
}

struct BagScore {
  double score = 0.0;
  std::vector<double> token_scores;
  std::vector<std::size_t> selected;
};

/// Inference-mode bag score: mean of the selected token scores.
inline BagScore score_bag(const DetectorParams& params, const TokenBag& bag,
                          const UncertaintyAnnotation* annotation, const SelectionPolicy& policy,
                          const AugmentationConfig& aug) {
  if (bag.dim != params.input_dim)
    throw DataError("bag '" + bag.bag_id + "': dim " + std::to_string(bag.dim) + " does not match detector input " +
                    std::to_string(params.input_dim));
  BagScore out;
  out.token_scores = score_tokens(params, augmented_batch(bag, annotation, aug));
  out.selected = select_instances(policy, out.token_scores);
  double sum = 0.0;
  for (auto i : out.selected) sum += out.token_scores[i];
  out.score = sum / static_cast<double>(out.selected.size());
  return out;
}

inline double bag_score(const DetectorParams& params, const TokenBag& bag,
                        const UncertaintyAnnotation* annotation, const SelectionPolicy& policy,
                        const AugmentationConfig& aug) {
  return score_bag(params, bag, annotation, policy, aug).score;
}

/// Fraction of positive bags whose selected positions intersect the planted positions.
/// Only bags carrying planted_indices are counted.
inline double selection_recall(std::span<const TokenBag* const> bags,
                               std::span<const std::vector<std::size_t>> selections) {
  if (bags.size() != selections.size()) throw DataError("selection_recall: bags/selections size mismatch");
  std::size_t total = 0, hits = 0;
  for (std::size_t b = 0; b < bags.size(); ++b) {
    const TokenBag& bag = *bags[b];
    if (!bag.positive() || !bag.planted_indices) continue;
    ++total;
    const auto& planted = *bag.planted_indices;
    const auto& sel = selections[b];
    const bool hit = std::any_of(sel.begin(), sel.end(), [&](std::size_t i) {
      return std::find(planted.begin(), planted.end(), i) != planted.end();
    });
    hits += hit;
  }
  if (total == 0) throw DataError("selection_recall: no positive bags with planted ground truth");
  return static_cast<double>(hits) / static_cast<double>(total);
}

enum class EvalMethod { detector, perplexity_baseline };

struct BagResult {
  std::string bag_id;
  double score = 0.0;
  Label label = Label::clean;
  std::vector<std::size_t> selected;  // empty for the perplexity baseline
};

struct EvalReport {
  std::string dataset_id;
  EvalMethod method = EvalMethod::detector;
  std::size_t n_bags = 0;
  double auroc = 0.5;
  std::vector<BagResult> per_bag;
  std::optional<double> selection_recall;

  std::vector<ScoredLabel> scored() const {
    std::vector<ScoredLabel> out;
    out.reserve(per_bag.size());
    for (const auto& b : per_bag) out.push_back({b.score, b.label});
    return out;
  }
};

inline nlohmann::json to_json(const EvalReport& r, bool include_selection = false) {
  nlohmann::json per_bag = nlohmann::json::array();
  for (const auto& b : r.per_bag) {
    nlohmann::json item = {{"bag_id", b.bag_id}, {"score", b.score}, {"label", static_cast<int>(b.label)}};
    if (include_selection && !b.selected.empty()) item["selected"] = b.selected;
    per_bag.push_back(std::move(item));
  }
  nlohmann::json j = {{"dataset_id", r.dataset_id},
                      {"method", r.method == EvalMethod::detector ? "detector" : "perplexity_baseline"},
                      {"n_bags", r.n_bags},
                      {"auroc", r.auroc},
                      {"per_bag", std::move(per_bag)}};
  j["selection_recall"] = r.selection_recall ? nlohmann::json(*r.selection_recall) : nlohmann::json(nullptr);
  return j;
}

inline std::vector<const TokenBag*> bags_for(const Dataset& ds, std::optional<Split> split) {
  if (!split) {
    std::vector<const TokenBag*> all;
    for (const auto& b : ds.bags) all.push_back(&b);
    return all;
  }
  return ds.in_split(*split);
}

/// Scores every bag of `split` (all bags when nullopt) and computes AUROC and,
/// when planted ground truth exists, selection recall.
inline EvalReport evaluate(const DetectorParams& params, const Dataset& ds, std::optional<Split> split,
                           const SelectionPolicy& policy, const AugmentationConfig& aug) {
  EvalReport r;
  r.dataset_id = ds.manifest.dataset_id;
  r.method = EvalMethod::detector;
  const auto bags = bags_for(ds, split);
  std::vector<std::vector<std::size_t>> selections;
  bool has_truth = false;
  for (const TokenBag* b : bags) {
    auto s = score_bag(params, *b, ds.annotation(b->bag_id), policy, aug);
    r.per_bag.push_back({b->bag_id, s.score, b->label, s.selected});
    selections.push_back(std::move(s.selected));
    has_truth = has_truth || (b->positive() && b->planted_indices);
  }
  r.n_bags = r.per_bag.size();
  const auto scored = r.scored();
  r.auroc = auroc(scored);
  if (has_truth) r.selection_recall = selection_recall(bags, selections);
  return r;
}

/// Bag score = sentence perplexity of its token probabilities (higher = more suspect).
inline EvalReport perplexity_baseline(const Dataset& ds, std::optional<Split> split) {
  EvalReport r;
  r.dataset_id = ds.manifest.dataset_id;
  r.method = EvalMethod::perplexity_baseline;
  for (const TokenBag* b : bags_for(ds, split))
    r.per_bag.push_back({b->bag_id, sentence_perplexity(b->token_probs), b->label, {}});
  r.n_bags = r.per_bag.size();
  const auto scored = r.scored();
  r.auroc = auroc(scored);
  return r;
}

}  // namespace tokenmil
