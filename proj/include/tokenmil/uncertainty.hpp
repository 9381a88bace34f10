#pragma once

// Predictive-uncertainty measures and the embedding rescaling that consumes them.
//
//   token level     P_i = p_i, the chosen token's predictive probability
//   perplexity      P   = -(1/T) sum_i ln p_i
//   consistency     P   = |{m : c_m == c_target}| / M over M sampled generations
//
// Augmentation scales every embedding row: h' = (1 + lambda * P) * h.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tokenmil/dataset.hpp"
#include "tokenmil/errors.hpp"

namespace tokenmil {

enum class AugmentationMode { none, token_level, sentence_perplexity, semantic_consistency };

inline std::string_view to_string(AugmentationMode m) {
  switch (m) {
    case AugmentationMode::none: return "none";
    case AugmentationMode::token_level: return "token";
    case AugmentationMode::sentence_perplexity: return "perplexity";
    case AugmentationMode::semantic_consistency: return "consistency";
  }
  return "?";
}

inline AugmentationMode parse_augmentation_mode(std::string_view s) {
  if (s == "none") return AugmentationMode::none;
  if (s == "token" || s == "token_level") return AugmentationMode::token_level;
  if (s == "perplexity" || s == "sentence_perplexity") return AugmentationMode::sentence_perplexity;
  if (s == "consistency" || s == "semantic_consistency") return AugmentationMode::semantic_consistency;
  throw DataError("unknown uncertainty mode '" + std::string(s) + "'");
}

struct AugmentationConfig {
  AugmentationMode mode = AugmentationMode::none;
  double lambda = 1.0;

  bool is_identity() const noexcept { return mode == AugmentationMode::none || lambda == 0.0; }
};

struct ClusterAssignment {
  std::vector<int> cluster_ids;  // one per generation, labels 0..(#clusters-1)
  int target_cluster = 0;

  std::size_t generation_count() const noexcept { return cluster_ids.size(); }
  int cluster_count() const {
    return cluster_ids.empty() ? 0 : *std::max_element(cluster_ids.begin(), cluster_ids.end()) + 1;
  }
};

inline void validate(const ClusterAssignment& a) {
  if (a.cluster_ids.empty()) throw DataError("cluster assignment: M must be >= 1");
  const int k = a.cluster_count();
  std::vector<bool> used(static_cast<std::size_t>(std::max(k, 0)), false);
  for (int c : a.cluster_ids) {
    if (c < 0) throw DataError("cluster assignment: negative cluster id");
    used[static_cast<std::size_t>(c)] = true;
  }
  if (!std::all_of(used.begin(), used.end(), [](bool u) { return u; }))
    throw DataError("cluster assignment: cluster ids are not a contiguous 0..K-1 labelling");
  if (std::find(a.cluster_ids.begin(), a.cluster_ids.end(), a.target_cluster) == a.cluster_ids.end())
    throw DataError("cluster assignment: target cluster does not occur among the generations");
}

inline double sentence_perplexity(std::span<const double> token_probs) {
  if (token_probs.empty()) throw DomainError("sentence_perplexity: empty probability list");
  double nll = 0.0;
  for (std::size_t i = 0; i < token_probs.size(); ++i) {
    const double p = token_probs[i];
    if (!(p > 0.0 && p <= 1.0)) {
      std::ostringstream msg;
      msg << "sentence_perplexity: probability " << p << " at position " << i << " outside (0, 1]";
      throw DomainError(msg.str());
    }
    nll -= std::log(p);
  }
  return nll / static_cast<double>(token_probs.size());
}

inline double semantic_consistency(const ClusterAssignment& a) {
  validate(a);
  const auto same = std::count(a.cluster_ids.begin(), a.cluster_ids.end(), a.target_cluster);
  return static_cast<double>(same) / static_cast<double>(a.generation_count());
}

/// Decides whether `premise` entails `hypothesis`. Implementations must be total
/// (always answer) or throw ServiceError.
class EntailmentOracle {
 public:
  virtual ~EntailmentOracle() = default;
  virtual bool entails(const std::string& premise, const std::string& hypothesis) const = 0;

  bool bidirectional(const std::string& a, const std::string& b) const {
    return entails(a, b) && entails(b, a);
  }
};

/// Lowercases, drops punctuation and the articles a/an/the, collapses whitespace.
inline std::string normalize_answer(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (char c : text) {
    const auto uc = static_cast<unsigned char>(c);
    if (std::isalnum(uc)) cleaned.push_back(static_cast<char>(std::tolower(uc)));
    else if (std::isspace(uc)) cleaned.push_back(' ');
    else if (uc >= 0x80) cleaned.push_back(c);  // keep non-ASCII bytes verbatim
  }
  std::istringstream words(cleaned);
  std::string word, out;
  while (words >> word) {
    if (word == "a" || word == "an" || word == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += word;
  }
  return out;
}

/// Equivalence under normalize_answer; reflexive and symmetric.
class ExactMatchOracle final : public EntailmentOracle {
 public:
  bool entails(const std::string& premise, const std::string& hypothesis) const override {
    return normalize_answer(premise) == normalize_answer(hypothesis);
  }
};

/// Greedy clustering: each generation joins the first cluster whose representative
/// (first member) is bidirectionally entailed with it, otherwise opens a new cluster.
/// The scored response is generation `target_index`.
inline ClusterAssignment cluster_generations(std::span<const std::string> texts,
                                             const EntailmentOracle& oracle,
                                             std::size_t target_index = 0) {
  if (texts.empty()) throw DataError("cluster_generations: need at least one generation");
  if (target_index >= texts.size()) throw DataError("cluster_generations: target index out of range");
  ClusterAssignment out;
  std::vector<std::size_t> representatives;
  out.cluster_ids.reserve(texts.size());
  for (std::size_t m = 0; m < texts.size(); ++m) {
    int assigned = -1;
    for (std::size_t c = 0; c < representatives.size() && assigned < 0; ++c) {
      bool same = false;
      try {
        same = oracle.bidirectional(texts[representatives[c]], texts[m]);
      } catch (const std::exception& ex) {
        throw ServiceError("entailment oracle failed on generation " + std::to_string(m) + ": " +
                           ex.what());
      }
      if (same) assigned = static_cast<int>(c);
    }
    if (assigned < 0) {
      assigned = static_cast<int>(representatives.size());
      representatives.push_back(m);
    }
    out.cluster_ids.push_back(assigned);
  }
  out.target_cluster = out.cluster_ids[target_index];
  return out;
}

/// Returns a copy of `bag` with rows rescaled by (1 + lambda * P).
/// `annotation` may be null except in semantic_consistency mode.
inline TokenBag augment(const TokenBag& bag, const UncertaintyAnnotation* annotation,
                        const AugmentationConfig& config) {
  if (config.lambda < 0.0 || !std::isfinite(config.lambda))
    throw DomainError("augmentation lambda must be finite and >= 0");
  TokenBag out = bag;
  if (config.mode == AugmentationMode::none) return out;

  auto scale_row = [&](std::size_t i, double s) {
    for (auto& v : out.row(i)) v = static_cast<float>(s * static_cast<double>(v));
  };

  switch (config.mode) {
    case AugmentationMode::token_level:
      for (std::size_t i = 0; i < out.token_count(); ++i)
        scale_row(i, 1.0 + config.lambda * bag.token_probs[i]);
      break;
    case AugmentationMode::sentence_perplexity: {
      // Without an annotation the value is recomputed from the stored token probabilities.
      const double ppl =
          annotation ? annotation->sentence_perplexity : sentence_perplexity(bag.token_probs);
      const double s = 1.0 + config.lambda * ppl;
      for (std::size_t i = 0; i < out.token_count(); ++i) scale_row(i, s);
      break;
    }
    case AugmentationMode::semantic_consistency: {
      if (!annotation || !annotation->semantic_consistency)
        throw DataError("bag '" + bag.bag_id + "': missing semantic_consistency annotation");
      const double s = 1.0 + config.lambda * *annotation->semantic_consistency;
      for (std::size_t i = 0; i < out.token_count(); ++i) scale_row(i, s);
      break;
    }
    case AugmentationMode::none:
      break;
  }
  return out;
}

/// Perplexity annotation computed from a bag's own token probabilities.
inline UncertaintyAnnotation computed_annotation(const TokenBag& bag) {
  return {bag.bag_id, sentence_perplexity(bag.token_probs), std::nullopt, AnnotationSource::computed};
}

}  // namespace tokenmil
