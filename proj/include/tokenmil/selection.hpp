#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tokenmil/errors.hpp"

namespace tokenmil {

enum class SelectionKind { adaptive_topk, first, last, before_last };

inline std::string_view to_string(SelectionKind k) {
  switch (k) {
    case SelectionKind::adaptive_topk: return "adaptive";
    case SelectionKind::first: return "first";
    case SelectionKind::last: return "last";
    case SelectionKind::before_last: return "before-last";
  }
  return "?";
}

inline SelectionKind parse_selection_kind(std::string_view s) {
  if (s == "adaptive" || s == "adaptive_topk") return SelectionKind::adaptive_topk;
  if (s == "first") return SelectionKind::first;
  if (s == "last") return SelectionKind::last;
  if (s == "before-last" || s == "before_last") return SelectionKind::before_last;
  throw DataError("unknown selection policy '" + std::string(s) + "'");
}

struct SelectionPolicy {
  SelectionKind kind = SelectionKind::adaptive_topk;
  double r_k = 0.1;  // adaptive_topk only
};

inline void validate(const SelectionPolicy& p) {
  if (!(p.r_k >= 0.0 && p.r_k < 1.0)) throw DomainError("r_k must lie in [0, 1)");
}

/// k = min(floor(r_k * t) + 1, t) for adaptive selection, 1 otherwise.
inline std::size_t k_for_length(const SelectionPolicy& policy, std::size_t t) {
  if (t == 0) throw DomainError("k_for_length: t must be >= 1");
  if (policy.kind != SelectionKind::adaptive_topk) return 1;
  validate(policy);
  const auto k = static_cast<std::size_t>(std::floor(policy.r_k * static_cast<double>(t))) + 1;
  return std::min(k, t);
}

/// Indices of the k largest scores, ties to the lower index; returned sorted ascending.
inline std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, idx.size());
  auto better = [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Token positions selected from one bag's scores; sorted and unique.
inline std::vector<std::size_t> select_instances(const SelectionPolicy& policy, std::span<const double> scores) {
  const std::size_t t = scores.size();
  if (t == 0) throw DomainError("select_instances: empty score vector");
  for (double s : scores)
    if (!std::isfinite(s)) throw DomainError("select_instances: non-finite score");
  switch (policy.kind) {
    case SelectionKind::adaptive_topk: return top_k_indices(scores, k_for_length(policy, t));
    case SelectionKind::first: return {0};
    case SelectionKind::last: return {t - 1};
    case SelectionKind::before_last:
      if (t == 1) {
        static std::atomic<bool> warned{false};
        if (!warned.exchange(true)) std::cerr << "warning: before_last on a 1-token bag selects token 0\n";
        return {0};
      }
      return {t - 2};
  }
  return {};
}

}  // namespace tokenmil
