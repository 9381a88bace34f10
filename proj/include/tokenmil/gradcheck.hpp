#pragma once

// Central finite-difference checks of the detector's analytic gradients.
// The numeric side only ever calls forward(), so it is independent of backward().

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "tokenmil/detector.hpp"
#include "tokenmil/rng.hpp"
#include "tokenmil/selection.hpp"
#include "tokenmil/training.hpp"

namespace tokenmil {

/// |a - n| / max(|a|, |n|, floor). The floor turns the measure into an absolute
/// one for gradients that are zero up to rounding.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Central differences of `loss(params)` w.r.t. every trainable parameter.
inline std::vector<double> numeric_gradient(const DetectorParams& params,
                                            const std::function<double(const DetectorParams&)>& loss,
                                            double step) {
  std::vector<double> g(params.values.size());
  DetectorParams probe = params;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double orig = probe.values[i];
    probe.values[i] = orig + step;
    const double up = loss(probe);
    probe.values[i] = orig - step;
    const double down = loss(probe);
    probe.values[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

struct GradCheckReport {
  std::size_t configurations = 0;
  std::size_t parameters_checked = 0;
  double max_relative_error = 0.0;
  double median_relative_error = 0.0;
};

/// Random detector with non-trivial normalisation parameters.
inline DetectorParams random_detector(std::size_t d, std::size_t hidden, std::size_t layers, Xoshiro256ss& rng) {
  DetectorParams p = init_params(d, hidden, layers, rng());
  for (const auto& lay : p.layers) {
    for (auto& b : p.block(lay.bias, lay.out)) b = 0.1 * rng.normal();
    if (lay.normalized) {
      for (auto& g : p.block(lay.gamma, lay.out)) g = rng.uniform(0.5, 1.5);
      for (auto& b : p.block(lay.beta, lay.out)) b = 0.2 * rng.normal();
    }
  }
  return p;
}

/// Gradient of the full training objective (selection frozen at the unperturbed
/// point) for `configurations` random small problems: d <= 16, hidden <= 32,
/// 1-3 layers, 2-4 bags of 1-6 tokens each.
inline GradCheckReport objective_gradcheck(std::size_t configurations, std::uint64_t seed, double step = 1e-5,
                                           bool smoothness_enabled = true) {
  Xoshiro256ss rng(seed);
  GradCheckReport report;
  std::vector<double> errors;
  for (std::size_t c = 0; c < configurations; ++c) {
    const auto d = static_cast<std::size_t>(rng.range(1, 16));
    const auto hidden = static_cast<std::size_t>(rng.range(1, 32));
    const auto layers = static_cast<std::size_t>(rng.range(1, 3));
    const auto n_bags = static_cast<std::size_t>(rng.range(2, 4));
    DetectorParams params = random_detector(d, hidden, layers, rng);

    std::vector<BagSlice> slices;
    std::size_t rows = 0;
    for (std::size_t b = 0; b < n_bags; ++b) {
      const auto t = static_cast<std::size_t>(rng.range(1, 6));
      // First bag positive, second negative, the rest random.
      const Label label = b == 0 ? Label::hallucinated
                          : b == 1 ? Label::clean
                                   : (rng.uniform() < 0.5 ? Label::hallucinated : Label::clean);
      slices.push_back({rows, t, label});
      rows += t;
    }
    if (rows < 2) {
      slices.back().length += 1;
      rows += 1;
    }
    Matrix x(rows, d);
    for (auto& v : x.data) v = rng.normal();
    SelectionPolicy policy;
    policy.r_k = rng.uniform(0.0, 0.5);

    const auto cache = forward(params, x, DetectorMode::train);
    const auto obj = mil_objective(cache.scores, slices, policy, smoothness_enabled);
    const auto analytic = backward(params, cache, obj.score_grad, false).params;
    const auto frozen = obj.selected;
    auto loss = [&](const DetectorParams& p) {
      const auto s = forward(p, x, DetectorMode::train).scores;
      return mil_objective(s, slices, policy, smoothness_enabled, &frozen).loss_total;
    };
    const auto numeric = numeric_gradient(params, loss, step);
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const double e = relative_error(analytic[i], numeric[i]);
      errors.push_back(e);
      report.max_relative_error = std::max(report.max_relative_error, e);
    }
    ++report.configurations;
  }
  report.parameters_checked = errors.size();
  if (!errors.empty()) {
    auto mid = errors.begin() + static_cast<std::ptrdiff_t>(errors.size() / 2);
    std::nth_element(errors.begin(), mid, errors.end());
    report.median_relative_error = *mid;
  }
  return report;
}

}  // namespace tokenmil
