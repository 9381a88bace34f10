#pragma once

// Planted-signal bag generator.
//
// Negative bags are i.i.d. N(0, noise_std^2 I) rows with token probabilities
// drawn from U(0.6, 1.0). Positive bags are generated the same way, then
// max(1, ceil(planted_rate * t)) random positions receive +signal_strength * u,
// where u is one unit vector per dataset, and their probabilities are scaled
// by (1 - prob_shift).
//
// Two optional knobs extend the basic model:
//   carry        positions after the first planted one receive +carry * s * u,
//                a crude model of later hidden states attending to earlier content;
//   consistency  each bag gets a semantic-consistency value from M simulated
//                generations that agree with the scored one with a label-dependent
//                probability.
//
// Draw order: the "synth" substream gives u and the label permutation; bag i
// uses its own child stream, so bags can be generated independently.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokenmil/dataset.hpp"
#include "tokenmil/errors.hpp"
#include "tokenmil/rng.hpp"
#include "tokenmil/uncertainty.hpp"

namespace tokenmil {

struct SyntheticSpec {
  std::string dataset_id = "synthetic";
  std::size_t n_bags = 400;
  double positive_fraction = 0.5;
  std::size_t dim = 32;
  std::size_t t_min = 5;
  std::size_t t_max = 40;
  double planted_rate = 0.1;
  double signal_strength = 3.0;
  double prob_shift = 0.0;
  double noise_std = 1.0;
  std::uint64_t seed = 0;
  std::optional<std::vector<double>> domain_shift;

  double carry = 0.0;
  std::size_t generations = 6;
  double agree_clean = 0.8;         // P(extra generation agrees | clean bag)
  double agree_hallucinated = 0.8;  // P(extra generation agrees | hallucinated bag)
  std::optional<std::uint64_t> direction_seed;  // defaults to seed; shared across a family

  double train_fraction = 0.6;
  double validation_fraction = 0.2;
  int layer_index = 0;
};

inline void validate(const SyntheticSpec& s) {
  auto fail = [](const std::string& m) { throw DataError("synthetic spec: " + m); };
  if (s.n_bags < 2) fail("n_bags must be >= 2");
  if (!(s.positive_fraction > 0.0 && s.positive_fraction < 1.0)) fail("positive_fraction must lie in (0, 1)");
  if (s.dim == 0) fail("dim must be positive");
  if (s.t_min < 1) fail("t_min must be >= 1");
  if (s.t_max < s.t_min) fail("t_max must be >= t_min");
  if (!(s.planted_rate > 0.0 && s.planted_rate <= 1.0)) fail("planted_rate must lie in (0, 1]");
  if (!(s.signal_strength >= 0.0)) fail("signal_strength must be >= 0");
  if (!(s.prob_shift >= 0.0 && s.prob_shift < 1.0)) fail("prob_shift must lie in [0, 1)");
  if (!(s.noise_std >= 0.0)) fail("noise_std must be >= 0");
  if (s.domain_shift && s.domain_shift->size() != s.dim) fail("domain_shift length must equal dim");
  if (!(s.carry >= 0.0)) fail("carry must be >= 0");
  if (s.generations < 1) fail("generations must be >= 1");
  if (!(s.agree_clean >= 0.0 && s.agree_clean <= 1.0)) fail("agree_clean must lie in [0, 1]");
  if (!(s.agree_hallucinated >= 0.0 && s.agree_hallucinated <= 1.0)) fail("agree_hallucinated must lie in [0, 1]");
}

inline nlohmann::json to_json(const SyntheticSpec& s) {
  nlohmann::json j = {{"dataset_id", s.dataset_id},
                      {"n_bags", s.n_bags},
                      {"positive_fraction", s.positive_fraction},
                      {"dim", s.dim},
                      {"t_min", s.t_min},
                      {"t_max", s.t_max},
                      {"planted_rate", s.planted_rate},
                      {"signal_strength", s.signal_strength},
                      {"prob_shift", s.prob_shift},
                      {"noise_std", s.noise_std},
                      {"seed", s.seed},
                      {"carry", s.carry},
                      {"generations", s.generations},
                      {"agree_clean", s.agree_clean},
                      {"agree_hallucinated", s.agree_hallucinated},
                      {"train_fraction", s.train_fraction},
                      {"validation_fraction", s.validation_fraction},
                      {"layer_index", s.layer_index}};
  if (s.domain_shift) j["domain_shift"] = *s.domain_shift;
  if (s.direction_seed) j["direction_seed"] = *s.direction_seed;
  return j;
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  try {
    s.dataset_id = j.value("dataset_id", s.dataset_id);
    s.n_bags = j.value("n_bags", s.n_bags);
    s.positive_fraction = j.value("positive_fraction", s.positive_fraction);
    s.dim = j.value("dim", s.dim);
    if (j.contains("t_range")) {
      const auto r = j["t_range"].get<std::vector<std::size_t>>();
      if (r.size() != 2) throw DataError("synthetic spec: t_range must have two entries");
      s.t_min = r[0];
      s.t_max = r[1];
    }
    s.t_min = j.value("t_min", s.t_min);
    s.t_max = j.value("t_max", s.t_max);
    s.planted_rate = j.value("planted_rate", s.planted_rate);
    s.signal_strength = j.value("signal_strength", s.signal_strength);
    s.prob_shift = j.value("prob_shift", s.prob_shift);
    s.noise_std = j.value("noise_std", s.noise_std);
    s.seed = j.value("seed", s.seed);
    if (j.contains("domain_shift")) s.domain_shift = j["domain_shift"].get<std::vector<double>>();
    s.carry = j.value("carry", s.carry);
    s.generations = j.value("generations", s.generations);
    s.agree_clean = j.value("agree_clean", s.agree_clean);
    s.agree_hallucinated = j.value("agree_hallucinated", s.agree_hallucinated);
    if (j.contains("direction_seed")) s.direction_seed = j["direction_seed"].get<std::uint64_t>();
    s.train_fraction = j.value("train_fraction", s.train_fraction);
    s.validation_fraction = j.value("validation_fraction", s.validation_fraction);
    s.layer_index = j.value("layer_index", s.layer_index);
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("synthetic spec: ") + ex.what());
  }
  validate(s);
  return s;
}

/// Unit signal direction for a seed.
inline std::vector<double> signal_direction(std::uint64_t seed, std::size_t dim) {
  auto rng = make_stream(seed, "direction");
  std::vector<double> u(dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& x : u) {
      x = rng.normal();
      norm += x * x;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (auto& x : u) x /= norm;
  return u;
}

/// Number of planted tokens in a positive bag of length t.
inline std::size_t planted_count(double planted_rate, std::size_t t) {
  const double raw = std::ceil(planted_rate * static_cast<double>(t) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(raw, 1.0)), 1, t);
}

inline Dataset generate(const SyntheticSpec& spec) {
  validate(spec);
  const std::size_t d = spec.dim;
  const auto u = signal_direction(spec.direction_seed.value_or(spec.seed), d);
  auto rng = make_stream(spec.seed, "synth");

  const auto n_pos = static_cast<std::size_t>(
      std::clamp<long long>(std::llround(spec.positive_fraction * static_cast<double>(spec.n_bags)), 1,
                            static_cast<long long>(spec.n_bags) - 1));
  std::vector<Label> labels(spec.n_bags, Label::clean);
  std::fill_n(labels.begin(), n_pos, Label::hallucinated);
  rng.shuffle(labels);
  const std::uint64_t bag_root = rng();

  Dataset ds;
  ds.bags.reserve(spec.n_bags);
  std::vector<std::optional<double>> consistency(spec.n_bags);
  const int width = static_cast<int>(std::to_string(spec.n_bags).size());
  for (std::size_t b = 0; b < spec.n_bags; ++b) {
    Xoshiro256ss brng(child_seed(bag_root, b));
    TokenBag bag;
    std::ostringstream id;
    id << spec.dataset_id << '_' << std::setw(width) << std::setfill('0') << b;
    bag.bag_id = id.str();
    bag.dim = d;
    bag.label = labels[b];
    const auto t = static_cast<std::size_t>(brng.range(static_cast<std::int64_t>(spec.t_min),
                                                       static_cast<std::int64_t>(spec.t_max)));
    std::vector<double> rows(t * d);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t c = 0; c < d; ++c)
        rows[i * d + c] = spec.noise_std * brng.normal() + (spec.domain_shift ? (*spec.domain_shift)[c] : 0.0);
    bag.token_probs.resize(t);
    for (auto& p : bag.token_probs) p = brng.uniform(0.6, 1.0);

    if (bag.positive()) {
      const std::size_t m = planted_count(spec.planted_rate, t);
      std::vector<std::size_t> pos(t);
      std::iota(pos.begin(), pos.end(), std::size_t{0});
      for (std::size_t i = 0; i < m; ++i) std::swap(pos[i], pos[i + brng.below(t - i)]);
      pos.resize(m);
      std::sort(pos.begin(), pos.end());
      std::vector<bool> planted(t, false);
      for (auto i : pos) planted[i] = true;
      for (std::size_t i = 0; i < t; ++i) {
        double shift = 0.0;
        if (planted[i]) {
          shift = spec.signal_strength;
          bag.token_probs[i] *= (1.0 - spec.prob_shift);
        } else if (i > pos.front()) {
          shift = spec.carry * spec.signal_strength;
        }
        if (shift != 0.0)
          for (std::size_t c = 0; c < d; ++c) rows[i * d + c] += shift * u[c];
      }
      bag.planted_indices = std::move(pos);
    } else {
      bag.planted_indices = std::vector<std::size_t>{};
    }

    const double agree = bag.positive() ? spec.agree_hallucinated : spec.agree_clean;
    std::size_t same = 1;
    for (std::size_t m = 1; m < spec.generations; ++m) same += brng.uniform() < agree;
    consistency[b] = static_cast<double>(same) / static_cast<double>(spec.generations);

    bag.embeddings.assign(rows.begin(), rows.end());
    ds.bags.push_back(std::move(bag));
  }

  ds.manifest = make_manifest(spec.dataset_id, d, spec.layer_index, ds.bags);
  for (std::size_t b = 0; b < ds.bags.size(); ++b) {
    const auto& bag = ds.bags[b];
    ds.manifest.annotations[bag.bag_id] = {bag.bag_id, sentence_perplexity(bag.token_probs), consistency[b],
                                           AnnotationSource::computed};
  }
  ds.manifest = split_dataset(ds.manifest, spec.train_fraction, spec.validation_fraction,
                              substream_seed(spec.seed, "split"));
  return ds;
}

/// Domains sharing one signal direction, each with its own noise draw and a
/// random mean shift of norm `shift_scale` added to every row.
inline std::vector<Dataset> generate_family(const SyntheticSpec& base, std::size_t n_domains, double shift_scale) {
  if (n_domains < 2) throw DataError("generate_family: need at least 2 domains");
  if (!(shift_scale >= 0.0)) throw DataError("generate_family: shift_scale must be >= 0");
  validate(base);
  auto rng = make_stream(base.seed, "family");
  std::vector<Dataset> out;
  for (std::size_t k = 0; k < n_domains; ++k) {
    SyntheticSpec spec = base;
    spec.seed = child_seed(base.seed, k);
    spec.direction_seed = base.direction_seed.value_or(base.seed);
    spec.dataset_id = base.dataset_id + "_d" + std::to_string(k);
    std::vector<double> shift(base.dim);
    double norm = 0.0;
    for (auto& x : shift) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : shift) x = norm > 0.0 ? shift_scale * x / norm : 0.0;
    spec.domain_shift = std::move(shift);
    out.push_back(generate(spec));
  }
  return out;
}

}  // namespace tokenmil
