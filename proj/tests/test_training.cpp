#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "tokenmil/gradcheck.hpp"
#include "tokenmil/synthetic.hpp"
#include "tokenmil/training.hpp"

using namespace tokenmil;

namespace {

SelectionPolicy adaptive(double rk) { return {SelectionKind::adaptive_topk, rk}; }

SyntheticSpec small_spec(std::uint64_t seed = 0) {
  SyntheticSpec s;
  s.n_bags = 160;
  s.dim = 12;
  s.t_min = 4;
  s.t_max = 16;
  s.seed = seed;
  return s;
}

TrainConfig small_config(std::uint64_t seed = 0) {
  TrainConfig c;
  c.epochs = 4;
  c.batch_bags = 16;
  c.hidden_dim = 24;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Selection, KForLengthExamples) {
  EXPECT_EQ(k_for_length(adaptive(0.1), 10), 2u);
  EXPECT_EQ(k_for_length(adaptive(0.1), 1), 1u);
  for (std::size_t t : {1u, 2u, 17u, 400u}) EXPECT_EQ(k_for_length(adaptive(0.0), t), 1u);
  EXPECT_EQ(k_for_length(adaptive(0.9), 3), 3u);
  EXPECT_EQ(k_for_length({SelectionKind::last, 0.5}, 30), 1u);
  EXPECT_THROW(k_for_length(adaptive(0.1), 0), DomainError);
  EXPECT_THROW(k_for_length(adaptive(1.0), 4), DomainError);
  EXPECT_THROW(k_for_length(adaptive(-0.1), 4), DomainError);
}

TEST(Selection, InstanceExamples) {
  const std::vector<double> s{0.9, 0.1, 0.5, 0.7};
  EXPECT_EQ(top_k_indices(s, 2), (std::vector<std::size_t>{0, 3}));
  EXPECT_EQ(select_instances(adaptive(0.25), s), (std::vector<std::size_t>{0, 3}));
  const std::vector<double> flat(5, 0.3);
  EXPECT_EQ(top_k_indices(flat, 2), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(select_instances({SelectionKind::first}, s), std::vector<std::size_t>{0});
  EXPECT_EQ(select_instances({SelectionKind::last}, s), std::vector<std::size_t>{3});
  EXPECT_EQ(select_instances({SelectionKind::before_last}, s), std::vector<std::size_t>{2});
  const std::vector<double> one{0.4};
  EXPECT_EQ(select_instances({SelectionKind::before_last}, one), std::vector<std::size_t>{0});
  EXPECT_THROW(select_instances(adaptive(0.1), std::vector<double>{}), DomainError);
  EXPECT_THROW(select_instances(adaptive(0.1), std::vector<double>{0.1, NAN}), DomainError);
}

TEST(Selection, MatchesSortOracleWithTies) {
  Xoshiro256ss rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto t = static_cast<std::size_t>(rng.range(1, 40));
    std::vector<double> s(t);
    // Draw from a small grid on odd trials so ties are common.
    for (auto& x : s) x = trial % 2 ? static_cast<double>(rng.below(4)) / 4.0 : rng.uniform();
    const auto policy = adaptive(rng.uniform(0.0, 0.99));
    EXPECT_EQ(select_instances(policy, s), oracle::sort_topk(s, k_for_length(policy, t)));
  }
}

TEST(Selection, InvariantUnderMonotoneTransform) {
  Xoshiro256ss rng(32);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(static_cast<std::size_t>(rng.range(1, 30)));
    for (auto& x : s) x = rng.normal();
    std::vector<double> g(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) g[i] = 3.0 * s[i] * s[i] * s[i] + 1.0;
    const auto policy = adaptive(0.2);
    EXPECT_EQ(select_instances(policy, s), select_instances(policy, g));
  }
}

TEST(Loss, MilExamples) {
  EXPECT_NEAR(mil_loss(std::vector<double>{1.0}, std::vector<double>{0.0}), 0.0, 1e-15);
  EXPECT_NEAR(mil_loss(std::vector<double>{0.5}, std::vector<double>{0.5}), 1.0, 1e-15);
  EXPECT_NEAR(mil_loss(std::vector<double>{0.8, 0.6}, std::vector<double>{0.3}), 0.6, 1e-12);
  EXPECT_THROW(mil_loss(std::vector<double>{}, std::vector<double>{0.3}), DomainError);
}

TEST(Loss, SmoothnessExamples) {
  EXPECT_EQ(smoothness_loss(std::vector<double>{0.3, 0.3, 0.3}), 0.0);
  EXPECT_DOUBLE_EQ(smoothness_loss(std::vector<double>{0.0, 1.0}), 1.0);
  EXPECT_NEAR(smoothness_loss(std::vector<double>{0.2, 0.4, 0.4}), 0.02, 1e-12);
  EXPECT_EQ(smoothness_loss(std::vector<double>{0.7}), 0.0);
}

TEST(Loss, ObjectiveDecomposesAndMatchesPieces) {
  // Two bags, one each side: the objective reduces to mil_loss + mean smoothness.
  const std::vector<double> s{0.9, 0.1, 0.5, 0.7, 0.2, 0.3, 0.25};
  const std::vector<BagSlice> slices{{0, 4, Label::hallucinated}, {4, 3, Label::clean}};
  const auto v = mil_objective(s, slices, adaptive(0.25), true);
  EXPECT_NEAR(v.loss_mil, 1.0 - 0.8 + 0.3, 1e-12);
  const double smooth = (smoothness_loss(std::span(s).subspan(0, 4)) + smoothness_loss(std::span(s).subspan(4, 3))) / 2;
  EXPECT_NEAR(v.loss_smooth, smooth, 1e-12);
  EXPECT_NEAR(v.loss_total, v.loss_mil + v.loss_smooth, 1e-15);
  EXPECT_EQ(v.selected[0], (std::vector<std::size_t>{0, 3}));
  EXPECT_EQ(v.selected[1], (std::vector<std::size_t>{1}));

  const auto off = mil_objective(s, slices, adaptive(0.25), false);
  EXPECT_EQ(off.loss_smooth, 0.0);
  EXPECT_EQ(off.loss_total, off.loss_mil);
  // Unselected tokens get no MIL gradient.
  EXPECT_EQ(off.score_grad[1], 0.0);
  EXPECT_EQ(off.score_grad[2], 0.0);
  EXPECT_NEAR(off.score_grad[0], -0.5, 1e-15);
  EXPECT_NEAR(off.score_grad[5], 1.0, 1e-15);
}

TEST(Loss, ObjectiveGradientMatchesFiniteDifferences) {
  const auto report = objective_gradcheck(10, 3);
  EXPECT_EQ(report.configurations, 10u);
  EXPECT_LT(report.max_relative_error, 1e-3);
  EXPECT_LT(report.median_relative_error, 1e-5);
}

TEST(Training, LossDecreasesAndLogsAreConsistent) {
  const auto ds = generate(small_spec());
  auto cfg = small_config();
  cfg.epochs = 2;
  const auto r = train(ds, cfg);
  const auto losses = r.epoch_losses();
  ASSERT_EQ(losses.size(), 2u);
  EXPECT_LT(losses[1], losses[0]);
  for (const auto& s : r.steps) {
    EXPECT_NEAR(s.loss_total, s.loss_mil + s.loss_smooth, 1e-9);
    EXPECT_EQ(s.bag_ids.size(), s.selected_indices.size());
    EXPECT_TRUE(std::isfinite(s.grad_norm));
  }
}

TEST(Training, BatchesAreBalancedAndCoverTheTrainSplit) {
  const auto ds = generate(small_spec(1));
  auto cfg = small_config(1);
  cfg.epochs = 1;
  const auto r = train(ds, cfg);
  std::set<std::string> seen;
  std::map<std::string, Label> label;
  for (const auto& b : ds.bags) label[b.bag_id] = b.label;
  for (const auto& s : r.steps) {
    std::size_t pos = 0;
    for (const auto& id : s.bag_ids) {
      seen.insert(id);
      pos += label[id] == Label::hallucinated;
    }
    EXPECT_GT(pos, 0u);
    EXPECT_LT(pos, s.bag_ids.size());
  }
  EXPECT_EQ(seen.size(), ds.manifest.count(Split::train));
}

TEST(Training, NoSmoothnessMeansZeroSmoothLoss) {
  const auto ds = generate(small_spec());
  auto cfg = small_config();
  cfg.epochs = 1;
  cfg.smoothness_enabled = false;
  for (const auto& s : train(ds, cfg).steps) EXPECT_EQ(s.loss_smooth, 0.0);
}

TEST(Training, DeterministicStepLogs) {
  const auto ds = generate(small_spec(2));
  const auto cfg = small_config(2);
  const auto a = train(ds, cfg);
  const auto b = train(ds, cfg);
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) EXPECT_EQ(to_json(a.steps[i]).dump(), to_json(b.steps[i]).dump());
  EXPECT_EQ(a.params.values, b.params.values);
  auto other = cfg;
  other.seed = 3;
  EXPECT_NE(train(ds, other).params.values, a.params.values);
}

TEST(Training, ZeroLambdaReproducesUnaugmentedRun) {
  const auto ds = generate(small_spec(4));
  auto base = small_config(4);
  base.epochs = 2;
  const auto plain = train(ds, base);
  for (auto mode : {AugmentationMode::token_level, AugmentationMode::sentence_perplexity,
                    AugmentationMode::semantic_consistency}) {
    auto cfg = base;
    cfg.augmentation = {mode, 0.0};
    const auto r = train(ds, cfg);
    EXPECT_EQ(r.params.values, plain.params.values) << to_string(mode);
    ASSERT_EQ(r.steps.size(), plain.steps.size());
    for (std::size_t i = 0; i < r.steps.size(); ++i) EXPECT_EQ(r.steps[i].loss_total, plain.steps[i].loss_total);
  }
}

TEST(Training, RejectsUntrainableInputs) {
  auto ds = generate(small_spec());
  auto cfg = small_config();
  EXPECT_THROW(train(ds, init_params(5, 8, 2, 0), cfg), DataError);
  auto bad = cfg;
  bad.batch_bags = 1;
  EXPECT_THROW(train(ds, bad), DataError);
  for (auto& [id, s] : ds.manifest.splits)
    if (s == Split::train) {
      const auto it = std::find_if(ds.bags.begin(), ds.bags.end(), [&](const TokenBag& b) { return b.bag_id == id; });
      if (it->label == Label::clean) s = Split::test;
    }
  EXPECT_THROW(train(ds, cfg), DataError);
}

TEST(Training, ConfigJsonRoundTrip) {
  TrainConfig c;
  c.epochs = 7;
  c.seed = 99;
  c.smoothness_enabled = false;
  c.augmentation = {AugmentationMode::semantic_consistency, 0.5};
  c.selection = {SelectionKind::before_last, 0.2};
  c.hidden_dim = 64;
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"epochs", "many"}}), DataError);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"policy", "middle"}}), std::exception);
}

TEST(LayerSelection, SingleCandidate) {
  auto spec = small_spec();
  spec.layer_index = 12;
  const std::vector<Dataset> one{generate(spec)};
  EXPECT_EQ(select_layer(one, small_config()).layer_index, 12);
}

TEST(LayerSelection, SignalBeatsNoise) {
  auto noise = small_spec(5);
  noise.signal_strength = 0.0;
  noise.layer_index = 3;
  auto signal = small_spec(5);
  signal.layer_index = 9;
  const std::vector<Dataset> layers{generate(noise), generate(signal)};
  const auto sel = select_layer(layers, small_config());
  EXPECT_EQ(sel.layer_index, 9);
  ASSERT_EQ(sel.candidates.size(), 2u);
  EXPECT_GT(*sel.candidates[1].validation_auroc, *sel.candidates[0].validation_auroc);
}

TEST(LayerSelection, TiesGoToLowestIndexAndFailuresAreSkipped) {
  std::vector<Dataset> layers;
  for (int idx : {7, 4, 5}) {
    auto spec = small_spec(6);
    spec.layer_index = idx;
    layers.push_back(generate(spec));
  }
  EXPECT_EQ(select_layer(layers, small_config()).layer_index, 4);

  auto broken = layers[1];
  for (auto& [id, s] : broken.manifest.splits) s = Split::test;
  const std::vector<Dataset> with_broken{broken, layers[0]};
  const auto sel = select_layer(with_broken, small_config());
  EXPECT_EQ(sel.layer_index, 7);
  EXPECT_FALSE(sel.candidates[0].validation_auroc.has_value());
  EXPECT_FALSE(sel.candidates[0].skipped_reason.empty());
  const std::vector<Dataset> all_broken{broken};
  EXPECT_THROW(select_layer(all_broken, small_config()), DataError);
}
