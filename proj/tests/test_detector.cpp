#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "test_util.hpp"
#include "tokenmil/detector.hpp"
#include "tokenmil/gradcheck.hpp"

using namespace tokenmil;

namespace {

Matrix random_batch(std::size_t n, std::size_t d, Xoshiro256ss& rng) {
  Matrix x(n, d);
  for (auto& v : x.data) v = rng.normal();
  return x;
}

double weighted_score_sum(const DetectorParams& p, const Matrix& x, const std::vector<double>& w, DetectorMode mode) {
  const auto s = forward(p, x, mode).scores;
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) total += w[i] * s[i];
  return total;
}

}  // namespace

TEST(DetectorInit, DeterministicAndShaped) {
  const auto a = init_params(4096, 256, 2, 123);
  const auto b = init_params(4096, 256, 2, 123);
  EXPECT_EQ(a.values, b.values);
  ASSERT_EQ(a.layers.size(), 2u);
  EXPECT_EQ(a.layers[0].in, 4096u);
  EXPECT_EQ(a.layers[0].out, 256u);
  EXPECT_TRUE(a.layers[0].normalized);
  EXPECT_EQ(a.layers[1].in, 256u);
  EXPECT_EQ(a.layers[1].out, 1u);
  for (double v : a.bias(0)) EXPECT_EQ(v, 0.0);
  for (double v : a.gamma(0)) EXPECT_EQ(v, 1.0);
  for (double v : a.beta(0)) EXPECT_EQ(v, 0.0);
  EXPECT_NE(init_params(4096, 256, 2, 124).values, a.values);
}

TEST(DetectorInit, SingleLayerHasNoNorm) {
  const auto p = init_params(8, 16, 1, 1);
  ASSERT_EQ(p.layers.size(), 1u);
  EXPECT_FALSE(p.layers[0].normalized);
  EXPECT_EQ(p.layers[0].out, 1u);
  EXPECT_TRUE(p.running_mean.empty());
  EXPECT_EQ(p.parameter_count(), 9u);
}

TEST(DetectorInit, UnitVariancePreActivations) {
  const auto p = init_params(64, 512, 2, 5);
  Xoshiro256ss rng(6);
  const auto x = random_batch(400, 64, rng);
  Matrix z;
  affine(x, p.weight(0), p.bias(0), 512, z);
  double s2 = 0.0;
  for (double v : z.data) s2 += v * v;
  EXPECT_NEAR(s2 / static_cast<double>(z.data.size()), 1.0, 0.1);
}

TEST(DetectorForward, ZeroWeightsGiveHalf) {
  auto p = make_detector_shape(5, 7, 2);
  std::fill(p.values.begin(), p.values.end(), 0.0);
  Xoshiro256ss rng(1);
  const auto x = random_batch(4, 5, rng);
  for (double s : score_tokens(p, x, DetectorMode::train)) EXPECT_DOUBLE_EQ(s, 0.5);
  for (double s : score_tokens(p, x)) EXPECT_DOUBLE_EQ(s, 0.5);
}

TEST(DetectorForward, InferenceIsPure) {
  auto p = init_params(6, 10, 3, 2);
  Xoshiro256ss rng(2);
  const auto x = random_batch(5, 6, rng);
  const auto before = p.running_mean;
  const auto a = score_tokens(p, x, DetectorMode::inference);
  const auto b = score_tokens(p, x, DetectorMode::inference);
  EXPECT_EQ(a, b);
  EXPECT_EQ(before, p.running_mean);
  for (double s : a) {
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
  }
}

TEST(DetectorForward, TrainModeUpdatesRunningStatistics) {
  auto p = init_params(3, 4, 2, 3);
  Xoshiro256ss rng(3);
  const auto x = random_batch(6, 3, rng);
  const auto before = p.running_mean;
  score_tokens(p, x, DetectorMode::train);
  EXPECT_NE(before, p.running_mean);
  for (double v : p.running_var[0]) EXPECT_GE(v, 0.0);
}

TEST(DetectorForward, TrainModeNeedsTwoRows) {
  auto p = init_params(3, 4, 2, 3);
  Matrix one(1, 3, 0.5);
  EXPECT_THROW(score_tokens(p, one, DetectorMode::train), DataError);
  EXPECT_NO_THROW(score_tokens(p, one, DetectorMode::inference));
  Matrix wrong(2, 4, 0.5);
  EXPECT_THROW(score_tokens(p, wrong, DetectorMode::inference), DataError);
}

TEST(DetectorForward, MatchesReferenceImplementation) {
  Xoshiro256ss rng(44);
  for (int trial = 0; trial < 20; ++trial) {
    const auto d = static_cast<std::size_t>(rng.range(1, 12));
    const auto h = static_cast<std::size_t>(rng.range(1, 20));
    const auto layers = static_cast<std::size_t>(rng.range(1, 3));
    const auto n = static_cast<std::size_t>(rng.range(2, 9));
    const auto p = random_detector(d, h, layers, rng);
    const auto x = random_batch(n, d, rng);
    std::vector<std::vector<double>> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i].assign(x.row(i).begin(), x.row(i).end());
    const auto expected = oracle::reference_train_scores(p, rows);
    const auto got = forward(p, x, DetectorMode::train).scores;
    ASSERT_EQ(got.size(), expected.size());
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(got[i], expected[i], 1e-5);
  }
}

TEST(DetectorBackward, ZeroUpstreamGivesZeroGradients) {
  const auto p = init_params(4, 6, 2, 8);
  Xoshiro256ss rng(8);
  const auto x = random_batch(5, 4, rng);
  const std::vector<double> up(5, 0.0);
  const auto g = backward(p, x, up);
  for (double v : g.params) EXPECT_EQ(v, 0.0);
  for (double v : g.input.data) EXPECT_EQ(v, 0.0);
}

TEST(DetectorBackward, SingleLayerClosedForm) {
  auto p = init_params(3, 1, 1, 9);
  Matrix x(1, 3);
  x.data = {0.3, -1.2, 2.0};
  const std::vector<double> up{1.0};
  const auto g = backward(p, x, up, DetectorMode::inference);
  double z = p.values[3];
  for (std::size_t q = 0; q < 3; ++q) z += p.values[q] * x.data[q];
  const double s = 1.0 / (1.0 + std::exp(-z));
  for (std::size_t q = 0; q < 3; ++q) EXPECT_NEAR(g.params[q], s * (1 - s) * x.data[q], 1e-14);
  EXPECT_NEAR(g.params[3], s * (1 - s), 1e-14);
}

TEST(DetectorBackward, TwoLayerMatchesFiniteDifferences) {
  // d = 8, n = 4, base step 1e-3. A plain central difference at this step carries
  // an O(h^2) truncation error of about 1e-4 relative through the batch
  // statistics of only four rows, so the oracle uses one Richardson step on top of
  // the 1e-3 / 5e-4 central differences. The tolerance is unchanged.
  Xoshiro256ss rng(2024);
  const auto p = random_detector(8, 16, 2, rng);
  const auto x = random_batch(4, 8, rng);
  std::vector<double> up(4);
  for (auto& u : up) u = rng.normal();
  const auto analytic = backward(p, x, up).params;
  auto f = [&](const DetectorParams& q) { return weighted_score_sum(q, x, up, DetectorMode::train); };
  const auto coarse = numeric_gradient(p, f, 1e-3);
  const auto fine = numeric_gradient(p, f, 5e-4);
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double numeric = (4.0 * fine[i] - coarse[i]) / 3.0;
    EXPECT_LT(relative_error(analytic[i], numeric), 1e-4) << "param " << i;
  }
}

TEST(DetectorBackward, InputGradientMatchesFiniteDifferences) {
  Xoshiro256ss rng(77);
  for (auto mode : {DetectorMode::train, DetectorMode::inference}) {
    auto p = random_detector(5, 9, 3, rng);
    for (auto& v : p.running_var[0]) v = rng.uniform(0.5, 2.0);
    const auto x = random_batch(6, 5, rng);
    std::vector<double> up(6);
    for (auto& u : up) u = rng.normal();
    const auto g = backward(p, x, up, mode);
    for (std::size_t k = 0; k < x.data.size(); ++k) {
      Matrix xp = x, xm = x;
      xp.data[k] += 1e-6;
      xm.data[k] -= 1e-6;
      const double num = (weighted_score_sum(p, xp, up, mode) - weighted_score_sum(p, xm, up, mode)) / 2e-6;
      EXPECT_LT(relative_error(g.input.data[k], num), 1e-4) << "input " << k;
    }
  }
}

TEST(DetectorBackward, RandomConfigurationSweep) {
  Xoshiro256ss rng(99);
  std::vector<double> errors;
  for (int c = 0; c < 50; ++c) {
    const auto d = static_cast<std::size_t>(rng.range(1, 16));
    const auto h = static_cast<std::size_t>(rng.range(1, 32));
    const auto n = static_cast<std::size_t>(rng.range(2, 8));
    const auto layers = static_cast<std::size_t>(rng.range(1, 3));
    const auto p = random_detector(d, h, layers, rng);
    const auto x = random_batch(n, d, rng);
    std::vector<double> up(n);
    for (auto& u : up) u = rng.normal();
    const auto analytic = backward(p, x, up).params;
    const auto numeric = numeric_gradient(
        p, [&](const DetectorParams& q) { return weighted_score_sum(q, x, up, DetectorMode::train); }, 1e-5);
    for (std::size_t i = 0; i < analytic.size(); ++i) errors.push_back(relative_error(analytic[i], numeric[i]));
  }
  std::sort(errors.begin(), errors.end());
  EXPECT_LT(errors.back(), 1e-3);
  EXPECT_LT(errors[errors.size() / 2], 1e-5);
}

TEST(DetectorTraining, RunningStatisticsConverge) {
  // One epoch = one pass over a fixed set of batches drawn from N(0, I).
  auto p = init_params(4, 8, 2, 10);
  Xoshiro256ss rng(10);
  std::vector<Matrix> epoch_batches;
  for (int b = 0; b < 8; ++b) epoch_batches.push_back(random_batch(64, 4, rng));
  const auto held = random_batch(16, 4, rng);
  std::vector<double> prev;
  double last_delta = 1.0;
  for (int epoch = 0; epoch < 30; ++epoch) {
    for (const auto& x : epoch_batches) score_tokens(p, x, DetectorMode::train);
    const auto s = score_tokens(p, held);
    if (!prev.empty()) {
      last_delta = 0.0;
      for (std::size_t i = 0; i < s.size(); ++i) last_delta = std::max(last_delta, std::abs(s[i] - prev[i]));
    }
    prev = s;
  }
  EXPECT_LT(last_delta, 1e-3);
}

TEST(Checkpoint, RoundTripAndShapeCheck) {
  testutil::TempDir dir("ckpt");
  Xoshiro256ss rng(5);
  auto p = random_detector(6, 12, 3, rng);
  for (auto& v : p.running_var[1]) v = 2.5;
  save_checkpoint(p, dir / "m.ckpt");
  const auto q = load_checkpoint(dir / "m.ckpt", 6);
  EXPECT_EQ(q.layer_count, 3u);
  EXPECT_EQ(q.hidden_dim, 12u);
  ASSERT_EQ(q.values.size(), p.values.size());
  for (std::size_t i = 0; i < p.values.size(); ++i)
    EXPECT_EQ(q.values[i], static_cast<double>(static_cast<float>(p.values[i])));
  EXPECT_EQ(q.running_var[1][0], 2.5);
  EXPECT_NEAR(q.epsilon, 1e-5, 1e-12);
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt", 7), DataError);
  EXPECT_EQ(std::filesystem::file_size(dir / "m.ckpt"),
            4 + 4 * 4 + 2 * 4 + 4 * (p.values.size() + 2 * 12 * 2));
}

TEST(Checkpoint, TruncatedFileRejected) {
  testutil::TempDir dir("ckpt_trunc");
  const auto p = init_params(3, 4, 2, 1);
  save_checkpoint(p, dir / "m.ckpt");
  std::filesystem::resize_file(dir / "m.ckpt", 30);
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt"), DataError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), DataError);
}
