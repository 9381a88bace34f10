#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "tokenmil/rng.hpp"

using namespace tokenmil;

TEST(Rng, SplitMix64ReferenceVector) {
  SplitMix64 sm(0);
  EXPECT_EQ(sm.next(), 0xe220a8397b1dcdafULL);
  EXPECT_EQ(sm.next(), 0x6e789e6aa1b965f4ULL);
  EXPECT_EQ(sm.next(), 0x06c45d188009454fULL);
}

TEST(Rng, XoshiroReferenceVector) {
  Xoshiro256ss x(0);
  EXPECT_EQ(x(), 0x99ec5f36cb75f2b4ULL);
  EXPECT_EQ(x(), 0xbf6e1f784956452aULL);
  EXPECT_EQ(x(), 0x1a5f849d4933e6e0ULL);
}

TEST(Rng, BoundedDrawsStayInRange) {
  Xoshiro256ss x(7);
  std::vector<int> hist(5, 0);
  for (int i = 0; i < 5000; ++i) {
    const auto v = x.range(3, 7);
    ASSERT_GE(v, 3);
    ASSERT_LE(v, 7);
    ++hist[static_cast<std::size_t>(v - 3)];
  }
  for (int h : hist) EXPECT_GT(h, 800);
  for (int i = 0; i < 1000; ++i) {
    const double u = x.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(Rng, NormalMoments) {
  Xoshiro256ss x(11);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = x.normal();
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, ShuffleIsPermutationAndSeeded) {
  std::vector<int> a(50), b;
  std::iota(a.begin(), a.end(), 0);
  b = a;
  Xoshiro256ss x(3), y(3);
  x.shuffle(a);
  y.shuffle(b);
  EXPECT_EQ(a, b);
  std::vector<int> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);
}

TEST(Rng, SubstreamsDiffer) {
  EXPECT_NE(substream_seed(1, "split"), substream_seed(1, "init"));
  EXPECT_NE(substream_seed(1, "split"), substream_seed(2, "split"));
  EXPECT_EQ(substream_seed(9, "synth"), substream_seed(9, "synth"));
  EXPECT_NE(child_seed(5, 0), child_seed(5, 1));
}
