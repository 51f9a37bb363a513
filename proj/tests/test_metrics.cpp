#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "ushl/metrics.hpp"

using namespace ushl;

namespace {

std::vector<std::uint8_t> ones(std::size_t n) { return std::vector<std::uint8_t>(n, 1); }

}  // namespace

TEST(AveragePrecision, ThreeFrameExample) {
  const std::vector<float> s{0.9f, 0.8f, 0.3f};
  const std::vector<std::uint8_t> y{1, 0, 1};
  EXPECT_NEAR(*average_precision(s, y, ones(3)), (1.0 + 2.0 / 3.0) / 2.0, 1e-4);
  EXPECT_NEAR(*average_precision(s, y, ones(3)), 0.8333, 1e-4);
}

TEST(AveragePrecision, PerfectRankingIsOne) {
  const std::vector<float> s{0.1f, 0.9f, 0.8f, 0.2f};
  const std::vector<std::uint8_t> y{0, 1, 1, 0};
  EXPECT_DOUBLE_EQ(*average_precision(s, y, ones(4)), 1.0);
}

TEST(AveragePrecision, NoPositivesIsUndefined) {
  const std::vector<float> s{0.1f, 0.9f};
  const std::vector<std::uint8_t> y{0, 0};
  EXPECT_FALSE(average_precision(s, y, ones(2)).has_value());
}

TEST(AveragePrecision, TiesBreakByFrameIndex) {
  const std::vector<float> s{0.5f, 0.5f};
  EXPECT_DOUBLE_EQ(*average_precision(s, std::vector<std::uint8_t>{1, 0}, ones(2)), 1.0);
  EXPECT_DOUBLE_EQ(*average_precision(s, std::vector<std::uint8_t>{0, 1}, ones(2)), 0.5);
}

TEST(AveragePrecision, MaskedFramesAreIgnored) {
  const std::vector<float> s{0.9f, 0.99f, 0.3f};
  const std::vector<std::uint8_t> y{1, 0, 1};
  const std::vector<std::uint8_t> mask{1, 0, 1};
  EXPECT_DOUBLE_EQ(*average_precision(s, y, mask), 1.0);
}

TEST(AveragePrecision, RandomScoresMatchPositiveFraction) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<float> u(0, 1);
  // E[AP] exceeds the positive fraction by O(log T / T), so use a long video.
  const std::size_t T = 400;
  std::vector<std::uint8_t> y(T, 0);
  for (std::size_t j = 0; j < 120; ++j) y[j * 3] = 1;
  double total = 0;
  const int trials = 10000;
  std::vector<float> s(T);
  for (int i = 0; i < trials; ++i) {
    for (auto& v : s) v = u(rng);
    total += *average_precision(s, y, ones(T));
  }
  EXPECT_NEAR(total / trials, 0.3, 0.02);
}

TEST(AveragePrecision, InvariantUnderIncreasingTransform) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<float> s(30), t(30);
  std::vector<std::uint8_t> y(30);
  for (std::size_t j = 0; j < 30; ++j) {
    s[j] = u(rng);
    t[j] = std::exp(3 * s[j]) - 1;
    y[j] = (j % 4 == 0);
  }
  EXPECT_DOUBLE_EQ(*average_precision(s, y, ones(30)), *average_precision(t, y, ones(30)));
}

TEST(Nmsd, BestCase) {
  std::vector<float> s{0.9f, 0.8f, 0.1f, 0.1f, 0.1f, 0.1f, 0.1f, 0.1f, 0.7f, 0.6f};
  std::vector<std::uint8_t> y{1, 1, 0, 0, 0, 0, 0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(*nmsd(s, y, ones(10)), 0.0);
}

TEST(Nmsd, GroundTruthRankedLast) {
  std::vector<float> s{1.0f, 0.9f, 0.8f, 0.7f, 0.6f, 0.5f, 0.4f, 0.3f, 0.2f, 0.1f};
  std::vector<std::uint8_t> y{0, 0, 0, 0, 0, 0, 1, 1, 1, 1};
  EXPECT_EQ(*nmsd(s, y, ones(10)), 0.75);
}

TEST(Nmsd, AllFramesGroundTruth) {
  std::vector<float> s{0.3f, 0.1f, 0.8f, 0.5f, 0.2f};
  EXPECT_DOUBLE_EQ(*nmsd(std::span(s).first(4), ones(4), ones(4)), 0.0);
  EXPECT_DOUBLE_EQ(*nmsd(s, ones(5), ones(5)), 0.0);
}

TEST(Nmsd, PerfectRankingWithOddPositives) {
  const std::vector<float> s{0.9f, 0.8f, 0.7f, 0.2f, 0.1f, 0.05f};
  const std::vector<std::uint8_t> y{1, 1, 1, 0, 0, 0};
  EXPECT_DOUBLE_EQ(*nmsd(s, y, ones(6)), 0.0);
}

TEST(Nmsd, NonIncreasingAsPositivesMoveUp) {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<float> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> s(20);
    std::vector<std::uint8_t> y(20);
    for (std::size_t j = 0; j < 20; ++j) {
      s[j] = u(rng);
      y[j] = u(rng) < 0.3;
    }
    y[0] = 1;
    const double before = *nmsd(s, y, ones(20));
    // Swap scores of a positive and a higher-index negative so the positive ranks higher.
    std::size_t p = 20, n = 20;
    for (std::size_t j = 0; j < 20; ++j) {
      if (y[j] && p == 20) p = j;
    }
    for (std::size_t j = 0; j < 20; ++j) {
      if (!y[j] && s[j] > s[p]) n = j;
    }
    if (n == 20) continue;
    std::swap(s[p], s[n]);
    EXPECT_LE(*nmsd(s, y, ones(20)), before + 1e-12);
  }
}

TEST(FScore, Examples) {
  const std::vector<std::uint8_t> a{1, 1, 0, 0};
  const std::vector<std::uint8_t> b{0, 0, 1, 1};
  const std::vector<std::uint8_t> none{0, 0, 0, 0};
  EXPECT_DOUBLE_EQ(f_score(a, a), 1.0);
  EXPECT_DOUBLE_EQ(f_score(a, b), 0.0);
  EXPECT_DOUBLE_EQ(f_score(none, none), 1.0);
  EXPECT_DOUBLE_EQ(f_score(none, a), 0.0);
  const std::vector<std::uint8_t> half{1, 0, 0, 0};
  EXPECT_NEAR(f_score(half, a), 2.0 / 3.0, 1e-12);
}

TEST(Binarize, ThresholdAndBudget) {
  const std::vector<float> s{0.9f, 0.4f, 0.6f, 0.5f, 0.1f, 0.2f, 0.3f, 0.35f, 0.45f, 0.55f,
                             0.05f, 0.15f, 0.25f, 0.65f, 0.7f, 0.75f, 0.8f, 0.85f, 0.95f, 0.0f};
  const auto mask = ones(s.size());
  const auto thr = binarize(s, mask, Binarize::kThreshold, 0.5);
  EXPECT_EQ(thr[3], 0);  // s == zeta is not selected
  EXPECT_EQ(thr[2], 1);
  const auto top = binarize(s, mask, Binarize::kTopBudget, 0.5, 0.15);
  std::size_t n = 0;
  for (auto v : top) n += v;
  EXPECT_EQ(n, 3u);
  EXPECT_EQ(top[18], 1);
  EXPECT_EQ(top[0], 1);
  EXPECT_EQ(top[17], 1);
}

TEST(Evaluate, ExcludesUsersWithoutPositives) {
  std::vector<ScoreTrack> tracks{{"a", {0.9f, 0.1f}, {1, 1}, false}, {"b", {0.2f, 0.3f}, {1, 1}, false}};
  std::vector<LabelTrack> labels{{{1, 0}, {1, 1}}, {{0, 0}, {1, 1}}};
  const auto r = evaluate(tracks, labels);
  ASSERT_EQ(r.per_user.size(), 1u);
  EXPECT_EQ(r.excluded, std::vector<std::string>{"b"});
  EXPECT_DOUBLE_EQ(r.map, 1.0);
  std::ostringstream os;
  write_report_jsonl(os, r);
  EXPECT_NE(os.str().find("\"map\":1.0"), std::string::npos);
}

TEST(Evaluate, MapIsArithmeticMean) {
  std::vector<ScoreTrack> tracks{{"a", {0.9f, 0.8f, 0.3f}, {1, 1, 1}, false}, {"b", {0.1f, 0.9f}, {1, 1}, false}};
  std::vector<LabelTrack> labels{{{1, 0, 1}, {1, 1, 1}}, {{0, 1}, {1, 1}}};
  const auto r = evaluate(tracks, labels);
  EXPECT_NEAR(r.map, (0.8333333333 + 1.0) / 2, 1e-6);
  for (const auto& u : r.per_user) {
    EXPECT_GE(u.ap, 0.0);
    EXPECT_LE(u.ap, 1.0);
    EXPECT_GE(u.nmsd, 0.0);
    EXPECT_LE(u.nmsd, 1.0);
  }
}
