#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "mmlstm/gradcheck.hpp"
#include "mmlstm/loss.hpp"

using mmlstm::LossConfig;
using mmlstm::Matrix;
using mmlstm::WeightingFn;

namespace {

constexpr double kLn2 = 0.69314718055994530942;

LossConfig two_class(WeightingFn w) {
  LossConfig cfg;
  cfg.num_classes = 2;
  cfg.weighting = w;
  return cfg;
}

// Random distributions away from the clip boundaries.
Matrix<double> random_simplex_rows(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::uniform_real_distribution<double> u(0.2, 1.0);
  Matrix<double> p(rows, cols);
  for (std::size_t t = 0; t < rows; ++t) {
    double sum = 0;
    for (double& v : p.row(t)) sum += (v = u(rng));
    for (double& v : p.row(t)) v /= sum;
  }
  return p;
}

TEST(Weighting, SigmoidMidpointIsExactlyHalf) {
  EXPECT_EQ(mmlstm::weight_at(WeightingFn::sigmoid(3, 6, 5), 2.0), 0.5);
}

TEST(Weighting, SigmoidAtZero) {
  EXPECT_NEAR(mmlstm::weight_at(WeightingFn::sigmoid(3, 6, 5), 0.0), 0.0024726231566347748, 1e-12);
}

TEST(Weighting, LinearReachesOneAtEnd) {
  EXPECT_EQ(mmlstm::weight_at(WeightingFn::linear(5), 5.0), 1.0);
  EXPECT_EQ(mmlstm::weight_at(WeightingFn::linear(5), 0.0), 0.0);
}

TEST(Weighting, OutOfRangeTimeThrows) {
  EXPECT_THROW(mmlstm::weight_at(WeightingFn::linear(5), -0.1), std::out_of_range);
  EXPECT_THROW(mmlstm::weight_at(WeightingFn::sigmoid(3, 6, 5), 5.5), std::out_of_range);
}

TEST(Weighting, SigmoidIsSymmetricAboutMidpoint) {
  const auto w = WeightingFn::sigmoid(3, 6, 5);
  for (double d = 0; d <= 2.0; d += 0.01)
    EXPECT_NEAR(mmlstm::weight_at(w, 2.0 - d) + mmlstm::weight_at(w, 2.0 + d), 1.0, 1e-12) << "d=" << d;
}

TEST(Weighting, MonotoneOnDenseGrid) {
  for (const auto& w : {WeightingFn::sigmoid(3, 6, 5), WeightingFn::linear(5), WeightingFn::uniform(5)}) {
    double prev = mmlstm::weight_at(w, 0.0);
    for (int i = 1; i <= 5000; ++i) {
      const double cur = mmlstm::weight_at(w, i * 1e-3);
      ASSERT_GE(cur, prev) << mmlstm::to_string(w.kind) << " at " << i * 1e-3;
      if (w.kind == mmlstm::WeightingKind::sigmoid) ASSERT_GT(cur, prev);
      prev = cur;
    }
  }
}

TEST(Weighting, NamesRoundTrip) {
  for (auto k : {mmlstm::WeightingKind::linear, mmlstm::WeightingKind::sigmoid, mmlstm::WeightingKind::uniform})
    EXPECT_EQ(mmlstm::weighting_from_string(mmlstm::to_string(k)), k);
  EXPECT_THROW(mmlstm::weighting_from_string("cosine"), std::invalid_argument);
}

TEST(FrameTimes, LastFrameSitsAtClipDuration) {
  const auto t = mmlstm::frame_times(150, 30.0);
  EXPECT_DOUBLE_EQ(t.front(), 1.0 / 30.0);
  EXPECT_DOUBLE_EQ(t.back(), 5.0);
}

TEST(AnticipationLoss, UniformPredictionAtEndUnderLinearWeight) {
  const auto cfg = two_class(WeightingFn::linear(5));
  const std::vector<double> t{5.0};
  const auto r = mmlstm::anticipation_loss(Matrix<double>::row_vector({0.5, 0.5}), 0, cfg, t);
  EXPECT_NEAR(r.value, 2 * kLn2, 1e-15);
  EXPECT_NEAR(r.value, 1.3862943611198906, 1e-15);
}

TEST(AnticipationLoss, UniformPredictionAtStartUnderSigmoidWeight) {
  const auto cfg = two_class(WeightingFn::sigmoid(3, 6, 5));
  const std::vector<double> t{0.0};
  const auto r = mmlstm::anticipation_loss(Matrix<double>::row_vector({0.5, 0.5}), 0, cfg, t);
  EXPECT_NEAR(r.value, 0.694861072329554, 1e-14);
}

TEST(AnticipationLoss, PerfectPredictionIsNearZero) {
  LossConfig cfg;
  cfg.num_classes = 4;
  const std::size_t frames = 30;
  Matrix<double> p(frames, 4);
  for (std::size_t t = 0; t < frames; ++t) p(t, 2) = 1.0;
  const auto times = mmlstm::frame_times(frames, 6.0);
  const auto r = mmlstm::anticipation_loss(p, 2, cfg, times);
  EXPECT_LE(r.value, 4.0 * frames * std::abs(std::log1p(-cfg.clip_epsilon)) + 1e-12);
  EXPECT_LT(r.value, 1e-4);
}

TEST(AnticipationLoss, ClippedEntriesHaveZeroGradient) {
  const auto cfg = two_class(WeightingFn::linear(1));
  const std::vector<double> t{1.0};
  const auto r = mmlstm::anticipation_loss(Matrix<double>::row_vector({1.0, 0.0}), 0, cfg, t);
  EXPECT_EQ(r.gradient(0, 0), 0.0);
  EXPECT_EQ(r.gradient(0, 1), 0.0);
}

TEST(AnticipationLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const auto rep = mmlstm::gradcheck::check_loss(seed);
    EXPECT_LT(rep.max_relative_error, 1e-6) << "seed " << seed;
  }
}

TEST(AnticipationLoss, MovingTowardOneHotDecreasesLoss) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t frames = 1 + trial % 7, classes = 2 + trial % 5;
    LossConfig cfg;
    cfg.num_classes = classes;
    cfg.weighting = trial % 2 ? WeightingFn::linear(frames) : WeightingFn::sigmoid(3, 6, frames);
    const auto times = mmlstm::frame_times(frames, 1.0);
    const auto p = random_simplex_rows(rng, frames, classes);
    const std::size_t label = trial % classes;
    Matrix<double> q = p;
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t c = 0; c < classes; ++c) q(t, c) = 0.9 * p(t, c) + 0.1 * (c == label ? 1.0 : 0.0);
    EXPECT_LT(mmlstm::anticipation_loss(q, label, cfg, times).value,
              mmlstm::anticipation_loss(p, label, cfg, times).value);
  }
}

TEST(AnticipationLoss, LateFalseConfidenceCostsMore) {
  const auto cfg = two_class(WeightingFn::sigmoid(3, 6, 5));
  const auto p = Matrix<double>::row_vector({0.3, 0.7});
  for (double early = 0.0; early < 4.9; early += 0.5) {
    const std::vector<double> a{early}, b{early + 0.1};
    EXPECT_GT(mmlstm::anticipation_loss(p, 0, cfg, b).value, mmlstm::anticipation_loss(p, 0, cfg, a).value);
  }
}

TEST(AnticipationLoss, RejectsMalformedInput) {
  const auto cfg = two_class(WeightingFn::linear(1));
  const std::vector<double> t{1.0};
  EXPECT_THROW(mmlstm::anticipation_loss(Matrix<double>::row_vector({0.5, 0.6}), 0, cfg, t), std::invalid_argument);
  EXPECT_THROW(mmlstm::anticipation_loss(Matrix<double>::row_vector({1.5, -0.5}), 0, cfg, t), std::invalid_argument);
  EXPECT_THROW(mmlstm::anticipation_loss(Matrix<double>::row_vector({0.5, 0.5}), 2, cfg, t), std::out_of_range);
  EXPECT_THROW(mmlstm::anticipation_loss(Matrix<double>::row_vector({0.2, 0.3, 0.5}), 0, cfg, t), mmlstm::ShapeError);
  const std::vector<double> two{0.5, 1.0};
  EXPECT_THROW(mmlstm::anticipation_loss(Matrix<double>::row_vector({0.5, 0.5}), 0, cfg, two), mmlstm::ShapeError);
}

TEST(LossConfig, RejectsBadEpsilon) {
  LossConfig cfg;
  cfg.clip_epsilon = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.clip_epsilon = 0.02;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.clip_epsilon = 0.01;
  EXPECT_NO_THROW(cfg.validate());
}

TEST(StagewiseTotal, Examples) {
  LossConfig cfg;
  cfg.intermediate_loss_weight = 0.0;
  EXPECT_EQ(mmlstm::stagewise_total(2.0, 7.0, cfg), 2.0);
  cfg.intermediate_loss_weight = 1.0;
  EXPECT_EQ(mmlstm::stagewise_total(1.0, 0.5, cfg), 1.5);
  cfg.intermediate_loss_weight = -1.0;
  EXPECT_THROW(mmlstm::stagewise_total(1.0, 0.5, cfg), std::invalid_argument);
}

TEST(StagewiseTotal, RejectsNonFiniteParts) {
  LossConfig cfg;
  EXPECT_THROW(mmlstm::stagewise_total(std::nan(""), 0.5, cfg), std::invalid_argument);
  EXPECT_THROW(mmlstm::stagewise_total(1.0, INFINITY, cfg), std::invalid_argument);
}

}  // namespace
