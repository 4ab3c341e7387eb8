#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "mmlstm/gradcheck.hpp"
#include "mmlstm/model.hpp"

using mmlstm::Matrix;
using mmlstm::ModelConfig;
using mmlstm::ModelInputs;
using mmlstm::ModelKind;

namespace {

ModelConfig make_config(std::vector<std::size_t> dims, std::size_t hidden, std::size_t classes, double fps = 10) {
  ModelConfig cfg;
  cfg.modality_dims = std::move(dims);
  cfg.hidden = hidden;
  cfg.num_classes = classes;
  cfg.fps = fps;
  cfg.loss.num_classes = classes;
  cfg.loss.weighting = mmlstm::WeightingFn::sigmoid(3, 6, 5);
  return cfg;
}

template <class S>
ModelInputs<S> random_inputs(std::mt19937_64& rng, const ModelConfig& cfg, std::size_t steps) {
  ModelInputs<S> out;
  for (auto d : cfg.modality_dims) {
    Matrix<S> x(steps, d);
    mmlstm::init_uniform(x, rng, 1.0);
    out.push_back(std::move(x));
  }
  return out;
}

template <class S>
mmlstm::SequenceBatch<S> random_batch(std::mt19937_64& rng, const ModelConfig& cfg, std::size_t steps,
                                      std::size_t batch) {
  std::vector<ModelInputs<S>> seqs;
  std::vector<std::size_t> labels;
  for (std::size_t b = 0; b < batch; ++b) {
    seqs.push_back(random_inputs<S>(rng, cfg, steps));
    labels.push_back(b % cfg.num_classes);
  }
  std::vector<const ModelInputs<S>*> ptrs;
  for (auto& s : seqs) ptrs.push_back(&s);
  return mmlstm::make_batch<S>(ptrs, labels);
}

TEST(MMLSTM, PaperScaleShapes) {
  auto cfg = make_config({16, 16, 8, 8}, 1024, 6);
  const mmlstm::MMLSTMModel<float> model(cfg);
  std::mt19937_64 rng(1);
  const auto batch = random_batch<float>(rng, cfg, 1, 1);
  const auto pass = model.forward(batch, true);
  EXPECT_EQ(pass.stacked.cols(), 4u * 1024u);
  EXPECT_EQ(pass.skip.cols(), 5u * 1024u);
  EXPECT_EQ(pass.pooled.cols(), 1024u);
  EXPECT_EQ(pass.final_logits.rows(), 1u);
  EXPECT_EQ(pass.final_logits.cols(), 6u);
  EXPECT_EQ(model.fc_pool_2.weight.rows(), 1024u);
  EXPECT_EQ(model.fc_pool_2.weight.cols(), 5u * 1024u);
}

TEST(MMLSTM, SingleModalityIsWellFormed) {
  auto cfg = make_config({5}, 8, 3);
  const auto model = mmlstm::MMLSTMModel<double>::initialized(cfg, 2);
  std::mt19937_64 rng(2);
  const auto pass = model.forward(random_batch<double>(rng, cfg, 4, 2), true);
  EXPECT_EQ(pass.stacked.cols(), 8u);
  EXPECT_EQ(pass.skip.cols(), 16u);
  EXPECT_EQ(pass.final_logits.rows(), 8u);
}

TEST(MMLSTM, ZeroParametersGiveUniformPredictions) {
  auto cfg = make_config({3, 2}, 6, 4);
  const mmlstm::MMLSTMModel<double> model(cfg);
  std::mt19937_64 rng(3);
  const auto tl = mmlstm::predict_timeline(model, random_inputs<double>(rng, cfg, 7));
  for (double v : tl.per_frame.values()) EXPECT_DOUBLE_EQ(v, 0.25);
  for (double v : tl.pooled.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(MMLSTM, RejectsWrongModalityCount) {
  auto cfg = make_config({3, 2}, 4, 2);
  const mmlstm::MMLSTMModel<double> model(cfg);
  std::mt19937_64 rng(4);
  auto other = make_config({3}, 4, 2);
  EXPECT_THROW(model.forward(random_batch<double>(rng, other, 2, 1), false), mmlstm::ShapeError);
  EXPECT_THROW(model.forward_step({Matrix<double>(1, 3)}, model.initial_state()), mmlstm::ShapeError);
}

TEST(MMLSTM, RejectsEmptyModalityList) {
  EXPECT_THROW(mmlstm::MMLSTMModel<double>(make_config({}, 4, 2)), std::invalid_argument);
}

TEST(MMLSTM, StepwiseMatchesUnrolledForward) {
  auto cfg = make_config({3, 4, 2}, 5, 3);
  const auto model = mmlstm::MMLSTMModel<double>::initialized(cfg, 5);
  std::mt19937_64 rng(5);
  const std::size_t steps = 6, batch = 2;
  const auto b = random_batch<double>(rng, cfg, steps, batch);
  const auto pass = model.forward(b, true);
  auto state = model.initial_state(batch);
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<Matrix<double>> frame;
    for (const auto& m : b.modalities) frame.push_back(m.row_block(t * batch, batch));
    auto out = model.forward_step(frame, state);
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_NEAR(out.final_logits(r, c), pass.final_logits(t * batch + r, c), 1e-12);
        EXPECT_NEAR(out.intermediate_logits(r, c), pass.intermediate_logits(t * batch + r, c), 1e-12);
      }
    state = std::move(out.next);
  }
}

TEST(MMLSTM, FullModelGradientOnTinyConfig) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto rep = mmlstm::gradcheck::check_model(ModelKind::mm_lstm, seed);
    EXPECT_LT(rep.max_relative_error, 1e-5) << "seed " << seed << ": " << rep.diagnostic;
  }
}

TEST(Timeline, ConstantDistributionPoolsToItself) {
  Matrix<double> p(5, 3);
  for (std::size_t t = 0; t < 5; ++t) p.row(t)[0] = 0.2, p.row(t)[1] = 0.3, p.row(t)[2] = 0.5;
  const auto tl = mmlstm::PredictionTimeline::from_per_frame(p);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(tl.pooled.values()[i], p.values()[i], 1e-15);
  for (auto c : tl.predicted_class_at) EXPECT_EQ(c, 2u);
}

TEST(Timeline, TieAfterTwoFramesPicksLowestClass) {
  const auto tl = mmlstm::PredictionTimeline::from_per_frame(Matrix<double>::from_rows({{0.8, 0.2}, {0.2, 0.8}}));
  EXPECT_EQ(tl.pooled(1, 0), 0.5);
  EXPECT_EQ(tl.pooled(1, 1), 0.5);
  EXPECT_EQ(tl.predicted_class_at[0], 0u);
  EXPECT_EQ(tl.predicted_class_at[1], 0u);
}

TEST(Timeline, PooledEqualsBruteForceMean) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 40, nc = 2 + trial % 5;
    Matrix<double> logits(n, nc);
    mmlstm::init_uniform(logits, rng, 4.0);
    const auto tl = mmlstm::PredictionTimeline::from_per_frame(mmlstm::softmax_rows(logits));
    for (std::size_t t = 0; t < n; ++t) {
      double row_sum = 0;
      for (std::size_t c = 0; c < nc; ++c) {
        double s = 0;
        for (std::size_t k = 0; k <= t; ++k) s += tl.per_frame(k, c);
        ASSERT_EQ(tl.pooled(t, c), s / static_cast<double>(t + 1));
        row_sum += tl.pooled(t, c);
      }
      ASSERT_NEAR(row_sum, 1.0, 1e-6);
    }
  }
}

// Exact in double. In float the gemm kernels round differently for different
// row counts, so prefixes agree only to ~1e-9.
template <class S>
void expect_prefix_property(double tolerance) {
  auto cfg = make_config({3, 2}, 6, 4);
  const auto model = mmlstm::MMLSTMModel<S>::initialized(cfg, 7);
  std::mt19937_64 rng(7);
  const auto full_in = random_inputs<S>(rng, cfg, 12);
  const auto full = mmlstm::predict_timeline(model, full_in);
  for (std::size_t t = 1; t <= 12; ++t) {
    ModelInputs<S> prefix;
    for (const auto& m : full_in) prefix.push_back(m.row_block(0, t));
    const auto part = mmlstm::predict_timeline(model, prefix);
    if (tolerance == 0) {
      EXPECT_EQ(part.per_frame, full.per_frame.row_block(0, t));
      EXPECT_EQ(part.pooled, full.pooled.row_block(0, t));
    } else {
      for (std::size_t i = 0; i < part.pooled.size(); ++i)
        EXPECT_NEAR(part.pooled.values()[i], full.pooled.values()[i], tolerance) << "t=" << t;
    }
  }
}

TEST(Timeline, PrefixOfSequenceGivesPrefixOfTimeline) {
  expect_prefix_property<double>(0.0);
  expect_prefix_property<float>(1e-6);
}

TEST(Training, ZeroLearningRateLeavesParametersUnchanged) {
  auto cfg = make_config({3, 2}, 6, 3);
  auto model = mmlstm::MMLSTMModel<float>::initialized(cfg, 8);
  const auto before = mmlstm::flatten_params(model);
  std::mt19937_64 rng(8);
  mmlstm::SGDOptions opt;
  opt.learning_rate = 0.0;
  const auto rep = mmlstm::training_step(model, random_batch<float>(rng, cfg, 5, 3), opt);
  EXPECT_TRUE(std::isfinite(rep.loss));
  EXPECT_EQ(mmlstm::flatten_params(model), before);
}

TEST(Training, OverfitsSingleSequence) {
  auto cfg = make_config({8, 8, 4, 4}, 16, 6, 30);
  cfg.loss.weighting = mmlstm::WeightingFn::sigmoid(3, 6, 1.0);
  auto model = mmlstm::MMLSTMModel<float>::initialized(cfg, 9);
  std::mt19937_64 rng(9);
  const auto batch = mmlstm::make_batch(random_inputs<float>(rng, cfg, 30), 4);
  mmlstm::SGDOptions opt;
  opt.learning_rate = 0.1;
  for (int step = 0; step < 200; ++step) mmlstm::training_step(model, batch, opt);
  EXPECT_LT(mmlstm::loss_and_gradient(model, batch).loss, 0.05);
}

TEST(Training, ClippingBoundsUpdateNorm) {
  auto cfg = make_config({3}, 4, 2);
  auto model = mmlstm::MMLSTMModel<double>::initialized(cfg, 10);
  std::mt19937_64 rng(10);
  const auto batch = random_batch<double>(rng, cfg, 6, 2);
  const auto before = mmlstm::flatten_params(model);
  mmlstm::SGDOptions opt;
  opt.learning_rate = 1.0;
  opt.clip_norm = 1e-3;
  mmlstm::training_step(model, batch, opt);
  const auto after = mmlstm::flatten_params(model);
  double sq = 0;
  for (std::size_t i = 0; i < after.size(); ++i) sq += (after[i] - before[i]) * (after[i] - before[i]);
  EXPECT_NEAR(std::sqrt(sq), 1e-3, 1e-9);
}

TEST(Training, NonFiniteInputIsRejectedWithoutUpdate) {
  auto cfg = make_config({3}, 4, 2);
  auto model = mmlstm::MMLSTMModel<double>::initialized(cfg, 11);
  std::mt19937_64 rng(11);
  auto batch = random_batch<double>(rng, cfg, 4, 1);
  batch.modalities[0](2, 1) = INFINITY;
  const auto before = mmlstm::flatten_params(model);
  EXPECT_THROW(mmlstm::training_step(model, batch, {}), mmlstm::NonFiniteLoss);
  EXPECT_EQ(mmlstm::flatten_params(model), before);
}

TEST(Training, FixedSeedIsDeterministic) {
  auto cfg = make_config({4, 3}, 8, 3);
  auto run = [&] {
    auto model = mmlstm::MMLSTMModel<float>::initialized(cfg, 12);
    std::mt19937_64 rng(12);
    mmlstm::SGDOptions opt;
    opt.learning_rate = 0.05;
    for (int k = 0; k < 10; ++k) mmlstm::training_step(model, random_batch<float>(rng, cfg, 5, 4), opt);
    return mmlstm::flatten_params(model);
  };
  EXPECT_EQ(run(), run());
}

TEST(Inference, IntermediateClassifierDoesNotAffectPredictions) {
  auto cfg = make_config({4, 3}, 8, 3);
  auto model = mmlstm::MMLSTMModel<float>::initialized(cfg, 13);
  std::mt19937_64 rng(13);
  const auto batch = random_batch<float>(rng, cfg, 9, 3);
  const auto before = mmlstm::predict_timelines(model, batch);
  mmlstm::init_uniform(model.intermediate_classifier.weight, rng, 50.0);
  mmlstm::init_uniform(model.intermediate_classifier.bias, rng, 50.0);
  const auto after = mmlstm::predict_timelines(model, batch);
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    EXPECT_EQ(before[i].per_frame, after[i].per_frame);
    EXPECT_EQ(before[i].pooled, after[i].pooled);
  }
}

TEST(Baselines, SingleStreamConcatenatesModalities) {
  auto cfg = make_config({4, 3, 2}, 5, 3);
  const auto model = mmlstm::SingleStreamModel<double>::initialized(cfg, 14);
  EXPECT_EQ(model.input_width(), 9u);
  EXPECT_EQ(model.lstm.input_size(), 9u);
}

TEST(Baselines, SingleStreamWithOneModalityIsPlainLstmClassifier) {
  auto cfg = make_config({4}, 5, 3);
  const auto model = mmlstm::SingleStreamModel<double>::initialized(cfg, 15);
  std::mt19937_64 rng(15);
  const auto batch = random_batch<double>(rng, cfg, 6, 2);
  const auto tr = mmlstm::lstm_forward(model.lstm, batch.modalities[0], 2);
  const auto expected = mmlstm::affine_forward(model.final_classifier, tr.hidden);
  EXPECT_EQ(model.forward(batch, false).final_logits, expected);
}

TEST(Baselines, TwoStageNeedsExactlyTwoGroups) {
  auto cfg = make_config({4, 3, 2}, 5, 3);
  cfg.stage_groups = {{0}, {1}, {2}};
  EXPECT_THROW(mmlstm::build_baseline<double>(ModelKind::ms_lstm_two_stage, cfg, 1), std::invalid_argument);
  cfg.stage_groups = {{0, 2}, {1}};
  auto model = mmlstm::build_baseline<double>(ModelKind::ms_lstm_two_stage, cfg, 1);
  const auto& two = std::get<mmlstm::TwoStageModel<double>>(model);
  EXPECT_EQ(two.stage1.input_size(), 6u);
  EXPECT_EQ(two.stage2.input_size(), 5u + 3u);
}

TEST(Baselines, BuildBaselineRejectsFusionModel) {
  EXPECT_THROW(mmlstm::build_baseline<double>(ModelKind::mm_lstm, make_config({2}, 3, 2), 1), std::invalid_argument);
}

TEST(Baselines, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    EXPECT_TRUE(mmlstm::gradcheck::check_model(ModelKind::single_stream, seed).passed) << seed;
    EXPECT_TRUE(mmlstm::gradcheck::check_model(ModelKind::ms_lstm_two_stage, seed).passed) << seed;
  }
}

TEST(Baselines, KindNamesRoundTrip) {
  for (auto k : {ModelKind::mm_lstm, ModelKind::single_stream, ModelKind::ms_lstm_two_stage})
    EXPECT_EQ(mmlstm::model_kind_from_string(mmlstm::to_string(k)), k);
  EXPECT_THROW(mmlstm::model_kind_from_string("gru"), std::invalid_argument);
}

// Only modality `signal` carries the label; the others are pure noise.
double block_norm(const mmlstm::MMLSTMModel<float>& model, std::size_t m) {
  const std::size_t h = model.config.hidden;
  double sq = 0;
  for (std::size_t r = 0; r < model.fc_pool_1.weight.rows(); ++r)
    for (std::size_t c = m * h; c < (m + 1) * h; ++c) sq += double(model.fc_pool_1.weight(r, c)) * model.fc_pool_1.weight(r, c);
  return std::sqrt(sq);
}

TEST(MMLSTM, LearnsWhichModalityCarriesTheLabel) {
  const std::size_t modalities = 3, dim = 4, classes = 3, steps = 8, hidden = 8;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const std::size_t signal = seed % modalities;
    auto cfg = make_config(std::vector<std::size_t>(modalities, dim), hidden, classes, 2.0);
    cfg.loss.weighting = mmlstm::WeightingFn::sigmoid(3, 6, 4.0);
    auto model = mmlstm::MMLSTMModel<float>::initialized(cfg, seed);
    std::mt19937_64 rng(seed * 101);
    std::normal_distribution<float> noise(0.0f, 1.0f);
    mmlstm::SGDOptions opt;
    opt.learning_rate = 0.1;
    for (int step = 0; step < 300; ++step) {
      std::vector<ModelInputs<float>> seqs(16);
      std::vector<std::size_t> labels;
      for (auto& s : seqs) {
        const std::size_t label = labels.size() % classes;
        labels.push_back(label);
        for (std::size_t m = 0; m < modalities; ++m) {
          Matrix<float> x(steps, dim);
          for (float& v : x.values()) v = noise(rng);
          if (m == signal)
            for (std::size_t t = 0; t < steps; ++t) x(t, label) += 2.0f;
          s.push_back(std::move(x));
        }
      }
      std::vector<const ModelInputs<float>*> ptrs;
      for (auto& s : seqs) ptrs.push_back(&s);
      mmlstm::training_step(model, mmlstm::make_batch<float>(ptrs, labels), opt);
    }
    const double own = block_norm(model, signal);
    for (std::size_t m = 0; m < modalities; ++m)
      if (m != signal) EXPECT_GT(own, block_norm(model, m)) << "seed " << seed << " modality " << m;
  }
}

}  // namespace
