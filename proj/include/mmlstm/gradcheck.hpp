#pragma once

// Finite-difference checks of every backward pass, in double precision.
// Each check draws random shapes and values from its seed, builds a scalar
// objective, and compares the analytic gradient of all parameters (and
// inputs, where the layer returns them) against central differences.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mmlstm/layers.hpp"
#include "mmlstm/loss.hpp"
#include "mmlstm/model.hpp"
#include "mmlstm/numerics.hpp"

namespace mmlstm::gradcheck {

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-5;

// Objectives are evaluated in extended precision. In double, the central
// difference of an O(10) loss carries ~1e-10 of roundoff, which swamps
// coordinates whose true gradient is that small. Parameters stay exactly
// representable in double so both sides see the same point.
using Wide = long double;

namespace detail {

inline Matrix<Wide> random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double range = 1.0) {
  Matrix<double> m(r, c);
  init_uniform(m, rng, range);
  return m.cast<Wide>();
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline Wide dot(const Matrix<Wide>& a, const Matrix<Wide>& b) {
  Wide s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.values()[i] * b.values()[i];
  return s;
}

// Packs a list of matrices into one 1 x n row and back.
struct Packer {
  std::vector<Matrix<Wide>*> parts;

  Matrix<double> pack() const {
    std::vector<double> v;
    for (auto* p : parts)
      for (Wide x : p->values()) v.push_back(static_cast<double>(x));
    const std::size_t n = v.size();
    return Matrix<double>(1, n, std::move(v));
  }
  void unpack(const Matrix<double>& flat) {
    std::size_t i = 0;
    for (auto* p : parts)
      for (auto& x : p->values()) x = flat.values()[i++];
  }
};

inline Matrix<double> concat_flat(std::initializer_list<const Matrix<Wide>*> parts) {
  std::vector<double> v;
  for (auto* p : parts)
    for (Wide x : p->values()) v.push_back(static_cast<double>(x));
  const std::size_t n = v.size();
  return Matrix<double>(1, n, std::move(v));
}

}  // namespace detail

/// Affine layer: parameters and input, objective sum(r .* y).
inline GradCheckReport check_affine(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t in = detail::pick(rng, 1, 6), out = detail::pick(rng, 1, 6), rows = detail::pick(rng, 1, 4);
  AffineLayer<Wide> layer(in, out);
  layer.weight = detail::random_matrix(rng, out, in);
  layer.bias = detail::random_matrix(rng, 1, out);
  Matrix<Wide> x = detail::random_matrix(rng, rows, in);
  const Matrix<Wide> r = detail::random_matrix(rng, rows, out);

  AffineLayer<Wide> grad(in, out);
  const Matrix<Wide> dx = affine_backward(layer, x, r, grad);
  detail::Packer pk{{&layer.weight, &layer.bias, &x}};
  const Matrix<double> analytic = detail::concat_flat({&grad.weight, &grad.bias, &dx});
  return finite_difference_check(
      [&](const Matrix<double>& theta) {
        pk.unpack(theta);
        return detail::dot(affine_forward(layer, x), r);
      },
      pk.pack(), analytic, kStep, kTolerance);
}

/// FC-Pool over a K x H stack.
inline GradCheckReport check_fc_pool(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t k = detail::pick(rng, 1, 4), h = detail::pick(rng, 1, 5);
  AffineLayer<Wide> layer(k * h, h);
  layer.weight = detail::random_matrix(rng, h, k * h);
  layer.bias = detail::random_matrix(rng, 1, h);
  Matrix<Wide> stacked = detail::random_matrix(rng, k, h);
  const Matrix<Wide> r = detail::random_matrix(rng, 1, h);

  AffineLayer<Wide> grad(k * h, h);
  const Matrix<Wide> flat(1, k * h, std::vector<Wide>(stacked.values().begin(), stacked.values().end()));
  const Matrix<Wide> dflat = affine_backward(layer, flat, r, grad);
  detail::Packer pk{{&layer.weight, &layer.bias, &stacked}};
  const Matrix<double> analytic = detail::concat_flat({&grad.weight, &grad.bias, &dflat});
  return finite_difference_check(
      [&](const Matrix<double>& theta) {
        pk.unpack(theta);
        return detail::dot(fc_pool_forward(layer, stacked), r);
      },
      pk.pack(), analytic, kStep, kTolerance);
}

inline LSTMCell<Wide> random_cell(std::mt19937_64& rng, std::size_t in, std::size_t h) {
  LSTMCell<Wide> cell(in, h);
  cell.w_input = detail::random_matrix(rng, 4 * h, in, 0.8);
  cell.w_hidden = detail::random_matrix(rng, 4 * h, h, 0.8);
  cell.bias = detail::random_matrix(rng, 1, 4 * h, 0.5);
  return cell;
}

/// LSTM unrolled over `steps` steps (steps = 1 is the single-step case) from
/// a random initial state, batch of 1-3 sequences.
inline GradCheckReport check_lstm(std::uint64_t seed, std::size_t steps = 3) {
  std::mt19937_64 rng(seed);
  const std::size_t in = detail::pick(rng, 1, 5), h = detail::pick(rng, 1, 5), batch = detail::pick(rng, 1, 3);
  LSTMCell<Wide> cell = random_cell(rng, in, h);
  Matrix<Wide> x = detail::random_matrix(rng, steps * batch, in);
  const LSTMState<Wide> init{detail::random_matrix(rng, batch, h, 0.5), detail::random_matrix(rng, batch, h, 0.5)};
  const Matrix<Wide> r = detail::random_matrix(rng, steps * batch, h);

  const auto tr = lstm_forward(cell, x, batch, &init);
  LSTMCell<Wide> grad(in, h);
  const Matrix<Wide> dx = lstm_backward(cell, x, tr, r, grad);
  detail::Packer pk{{&cell.w_input, &cell.w_hidden, &cell.bias, &x}};
  const Matrix<double> analytic = detail::concat_flat({&grad.w_input, &grad.w_hidden, &grad.bias, &dx});
  return finite_difference_check(
      [&](const Matrix<double>& theta) {
        pk.unpack(theta);
        return detail::dot(lstm_forward(cell, x, batch, &init).hidden, r);
      },
      pk.pack(), analytic, kStep, kTolerance);
}

/// Softmax backward against differences of sum(r .* softmax(z)).
inline GradCheckReport check_softmax(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t rows = detail::pick(rng, 1, 4), n = detail::pick(rng, 1, 7);
  const Matrix<Wide> z = detail::random_matrix(rng, rows, n, 3.0);
  const Matrix<Wide> r = detail::random_matrix(rng, rows, n);
  const Matrix<Wide> analytic = softmax_backward(softmax_rows(z), r);
  return finite_difference_check(
      [&](const Matrix<double>& zz) { return detail::dot(softmax_rows(zz.cast<Wide>()), r); }, z.cast<double>(),
      analytic.cast<double>(), kStep, kTolerance);
}

inline LossConfig random_loss_config(std::mt19937_64& rng, std::size_t classes, double duration) {
  LossConfig cfg;
  cfg.num_classes = classes;
  switch (detail::pick(rng, 0, 2)) {
    case 0: cfg.weighting = WeightingFn::sigmoid(3.0, 6.0, duration); break;
    case 1: cfg.weighting = WeightingFn::linear(duration); break;
    default: cfg.weighting = WeightingFn::uniform(duration); break;
  }
  return cfg;
}

/// The weighted loss with respect to the (unnormalized) predictions.
inline GradCheckReport check_loss(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t frames = detail::pick(rng, 1, 6), classes = detail::pick(rng, 2, 6);
  const LossConfig cfg = random_loss_config(rng, classes, static_cast<double>(frames));
  const std::vector<double> times = frame_times(frames, 1.0);
  Matrix<double> p(frames, classes);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (double& v : p.values()) v = u(rng);
  const std::size_t label = detail::pick(rng, 0, classes - 1);
  const Matrix<Wide> analytic = mmlstm::detail::weighted_log_loss(p.cast<Wide>(), label, cfg, times).gradient;
  return finite_difference_check(
      [&](const Matrix<double>& q) {
        return mmlstm::detail::weighted_log_loss(q.cast<Wide>(), label, cfg, times).value;
      },
      p, analytic.cast<double>(), kStep, kTolerance);
}

inline ModelConfig tiny_config(std::mt19937_64& rng, std::size_t modalities, std::size_t hidden,
                               std::size_t steps, std::size_t classes) {
  ModelConfig cfg;
  for (std::size_t m = 0; m < modalities; ++m) cfg.modality_dims.push_back(detail::pick(rng, 1, 3));
  cfg.hidden = hidden;
  cfg.num_classes = classes;
  cfg.fps = 1.0;
  cfg.loss = random_loss_config(rng, classes, static_cast<double>(steps));
  return cfg;
}

template <class M>
GradCheckReport check_model_instance(M model, std::mt19937_64& rng, std::size_t steps, std::size_t batch_size) {
  std::vector<ModelInputs<Wide>> seqs(batch_size);
  std::vector<std::size_t> labels;
  for (auto& s : seqs) {
    for (auto d : model.config.modality_dims) s.push_back(detail::random_matrix(rng, steps, d));
    labels.push_back(detail::pick(rng, 0, model.config.num_classes - 1));
  }
  std::vector<const ModelInputs<Wide>*> ptrs;
  for (auto& s : seqs) ptrs.push_back(&s);
  const SequenceBatch<Wide> batch = make_batch<Wide>(ptrs, labels);

  const std::vector<double> p0 = flatten_params(model);
  assign_params(model, p0);
  const auto g = loss_and_gradient(model, batch);
  const std::vector<double> a = flatten_params(g.grad);
  const Matrix<double> analytic(1, a.size(), a);
  return finite_difference_check(
      [&](const Matrix<double>& theta) {
        assign_params(model, theta.values());
        return stagewise_loss(model, batch);
      },
      Matrix<double>(1, p0.size(), p0), analytic, kStep, kTolerance);
}

/// End-to-end stage-wise loss of a tiny model (M=2, H=4, T=3, N_c=2 for the
/// MM-LSTM) with respect to every parameter.
inline GradCheckReport check_model(ModelKind kind, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t steps = 3;
  ModelConfig cfg = tiny_config(rng, 2, 4, steps, 2);
  cfg.loss.intermediate_loss_weight = std::uniform_real_distribution<double>(0.25, 1.5)(rng);
  if (kind == ModelKind::ms_lstm_two_stage) cfg.stage_groups = {{0}, {1}};
  AnyModel<Wide> model = build_model<Wide>(kind, cfg, rng());
  // Spread the parameters beyond the default init so gates are not all near 0.5.
  std::visit([&](auto& m) { m.for_each_param([&](const std::string&, Matrix<Wide>& p) {
                 for (Wide& v : p.values()) v += std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
               }); },
             model);
  return std::visit([&](auto& m) { return check_model_instance(m, rng, steps, 2); }, model);
}

struct SuiteEntry {
  std::string name;
  std::size_t runs = 0;
  GradCheckReport worst;
};

/// Runs every check over `seeds` seeds and keeps the worst report per check.
inline std::vector<SuiteEntry> run_suite(std::size_t seeds, std::uint64_t base_seed = 1) {
  const std::vector<std::pair<std::string, std::function<GradCheckReport(std::uint64_t)>>> checks = {
      {"affine", check_affine},
      {"fc_pool", check_fc_pool},
      {"lstm_step", [](std::uint64_t s) { return check_lstm(s, 1); }},
      {"lstm_bptt_T3", [](std::uint64_t s) { return check_lstm(s, 3); }},
      {"softmax", check_softmax},
      {"anticipation_loss", check_loss},
      {"mm_lstm", [](std::uint64_t s) { return check_model(ModelKind::mm_lstm, s); }},
      {"single_stream", [](std::uint64_t s) { return check_model(ModelKind::single_stream, s); }},
      {"ms_lstm_two_stage", [](std::uint64_t s) { return check_model(ModelKind::ms_lstm_two_stage, s); }},
  };
  std::vector<SuiteEntry> out;
  for (const auto& [name, fn] : checks) {
    SuiteEntry e{name, 0, {}};
    for (std::size_t i = 0; i < seeds; ++i) {
      GradCheckReport r = fn(base_seed + i);
      ++e.runs;
      if (!r.passed || r.max_relative_error > e.worst.max_relative_error) {
        const bool keep_failed = !e.worst.passed;
        if (!keep_failed) e.worst = r;
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace mmlstm::gradcheck
