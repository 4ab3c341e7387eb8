#pragma once

// Vehicle-dynamics descriptors: (value, velocity, acceleration) triples of a
// scalar sensor signal and a small LSTM that embeds them per frame.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <vector>

#include "mmlstm/model.hpp"

namespace mmlstm {

/// T x 3 rows of (s_t, s_t - s_{t-d}, s_t - 2 s_{t-d} + s_{t-2d}), with
/// s_{<0} taken as s_0.
template <std::floating_point S = float, class In>
Matrix<S> dynamics_triples(std::span<const In> signal, std::size_t delta = 1) {
  if (signal.empty()) throw std::invalid_argument("dynamics_triples: empty signal");
  if (delta == 0) throw std::invalid_argument("dynamics_triples: delta must be at least 1");
  auto at = [&](std::size_t t, std::size_t back) -> S {
    return static_cast<S>(signal[t >= back ? t - back : 0]);
  };
  Matrix<S> out(signal.size(), 3);
  for (std::size_t t = 0; t < signal.size(); ++t) {
    const S s0 = at(t, 0), s1 = at(t, delta), s2 = at(t, 2 * delta);
    out(t, 0) = s0;
    out(t, 1) = s0 - s1;
    out(t, 2) = s0 - 2 * s1 + s2;
  }
  return out;
}

template <std::floating_point S = float, class In>
Matrix<S> dynamics_triples(const std::vector<In>& signal, std::size_t delta = 1) {
  return dynamics_triples<S>(std::span<const In>(signal), delta);
}

struct EmbedderOptions {
  std::size_t hidden = 64;
  std::size_t num_classes = 6;
  std::size_t epochs = 10;
  double learning_rate = 0.05;
  std::size_t batch_size = 16;
  double fps = 30.0;
  WeightingFn weighting = WeightingFn::sigmoid(3.0, 6.0, 5.0);
  std::uint64_t seed = 0;
};

/// LSTM over standardized dynamics triples plus the classifier head used to
/// train it. Inputs are shifted and scaled per column before the LSTM.
class DynamicsEmbedder {
 public:
  using Scalar = float;

  SingleStreamModel<float> net;
  Matrix<float> mean = Matrix<float>(1, 3);
  Matrix<float> scale = Matrix<float>::row_vector({1.0f, 1.0f, 1.0f});

  DynamicsEmbedder() = default;
  explicit DynamicsEmbedder(SingleStreamModel<float> model) : net(std::move(model)) {}

  std::size_t hidden() const noexcept { return net.config.hidden; }

  template <class F>
  void for_each_param(F&& f) {
    f(std::string("standardize.mean"), mean);
    f(std::string("standardize.scale"), scale);
    net.for_each_param(f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    const_cast<DynamicsEmbedder*>(this)->for_each_param(
        [&](const std::string& n, Matrix<float>& m) { f(n, static_cast<const Matrix<float>&>(m)); });
  }

  Matrix<float> standardize(const Matrix<float>& triples) const {
    if (triples.cols() != 3) throw ShapeError("embedder expects T x 3 triples, got " + shape_str(triples));
    Matrix<float> x = triples;
    for (std::size_t t = 0; t < x.rows(); ++t)
      for (std::size_t j = 0; j < 3; ++j) x(t, j) = (x(t, j) - mean(0, j)) / scale(0, j);
    return x;
  }
};

inline ModelConfig embedder_model_config(const EmbedderOptions& opt) {
  ModelConfig cfg;
  cfg.modality_dims = {3};
  cfg.hidden = opt.hidden;
  cfg.num_classes = opt.num_classes;
  cfg.fps = opt.fps;
  cfg.loss.num_classes = opt.num_classes;
  cfg.loss.weighting = opt.weighting;
  return cfg;
}

/// Untrained embedder with identity standardization.
inline DynamicsEmbedder initialized_embedder(const EmbedderOptions& opt) {
  return DynamicsEmbedder(SingleStreamModel<float>::initialized(embedder_model_config(opt), opt.seed));
}

/// Per-frame hidden states of the embedder's LSTM (classifier not applied).
inline Matrix<float> embed(const DynamicsEmbedder& e, const Matrix<float>& triples) {
  return lstm_forward(e.net.lstm, e.standardize(triples), 1).hidden;
}

struct EmbedderTraining {
  DynamicsEmbedder embedder;
  std::vector<double> epoch_loss;  // mean batch loss of each epoch
};

/// Trains on (triples, label) pairs with the anticipation loss. Inputs must all
/// have the same length. Standardization statistics come from the data.
inline EmbedderTraining train_embedder(std::span<const Matrix<float>> triples, std::span<const std::size_t> labels,
                                       const EmbedderOptions& opt, std::ostream* warnings = &std::cerr) {
  if (triples.empty()) throw std::invalid_argument("train_embedder: no sequences");
  if (triples.size() != labels.size()) throw std::invalid_argument("train_embedder: label count mismatch");
  for (auto l : labels)
    if (l >= opt.num_classes) throw std::out_of_range("train_embedder: label out of range");
  if (warnings && std::set<std::size_t>(labels.begin(), labels.end()).size() < 2)
    *warnings << "warning: embedder training data holds a single class\n";

  EmbedderTraining out{initialized_embedder(opt), {}};
  DynamicsEmbedder& e = out.embedder;
  double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
  std::size_t n = 0;
  for (const auto& x : triples) {
    if (x.cols() != 3) throw ShapeError("train_embedder: triples must be T x 3, got " + shape_str(x));
    for (std::size_t t = 0; t < x.rows(); ++t, ++n)
      for (std::size_t j = 0; j < 3; ++j) sum[j] += x(t, j), sq[j] += double(x(t, j)) * x(t, j);
  }
  for (std::size_t j = 0; j < 3; ++j) {
    const double m = sum[j] / n;
    const double var = std::max(0.0, sq[j] / n - m * m);
    e.mean(0, j) = static_cast<float>(m);
    e.scale(0, j) = static_cast<float>(var > 1e-12 ? std::sqrt(var) : 1.0);
  }

  std::vector<ModelInputs<float>> data;
  data.reserve(triples.size());
  for (const auto& x : triples) data.push_back({e.standardize(x)});
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(opt.seed ^ 0x9E3779B97F4A7C15ull);  // shuffle stream, distinct from init
  const SGDOptions sgd{opt.learning_rate, 5.0};
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    out.epoch_loss.push_back(
        train_epoch(e.net, std::span<const ModelInputs<float>>(data), labels, order, opt.batch_size, sgd));
  }
  return out;
}

/// Fraction of sequences whose pooled prediction at the last frame is right.
inline double embedder_accuracy(const DynamicsEmbedder& e, std::span<const Matrix<float>> triples,
                                std::span<const std::size_t> labels) {
  if (triples.empty()) throw std::invalid_argument("embedder_accuracy: no sequences");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    const auto tl = predict_timeline(e.net, ModelInputs<float>{e.standardize(triples[i])});
    hits += tl.predicted_class_at.back() == labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(triples.size());
}

}  // namespace mmlstm
