#pragma once

// The multi-modal LSTM, the two baseline configurations, and the generic
// machinery shared by all of them: batching, the stage-wise anticipation
// loss, SGD with gradient-norm clipping, and per-frame prediction timelines.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mmlstm/layers.hpp"
#include "mmlstm/loss.hpp"
#include "mmlstm/numerics.hpp"

namespace mmlstm {

/// One sequence's model inputs: per modality a T x dim matrix.
template <std::floating_point S>
using ModelInputs = std::vector<Matrix<S>>;

/// A mini-batch of equal-length sequences in time-major layout.
template <std::floating_point S>
struct SequenceBatch {
  std::size_t steps = 0;
  std::size_t batch = 0;
  std::vector<Matrix<S>> modalities;  // each (T*B) x dim
  std::vector<std::size_t> labels;
};

template <std::floating_point S>
SequenceBatch<S> make_batch(std::span<const ModelInputs<S>* const> sequences,
                            std::span<const std::size_t> labels = {}) {
  if (sequences.empty()) throw std::invalid_argument("make_batch: empty batch");
  if (!labels.empty() && labels.size() != sequences.size())
    throw std::invalid_argument("make_batch: label count mismatch");
  const ModelInputs<S>& first = *sequences.front();
  if (first.empty()) throw ShapeError("make_batch: no modalities");
  SequenceBatch<S> out;
  out.batch = sequences.size();
  out.steps = first.front().rows();
  if (out.steps == 0) throw ShapeError("make_batch: zero-length sequence");
  out.labels.assign(labels.begin(), labels.end());
  for (std::size_t m = 0; m < first.size(); ++m) {
    const std::size_t dim = first[m].cols();
    Matrix<S> stacked(out.steps * out.batch, dim);
    for (std::size_t b = 0; b < out.batch; ++b) {
      const ModelInputs<S>& seq = *sequences[b];
      if (seq.size() != first.size()) throw ShapeError("make_batch: modality count differs");
      if (seq[m].rows() != out.steps || seq[m].cols() != dim)
        throw ShapeError("make_batch: modality " + std::to_string(m) + " has shape " +
                         shape_str(seq[m]) + ", expected " + std::to_string(out.steps) + "x" +
                         std::to_string(dim));
      for (std::size_t t = 0; t < out.steps; ++t)
        std::copy_n(seq[m].row(t).data(), dim, stacked.row(t * out.batch + b).data());
    }
    out.modalities.push_back(std::move(stacked));
  }
  return out;
}

template <std::floating_point S>
SequenceBatch<S> make_batch(const ModelInputs<S>& sequence, std::size_t label = 0) {
  const ModelInputs<S>* ptr = &sequence;
  const std::size_t lab = label;
  return make_batch<S>(std::span<const ModelInputs<S>* const>(&ptr, 1), std::span<const std::size_t>(&lab, 1));
}

// ---------------------------------------------------------------------------
// Configuration

enum class ModelKind { mm_lstm, single_stream, ms_lstm_two_stage };

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::mm_lstm: return "mm";
    case ModelKind::single_stream: return "single";
    case ModelKind::ms_lstm_two_stage: return "ms2";
  }
  return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "mm") return ModelKind::mm_lstm;
  if (s == "single") return ModelKind::single_stream;
  if (s == "ms2") return ModelKind::ms_lstm_two_stage;
  throw std::invalid_argument("unknown model kind '" + s + "'");
}

struct ModelConfig {
  std::vector<std::size_t> modality_dims;
  std::size_t hidden = 1024;
  std::size_t num_classes = 6;
  double fps = 30.0;
  LossConfig loss;
  /// Two-stage baseline only: modality indices feeding stage 1 and stage 2.
  std::vector<std::vector<std::size_t>> stage_groups;

  std::size_t num_modalities() const noexcept { return modality_dims.size(); }

  void validate() const {
    if (modality_dims.empty()) throw std::invalid_argument("ModelConfig: at least one modality required");
    for (auto d : modality_dims)
      if (d == 0) throw std::invalid_argument("ModelConfig: modality width must be positive");
    if (hidden == 0 || num_classes == 0)
      throw std::invalid_argument("ModelConfig: hidden size and class count must be positive");
    if (!(fps > 0)) throw std::invalid_argument("ModelConfig: fps must be positive");
    if (loss.num_classes != num_classes)
      throw std::invalid_argument("ModelConfig: loss configured for " + std::to_string(loss.num_classes) +
                                  " classes, model for " + std::to_string(num_classes));
    loss.validate();
  }
};

using MMLSTMConfig = ModelConfig;

// ---------------------------------------------------------------------------
// Parameter utilities shared by every model type. A model exposes
// for_each_param(f) calling f(name, Matrix&).

template <class Layer, class F>
void visit_prefixed(Layer& layer, const std::string& prefix, F& f) {
  layer.for_each_param([&](const char* name, auto& m) { f(prefix + "." + name, m); });
}

template <class M>
void zero_params(M& model) {
  model.for_each_param([](const std::string&, auto& m) { m.set_zero(); });
}

template <class M>
M zeros_like(const M& model) {
  M z = model;
  zero_params(z);
  return z;
}

template <class M>
auto param_list(M& model) {
  using Mat = Matrix<typename M::Scalar>;
  std::vector<Mat*> out;
  model.for_each_param([&](const std::string&, Mat& m) { out.push_back(&m); });
  return out;
}

template <class M>
std::size_t parameter_count(const M& model) {
  std::size_t n = 0;
  model.for_each_param([&](const std::string&, const auto& m) { n += m.size(); });
  return n;
}

template <class M>
double global_norm(const M& model) {
  double sq = 0;
  model.for_each_param([&](const std::string&, const auto& m) {
    for (auto v : m.values()) sq += static_cast<double>(v) * static_cast<double>(v);
  });
  return std::sqrt(sq);
}

/// model -= lr * grad
template <class M>
void sgd_update(M& model, M& grad, double lr) {
  auto params = param_list(model);
  auto grads = param_list(grad);
  for (std::size_t i = 0; i < params.size(); ++i) {
    using S = typename M::Scalar;
    auto p = params[i]->values();
    auto g = grads[i]->values();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= static_cast<S>(lr) * g[k];
  }
}

template <class M>
std::vector<double> flatten_params(const M& model) {
  std::vector<double> out;
  model.for_each_param([&](const std::string&, const auto& m) {
    for (auto v : m.values()) out.push_back(static_cast<double>(v));
  });
  return out;
}

template <class M>
void assign_params(M& model, std::span<const double> values) {
  if (parameter_count(model) != values.size())
    throw std::invalid_argument("assign_params: " + std::to_string(values.size()) + " values for " +
                                std::to_string(parameter_count(model)) + " parameters");
  std::size_t i = 0;
  model.for_each_param([&](const std::string&, auto& m) {
    using S = typename std::remove_reference_t<decltype(m)>::value_type;
    for (auto& v : m.values()) v = static_cast<S>(values[i++]);
  });
}

// ---------------------------------------------------------------------------
// MM-LSTM

template <std::floating_point S>
struct MMStepState {
  std::vector<LSTMState<S>> modality;
  LSTMState<S> fusion;
};

template <std::floating_point S>
struct MMStepOutput {
  Matrix<S> final_logits;
  Matrix<S> intermediate_logits;
  MMStepState<S> next;
};

/// Per-modality LSTMs -> FC-Pool over the stacked hidden states -> fusion LSTM
/// -> skip-concatenation with the per-modality states -> second FC-Pool ->
/// classifier. An intermediate classifier on the fusion LSTM output supplies
/// stage-wise supervision during training and is skipped at inference.
template <std::floating_point S>
class MMLSTMModel {
 public:
  using Scalar = S;

  struct Pass {
    std::vector<LSTMTrace<S>> modality;
    Matrix<S> stacked;  // D: (T*B) x (M*H)
    Matrix<S> pooled;   // O: (T*B) x H
    LSTMTrace<S> fusion;
    Matrix<S> skip;  // (T*B) x ((M+1)*H), fusion output first
    Matrix<S> representation;
    Matrix<S> final_logits;
    Matrix<S> intermediate_logits;
  };

  ModelConfig config;
  std::vector<LSTMCell<S>> modality_lstms;
  AffineLayer<S> fc_pool_1;
  LSTMCell<S> fusion_lstm;
  AffineLayer<S> fc_pool_2;
  AffineLayer<S> final_classifier;
  AffineLayer<S> intermediate_classifier;

  MMLSTMModel() = default;

  /// Zero-initialized parameters.
  explicit MMLSTMModel(ModelConfig cfg) : config(std::move(cfg)) {
    config.validate();
    const std::size_t h = config.hidden;
    const std::size_t m = config.num_modalities();
    for (auto d : config.modality_dims) modality_lstms.emplace_back(d, h);
    fc_pool_1 = AffineLayer<S>(m * h, h);
    fusion_lstm = LSTMCell<S>(h, h);
    fc_pool_2 = AffineLayer<S>((m + 1) * h, h);
    final_classifier = AffineLayer<S>(h, config.num_classes);
    intermediate_classifier = AffineLayer<S>(h, config.num_classes);
  }

  static MMLSTMModel initialized(ModelConfig cfg, std::uint64_t seed) {
    MMLSTMModel model(std::move(cfg));
    std::mt19937_64 rng(seed);
    for (auto& l : model.modality_lstms) l.init(rng);
    model.fc_pool_1.init(rng);
    model.fusion_lstm.init(rng);
    model.fc_pool_2.init(rng);
    model.final_classifier.init(rng);
    model.intermediate_classifier.init(rng);
    return model;
  }

  std::size_t num_classes() const noexcept { return config.num_classes; }
  bool has_intermediate() const noexcept { return true; }

  template <class F>
  void for_each_param(F&& f) {
    for (std::size_t i = 0; i < modality_lstms.size(); ++i)
      visit_prefixed(modality_lstms[i], "modality" + std::to_string(i), f);
    visit_prefixed(fc_pool_1, "fc_pool_1", f);
    visit_prefixed(fusion_lstm, "fusion_lstm", f);
    visit_prefixed(fc_pool_2, "fc_pool_2", f);
    visit_prefixed(final_classifier, "final_classifier", f);
    visit_prefixed(intermediate_classifier, "intermediate_classifier", f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    const_cast<MMLSTMModel*>(this)->for_each_param(
        [&](const std::string& n, Matrix<S>& m) { f(n, static_cast<const Matrix<S>&>(m)); });
  }

  MMStepState<S> initial_state(std::size_t batch = 1) const {
    MMStepState<S> st;
    for (std::size_t i = 0; i < modality_lstms.size(); ++i)
      st.modality.push_back(LSTMState<S>::zeros(batch, config.hidden));
    st.fusion = LSTMState<S>::zeros(batch, config.hidden);
    return st;
  }

  /// One time step for B rows of frame inputs (one matrix per modality).
  MMStepOutput<S> forward_step(const std::vector<Matrix<S>>& frame, const MMStepState<S>& state) const {
    if (frame.size() != modality_lstms.size())
      throw ShapeError("forward_step: " + std::to_string(frame.size()) + " modality inputs for a " +
                       std::to_string(modality_lstms.size()) + "-modality model");
    MMStepOutput<S> out;
    std::vector<Matrix<S>> hidden;
    for (std::size_t i = 0; i < frame.size(); ++i) {
      auto r = lstm_step(modality_lstms[i], frame[i], state.modality[i]);
      hidden.push_back(std::move(r.output));
      out.next.modality.push_back(std::move(r.next_state));
    }
    std::vector<const Matrix<S>*> parts;
    for (auto& h : hidden) parts.push_back(&h);
    const Matrix<S> stacked = hconcat<S>(parts);
    const Matrix<S> pooled = affine_forward(fc_pool_1, stacked);
    auto fused = lstm_step(fusion_lstm, pooled, state.fusion);
    out.next.fusion = fused.next_state;
    parts.insert(parts.begin(), &fused.output);
    const Matrix<S> representation = affine_forward(fc_pool_2, hconcat<S>(parts));
    out.final_logits = affine_forward(final_classifier, representation);
    out.intermediate_logits = affine_forward(intermediate_classifier, fused.output);
    return out;
  }

  Pass forward(const SequenceBatch<S>& batch, bool with_intermediate) const {
    check_batch(batch);
    Pass p;
    std::vector<const Matrix<S>*> parts;
    for (std::size_t i = 0; i < modality_lstms.size(); ++i)
      p.modality.push_back(lstm_forward(modality_lstms[i], batch.modalities[i], batch.batch));
    for (auto& tr : p.modality) parts.push_back(&tr.hidden);
    p.stacked = hconcat<S>(parts);
    p.pooled = affine_forward(fc_pool_1, p.stacked);
    p.fusion = lstm_forward(fusion_lstm, p.pooled, batch.batch);
    parts.insert(parts.begin(), &p.fusion.hidden);
    p.skip = hconcat<S>(parts);
    p.representation = affine_forward(fc_pool_2, p.skip);
    p.final_logits = affine_forward(final_classifier, p.representation);
    if (with_intermediate) p.intermediate_logits = affine_forward(intermediate_classifier, p.fusion.hidden);
    return p;
  }

  void backward(const SequenceBatch<S>& batch, const Pass& p, const Matrix<S>& d_final,
                const Matrix<S>* d_intermediate, MMLSTMModel& grad) const {
    const std::size_t m = modality_lstms.size();
    const Matrix<S> d_repr = affine_backward(final_classifier, p.representation, d_final, grad.final_classifier);
    const Matrix<S> d_skip = affine_backward(fc_pool_2, p.skip, d_repr, grad.fc_pool_2);
    std::vector<std::size_t> widths(m + 1, config.hidden);
    std::vector<Matrix<S>> d_parts = hsplit(d_skip, widths);
    Matrix<S>& d_fused = d_parts[0];
    if (d_intermediate)
      accumulate(d_fused, affine_backward(intermediate_classifier, p.fusion.hidden, *d_intermediate,
                                          grad.intermediate_classifier));
    const Matrix<S> d_pooled = lstm_backward(fusion_lstm, p.pooled, p.fusion, d_fused, grad.fusion_lstm);
    const Matrix<S> d_stacked = affine_backward(fc_pool_1, p.stacked, d_pooled, grad.fc_pool_1);
    std::vector<Matrix<S>> d_hidden = hsplit(d_stacked, std::span(widths).first(m));
    for (std::size_t i = 0; i < m; ++i) {
      accumulate(d_hidden[i], d_parts[i + 1]);
      lstm_backward(modality_lstms[i], batch.modalities[i], p.modality[i], d_hidden[i],
                    grad.modality_lstms[i], false);
    }
  }

 private:
  void check_batch(const SequenceBatch<S>& batch) const {
    if (batch.modalities.size() != modality_lstms.size())
      throw ShapeError("MM-LSTM: batch has " + std::to_string(batch.modalities.size()) +
                       " modalities, model expects " + std::to_string(modality_lstms.size()));
  }
};

// ---------------------------------------------------------------------------
// Baseline 1: one LSTM over the concatenation of all modality features.

template <std::floating_point S>
class SingleStreamModel {
 public:
  using Scalar = S;

  struct Pass {
    Matrix<S> inputs;
    LSTMTrace<S> trace;
    Matrix<S> final_logits;
    Matrix<S> intermediate_logits;
  };

  ModelConfig config;
  LSTMCell<S> lstm;
  AffineLayer<S> final_classifier;

  SingleStreamModel() = default;
  explicit SingleStreamModel(ModelConfig cfg) : config(std::move(cfg)) {
    config.validate();
    lstm = LSTMCell<S>(input_width(), config.hidden);
    final_classifier = AffineLayer<S>(config.hidden, config.num_classes);
  }

  static SingleStreamModel initialized(ModelConfig cfg, std::uint64_t seed) {
    SingleStreamModel model(std::move(cfg));
    std::mt19937_64 rng(seed);
    model.lstm.init(rng);
    model.final_classifier.init(rng);
    return model;
  }

  std::size_t input_width() const noexcept {
    std::size_t w = 0;
    for (auto d : config.modality_dims) w += d;
    return w;
  }
  std::size_t num_classes() const noexcept { return config.num_classes; }
  bool has_intermediate() const noexcept { return false; }

  template <class F>
  void for_each_param(F&& f) {
    visit_prefixed(lstm, "lstm", f);
    visit_prefixed(final_classifier, "final_classifier", f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    const_cast<SingleStreamModel*>(this)->for_each_param(
        [&](const std::string& n, Matrix<S>& m) { f(n, static_cast<const Matrix<S>&>(m)); });
  }

  Pass forward(const SequenceBatch<S>& batch, bool /*with_intermediate*/) const {
    if (batch.modalities.size() != config.num_modalities())
      throw ShapeError("single-stream: batch has " + std::to_string(batch.modalities.size()) +
                       " modalities, model expects " + std::to_string(config.num_modalities()));
    Pass p;
    std::vector<const Matrix<S>*> parts;
    for (const auto& m : batch.modalities) parts.push_back(&m);
    p.inputs = hconcat<S>(parts);
    p.trace = lstm_forward(lstm, p.inputs, batch.batch);
    p.final_logits = affine_forward(final_classifier, p.trace.hidden);
    return p;
  }

  void backward(const SequenceBatch<S>&, const Pass& p, const Matrix<S>& d_final, const Matrix<S>*,
                SingleStreamModel& grad) const {
    const Matrix<S> dh = affine_backward(final_classifier, p.trace.hidden, d_final, grad.final_classifier);
    lstm_backward(lstm, p.inputs, p.trace, dh, grad.lstm, false);
  }

  /// Per-step hidden states, the representation the classifier reads.
  Matrix<S> hidden_states(const SequenceBatch<S>& batch) const {
    return forward(batch, false).trace.hidden;
  }
};

// ---------------------------------------------------------------------------
// Baseline 3: two successive LSTM stages over a user-ordered pair of modality
// groups. Stage 2 reads stage 1's output concatenated with the second group.

template <std::floating_point S>
class TwoStageModel {
 public:
  using Scalar = S;

  struct Pass {
    Matrix<S> first_inputs;
    LSTMTrace<S> first;
    Matrix<S> second_inputs;
    LSTMTrace<S> second;
    Matrix<S> final_logits;
    Matrix<S> intermediate_logits;
  };

  ModelConfig config;
  LSTMCell<S> stage1;
  LSTMCell<S> stage2;
  AffineLayer<S> final_classifier;
  AffineLayer<S> intermediate_classifier;

  TwoStageModel() = default;
  explicit TwoStageModel(ModelConfig cfg) : config(std::move(cfg)) {
    config.validate();
    if (config.stage_groups.size() != 2)
      throw std::invalid_argument("two-stage model needs exactly 2 modality groups, got " +
                                  std::to_string(config.stage_groups.size()));
    std::vector<bool> seen(config.num_modalities(), false);
    for (const auto& g : config.stage_groups)
      for (auto i : g) {
        if (i >= config.num_modalities() || seen[i])
          throw std::invalid_argument("two-stage model: invalid or repeated modality index " + std::to_string(i));
        seen[i] = true;
      }
    if (config.stage_groups[0].empty()) throw std::invalid_argument("two-stage model: empty first group");
    const std::size_t h = config.hidden;
    stage1 = LSTMCell<S>(group_width(0), h);
    stage2 = LSTMCell<S>(h + group_width(1), h);
    final_classifier = AffineLayer<S>(h, config.num_classes);
    intermediate_classifier = AffineLayer<S>(h, config.num_classes);
  }

  static TwoStageModel initialized(ModelConfig cfg, std::uint64_t seed) {
    TwoStageModel model(std::move(cfg));
    std::mt19937_64 rng(seed);
    model.stage1.init(rng);
    model.stage2.init(rng);
    model.final_classifier.init(rng);
    model.intermediate_classifier.init(rng);
    return model;
  }

  std::size_t group_width(std::size_t g) const {
    std::size_t w = 0;
    for (auto i : config.stage_groups[g]) w += config.modality_dims[i];
    return w;
  }
  std::size_t num_classes() const noexcept { return config.num_classes; }
  bool has_intermediate() const noexcept { return true; }

  template <class F>
  void for_each_param(F&& f) {
    visit_prefixed(stage1, "stage1", f);
    visit_prefixed(stage2, "stage2", f);
    visit_prefixed(final_classifier, "final_classifier", f);
    visit_prefixed(intermediate_classifier, "intermediate_classifier", f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    const_cast<TwoStageModel*>(this)->for_each_param(
        [&](const std::string& n, Matrix<S>& m) { f(n, static_cast<const Matrix<S>&>(m)); });
  }

  Pass forward(const SequenceBatch<S>& batch, bool with_intermediate) const {
    if (batch.modalities.size() != config.num_modalities())
      throw ShapeError("two-stage: batch has " + std::to_string(batch.modalities.size()) +
                       " modalities, model expects " + std::to_string(config.num_modalities()));
    Pass p;
    std::vector<const Matrix<S>*> parts;
    for (auto i : config.stage_groups[0]) parts.push_back(&batch.modalities[i]);
    p.first_inputs = hconcat<S>(parts);
    p.first = lstm_forward(stage1, p.first_inputs, batch.batch);
    parts.assign({&p.first.hidden});
    for (auto i : config.stage_groups[1]) parts.push_back(&batch.modalities[i]);
    p.second_inputs = hconcat<S>(parts);
    p.second = lstm_forward(stage2, p.second_inputs, batch.batch);
    p.final_logits = affine_forward(final_classifier, p.second.hidden);
    if (with_intermediate) p.intermediate_logits = affine_forward(intermediate_classifier, p.first.hidden);
    return p;
  }

  void backward(const SequenceBatch<S>&, const Pass& p, const Matrix<S>& d_final,
                const Matrix<S>* d_intermediate, TwoStageModel& grad) const {
    const Matrix<S> dh2 = affine_backward(final_classifier, p.second.hidden, d_final, grad.final_classifier);
    const Matrix<S> d_in2 = lstm_backward(stage2, p.second_inputs, p.second, dh2, grad.stage2);
    const std::size_t h = config.hidden;
    const std::size_t widths[2] = {h, group_width(1)};
    Matrix<S> dh1 = std::move(hsplit(d_in2, std::span<const std::size_t>(widths, 2))[0]);
    if (d_intermediate)
      accumulate(dh1, affine_backward(intermediate_classifier, p.first.hidden, *d_intermediate,
                                      grad.intermediate_classifier));
    lstm_backward(stage1, p.first_inputs, p.first, dh1, grad.stage1, false);
  }
};

template <class M>
concept SequenceModel = requires(const M& m, M& g, const SequenceBatch<typename M::Scalar>& b,
                                 const typename M::Pass& p, const Matrix<typename M::Scalar>& d) {
  { m.forward(b, true) } -> std::same_as<typename M::Pass>;
  m.backward(b, p, d, &d, g);
  { m.num_classes() } -> std::convertible_to<std::size_t>;
  { m.has_intermediate() } -> std::convertible_to<bool>;
  m.config;
};

template <std::floating_point S>
using AnyModel = std::variant<MMLSTMModel<S>, SingleStreamModel<S>, TwoStageModel<S>>;

template <std::floating_point S>
AnyModel<S> build_model(ModelKind kind, const ModelConfig& cfg, std::uint64_t seed) {
  switch (kind) {
    case ModelKind::mm_lstm: return MMLSTMModel<S>::initialized(cfg, seed);
    case ModelKind::single_stream: return SingleStreamModel<S>::initialized(cfg, seed);
    case ModelKind::ms_lstm_two_stage: return TwoStageModel<S>::initialized(cfg, seed);
  }
  throw std::invalid_argument("build_model: unknown kind");
}

/// Baseline variants only; the MM-LSTM itself is not a baseline.
template <std::floating_point S>
AnyModel<S> build_baseline(ModelKind kind, const ModelConfig& cfg, std::uint64_t seed) {
  if (kind == ModelKind::mm_lstm) throw std::invalid_argument("build_baseline: mm is not a baseline kind");
  return build_model<S>(kind, cfg, seed);
}

template <std::floating_point S>
ModelKind kind_of(const AnyModel<S>& m) {
  return static_cast<ModelKind>(m.index());
}

// ---------------------------------------------------------------------------
// Loss, gradients, and SGD.

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <std::floating_point S>
struct BatchLoss {
  loss_scalar_t<S> value = 0;
  Matrix<S> d_logits;
};

/// Mean anticipation loss over the sequences of a batch, with the gradient on
/// the logits (softmax folded in). Softmax and loss run in at least double.
template <std::floating_point S>
BatchLoss<S> batch_anticipation_loss(const Matrix<S>& logits, const SequenceBatch<S>& batch,
                                     const LossConfig& cfg, double fps) {
  using W = loss_scalar_t<S>;
  if (batch.labels.size() != batch.batch) throw std::invalid_argument("batch loss: labels missing");
  if (!all_finite(logits)) throw NonFiniteLoss("non-finite logits");
  const std::size_t nc = logits.cols();
  const std::vector<double> times = frame_times(batch.steps, fps);
  BatchLoss<S> out{0, Matrix<S>(logits.rows(), nc)};
  const W inv_n = W(1) / static_cast<W>(batch.batch);
  Matrix<W> probs(batch.steps, nc);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t < batch.steps; ++t) {
      auto src = logits.row(t * batch.batch + b);
      auto dst = probs.row(t);
      for (std::size_t c = 0; c < nc; ++c) dst[c] = static_cast<W>(src[c]);
      softmax_inplace(dst);
    }
    const LossResult<W> r = anticipation_loss(probs, batch.labels[b], cfg, times);
    out.value += r.value * inv_n;
    const Matrix<W> dz = softmax_backward(probs, r.gradient);
    for (std::size_t t = 0; t < batch.steps; ++t) {
      auto dst = out.d_logits.row(t * batch.batch + b);
      for (std::size_t c = 0; c < nc; ++c) dst[c] = static_cast<S>(dz(t, c) * inv_n);
    }
  }
  return out;
}

template <class M>
struct GradientResult {
  double loss = 0.0;
  double final_loss = 0.0;
  double intermediate_loss = 0.0;
  M grad;
};

namespace detail {

template <SequenceModel M>
struct StagewiseLosses {
  using S = typename M::Scalar;
  typename M::Pass pass;
  BatchLoss<S> final_part;
  BatchLoss<S> intermediate_part;
  loss_scalar_t<S> total = 0;
};

template <SequenceModel M>
StagewiseLosses<M> stagewise_losses(const M& model, const SequenceBatch<typename M::Scalar>& batch) {
  const LossConfig& cfg = model.config.loss;
  StagewiseLosses<M> out{model.forward(batch, model.has_intermediate()), {}, {}, 0};
  out.final_part = batch_anticipation_loss(out.pass.final_logits, batch, cfg, model.config.fps);
  if (model.has_intermediate())
    out.intermediate_part = batch_anticipation_loss(out.pass.intermediate_logits, batch, cfg, model.config.fps);
  if (!std::isfinite(out.final_part.value) || !std::isfinite(out.intermediate_part.value))
    throw NonFiniteLoss("non-finite loss");
  if (!(cfg.intermediate_loss_weight >= 0.0))
    throw std::invalid_argument("stage-wise loss: negative intermediate loss weight");
  out.total = out.final_part.value +
              static_cast<loss_scalar_t<typename M::Scalar>>(cfg.intermediate_loss_weight) * out.intermediate_part.value;
  return out;
}

}  // namespace detail

/// Stage-wise total loss alone, in the model's loss precision.
template <SequenceModel M>
auto stagewise_loss(const M& model, const SequenceBatch<typename M::Scalar>& batch) {
  return detail::stagewise_losses(model, batch).total;
}

/// Stage-wise total loss and its exact gradient (no clipping).
template <SequenceModel M>
GradientResult<M> loss_and_gradient(const M& model, const SequenceBatch<typename M::Scalar>& batch) {
  using S = typename M::Scalar;
  auto parts = detail::stagewise_losses(model, batch);
  GradientResult<M> out{static_cast<double>(parts.total), static_cast<double>(parts.final_part.value),
                        static_cast<double>(parts.intermediate_part.value), zeros_like(model)};
  if (model.has_intermediate())
    scale(parts.intermediate_part.d_logits, static_cast<S>(model.config.loss.intermediate_loss_weight));
  model.backward(batch, parts.pass, parts.final_part.d_logits,
                 model.has_intermediate() ? &parts.intermediate_part.d_logits : nullptr, out.grad);
  return out;
}

struct SGDOptions {
  double learning_rate = 0.001;
  double clip_norm = 5.0;  // <= 0 disables clipping
};

struct StepReport {
  double loss = 0.0;
  double final_loss = 0.0;
  double intermediate_loss = 0.0;
  double grad_norm = 0.0;
};

/// One SGD step on a batch. Throws NonFiniteLoss and leaves the model untouched
/// if the loss or gradient is not finite.
template <SequenceModel M>
StepReport training_step(M& model, const SequenceBatch<typename M::Scalar>& batch, const SGDOptions& opt) {
  using S = typename M::Scalar;
  GradientResult<M> g = loss_and_gradient(model, batch);
  StepReport rep{g.loss, g.final_loss, g.intermediate_loss, global_norm(g.grad)};
  if (!std::isfinite(rep.grad_norm)) throw NonFiniteLoss("non-finite gradient");
  if (opt.clip_norm > 0 && rep.grad_norm > opt.clip_norm) {
    const S factor = static_cast<S>(opt.clip_norm / rep.grad_norm);
    g.grad.for_each_param([&](const std::string&, Matrix<S>& m) { scale(m, factor); });
  }
  sgd_update(model, g.grad, opt.learning_rate);
  return rep;
}

/// One pass over `order` in mini-batches of `batch_size`; returns the mean
/// batch loss. A non-finite batch aborts with its index in the message.
template <SequenceModel M>
double train_epoch(M& model, std::span<const ModelInputs<typename M::Scalar>> data,
                   std::span<const std::size_t> labels, std::span<const std::size_t> order, std::size_t batch_size,
                   const SGDOptions& opt) {
  using S = typename M::Scalar;
  if (batch_size == 0) throw std::invalid_argument("train_epoch: batch size must be positive");
  if (data.size() != labels.size()) throw std::invalid_argument("train_epoch: data/label count mismatch");
  double sum = 0;
  std::size_t batches = 0;
  std::vector<const ModelInputs<S>*> ptrs;
  std::vector<std::size_t> labs;
  for (std::size_t start = 0; start < order.size(); start += batch_size, ++batches) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    ptrs.clear();
    labs.clear();
    for (std::size_t i = start; i < end; ++i) {
      ptrs.push_back(&data[order[i]]);
      labs.push_back(labels[order[i]]);
    }
    const auto batch = make_batch<S>(ptrs, labs);
    try {
      sum += training_step(model, batch, opt).loss;
    } catch (const NonFiniteLoss& e) {
      throw NonFiniteLoss("batch " + std::to_string(batches) + ": " + e.what());
    }
  }
  return batches ? sum / static_cast<double>(batches) : 0.0;
}

// ---------------------------------------------------------------------------
// Prediction timelines.

struct PredictionTimeline {
  Matrix<double> per_frame;  // T x N_c
  Matrix<double> pooled;     // running temporal average of per_frame
  std::vector<std::size_t> predicted_class_at;

  std::size_t frames() const noexcept { return per_frame.rows(); }

  static PredictionTimeline from_per_frame(Matrix<double> per_frame) {
    PredictionTimeline tl;
    const std::size_t n = per_frame.rows();
    const std::size_t nc = per_frame.cols();
    tl.pooled = Matrix<double>(n, nc);
    tl.predicted_class_at.resize(n);
    std::vector<double> sum(nc, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t c = 0; c < nc; ++c) {
        sum[c] += per_frame(t, c);
        tl.pooled(t, c) = sum[c] / static_cast<double>(t + 1);
      }
      tl.predicted_class_at[t] = argmax(tl.pooled.row(t));
    }
    tl.per_frame = std::move(per_frame);
    return tl;
  }
};

/// Timelines for every sequence of a batch; intermediate classifier unused.
template <SequenceModel M>
std::vector<PredictionTimeline> predict_timelines(const M& model, const SequenceBatch<typename M::Scalar>& batch) {
  const auto pass = model.forward(batch, false);
  const std::size_t nc = model.num_classes();
  std::vector<PredictionTimeline> out;
  out.reserve(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    Matrix<double> probs(batch.steps, nc);
    for (std::size_t t = 0; t < batch.steps; ++t) {
      auto src = pass.final_logits.row(t * batch.batch + b);
      auto dst = probs.row(t);
      for (std::size_t c = 0; c < nc; ++c) dst[c] = static_cast<double>(src[c]);
      softmax_inplace(dst);
    }
    out.push_back(PredictionTimeline::from_per_frame(std::move(probs)));
  }
  return out;
}

template <SequenceModel M>
PredictionTimeline predict_timeline(const M& model, const ModelInputs<typename M::Scalar>& inputs) {
  return std::move(predict_timelines(model, make_batch(inputs)).front());
}

template <std::floating_point S>
std::vector<PredictionTimeline> predict_timelines(const AnyModel<S>& model, const SequenceBatch<S>& batch) {
  return std::visit([&](const auto& m) { return predict_timelines(m, batch); }, model);
}

template <std::floating_point S>
StepReport training_step(AnyModel<S>& model, const SequenceBatch<S>& batch, const SGDOptions& opt) {
  return std::visit([&](auto& m) { return training_step(m, batch, opt); }, model);
}

template <std::floating_point S>
double train_epoch(AnyModel<S>& model, std::span<const ModelInputs<S>> data, std::span<const std::size_t> labels,
                   std::span<const std::size_t> order, std::size_t batch_size, const SGDOptions& opt) {
  return std::visit([&](auto& m) { return train_epoch(m, data, labels, order, batch_size, opt); }, model);
}

template <std::floating_point S>
const ModelConfig& config_of(const AnyModel<S>& model) {
  return std::visit([](const auto& m) -> const ModelConfig& { return m.config; }, model);
}

}  // namespace mmlstm
