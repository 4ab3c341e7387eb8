#pragma once

// Affine / FC-Pool layers and the LSTM cell, each with an explicit backward
// pass. Sequence tensors are time-major: row t*batch + b holds step t of
// sequence b.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <utility>

#include "mmlstm/numerics.hpp"

namespace mmlstm {

template <std::floating_point S>
void init_uniform(Matrix<S>& m, std::mt19937_64& rng, double range) {
  std::uniform_real_distribution<double> dist(-range, range);
  for (S& v : m.values()) v = static_cast<S>(dist(rng));
}

// ---------------------------------------------------------------------------
// Affine

template <std::floating_point S>
struct AffineLayer {
  Matrix<S> weight;  // out x in
  Matrix<S> bias;    // 1 x out

  AffineLayer() = default;
  AffineLayer(std::size_t in, std::size_t out) : weight(out, in), bias(1, out) {}

  std::size_t in_features() const noexcept { return weight.cols(); }
  std::size_t out_features() const noexcept { return weight.rows(); }

  void init(std::mt19937_64& rng) {
    init_uniform(weight, rng, 1.0 / std::sqrt(static_cast<double>(in_features())));
    bias.set_zero();
  }

  template <class F>
  void for_each_param(F&& f) {
    f("weight", weight);
    f("bias", bias);
  }
  template <class F>
  void for_each_param(F&& f) const {
    f("weight", weight);
    f("bias", bias);
  }
};

/// x * W^T + b for every row of x.
template <std::floating_point S>
Matrix<S> affine_forward(const AffineLayer<S>& layer, const Matrix<S>& x) {
  if (x.cols() != layer.in_features())
    throw ShapeError("affine_forward: input width " + std::to_string(x.cols()) +
                     " but layer expects " + std::to_string(layer.in_features()));
  Matrix<S> y = matmul_nt(x, layer.weight);
  add_row_broadcast(y, layer.bias);
  return y;
}

/// Accumulates parameter gradients into `grad` and returns dL/dx.
template <std::floating_point S>
Matrix<S> affine_backward(const AffineLayer<S>& layer, const Matrix<S>& x, const Matrix<S>& dy,
                          AffineLayer<S>& grad) {
  if (dy.rows() != x.rows() || dy.cols() != layer.out_features())
    throw ShapeError("affine_backward: upstream gradient " + shape_str(dy) + " for input " +
                     shape_str(x));
  add_matmul_tn(grad.weight, dy, x);
  add_column_sums(grad.bias, dy);
  return matmul(dy, layer.weight);
}

/// FC-Pool: flattens a K x H stack row-major and maps it to 1 x H with an
/// affine layer whose parameters are shared over time.
template <std::floating_point S>
Matrix<S> fc_pool_forward(const AffineLayer<S>& layer, const Matrix<S>& stacked) {
  if (stacked.size() != layer.in_features() || layer.out_features() != stacked.cols())
    throw ShapeError("fc_pool_forward: stack " + shape_str(stacked) + " for layer " +
                     shape_str(layer.weight));
  Matrix<S> flat(1, stacked.size(), std::vector<S>(stacked.values().begin(), stacked.values().end()));
  return affine_forward(layer, flat);
}

// ---------------------------------------------------------------------------
// LSTM

/// Standard LSTM without peepholes. Gate blocks along the 4H axis are
/// [input, forget, output, candidate].
template <std::floating_point S>
struct LSTMCell {
  Matrix<S> w_input;   // 4H x in
  Matrix<S> w_hidden;  // 4H x H
  Matrix<S> bias;      // 1 x 4H

  LSTMCell() = default;
  LSTMCell(std::size_t input_size, std::size_t hidden_size)
      : w_input(4 * hidden_size, input_size),
        w_hidden(4 * hidden_size, hidden_size),
        bias(1, 4 * hidden_size) {}

  std::size_t input_size() const noexcept { return w_input.cols(); }
  std::size_t hidden_size() const noexcept { return w_hidden.cols(); }

  /// uniform(-r, r), r = 1/sqrt(fan_in); forget-gate bias starts at 1.
  void init(std::mt19937_64& rng) {
    const double r = 1.0 / std::sqrt(static_cast<double>(input_size() + hidden_size()));
    init_uniform(w_input, rng, r);
    init_uniform(w_hidden, rng, r);
    bias.set_zero();
    const std::size_t h = hidden_size();
    for (std::size_t j = h; j < 2 * h; ++j) bias(0, j) = S(1);
  }

  template <class F>
  void for_each_param(F&& f) {
    f("w_input", w_input);
    f("w_hidden", w_hidden);
    f("bias", bias);
  }
  template <class F>
  void for_each_param(F&& f) const {
    f("w_input", w_input);
    f("w_hidden", w_hidden);
    f("bias", bias);
  }
};

template <std::floating_point S>
struct LSTMState {
  Matrix<S> hidden;  // B x H
  Matrix<S> cell;    // B x H

  static LSTMState zeros(std::size_t batch, std::size_t hidden_size) {
    return {Matrix<S>(batch, hidden_size), Matrix<S>(batch, hidden_size)};
  }
};

template <std::floating_point S>
struct LSTMStepResult {
  Matrix<S> output;
  LSTMState<S> next_state;
};

namespace detail {

// Applies the gate nonlinearities in place on a B x 4H pre-activation block
// and writes c' and h'.
template <class S>
void lstm_cell_update(S* gates, const S* c_prev, S* c_next, S* tanh_c, S* h_next,
                      std::size_t batch, std::size_t h) {
  for (std::size_t b = 0; b < batch; ++b) {
    S* g = gates + b * 4 * h;
    for (std::size_t j = 0; j < 3 * h; ++j) g[j] = logistic(g[j]);
    for (std::size_t j = 3 * h; j < 4 * h; ++j) g[j] = std::tanh(g[j]);
    const S* cp = c_prev + b * h;
    S* cn = c_next + b * h;
    S* tc = tanh_c + b * h;
    S* hn = h_next + b * h;
    for (std::size_t j = 0; j < h; ++j) {
      const S i = g[j], f = g[h + j], o = g[2 * h + j], cand = g[3 * h + j];
      cn[j] = f * cp[j] + i * cand;
      tc[j] = std::tanh(cn[j]);
      hn[j] = o * tc[j];
    }
  }
}

template <class S>
Eigen::Map<RowMajor<S>> block(Matrix<S>& m, std::size_t row0, std::size_t rows) {
  return Eigen::Map<RowMajor<S>>(m.data() + row0 * m.cols(), static_cast<Eigen::Index>(rows),
                                 static_cast<Eigen::Index>(m.cols()));
}
template <class S>
Eigen::Map<const RowMajor<S>> block(const Matrix<S>& m, std::size_t row0, std::size_t rows) {
  return Eigen::Map<const RowMajor<S>>(m.data() + row0 * m.cols(),
                                       static_cast<Eigen::Index>(rows),
                                       static_cast<Eigen::Index>(m.cols()));
}

}  // namespace detail

template <std::floating_point S>
LSTMStepResult<S> lstm_step(const LSTMCell<S>& cell, const Matrix<S>& x, const LSTMState<S>& state) {
  const std::size_t h = cell.hidden_size();
  if (x.cols() != cell.input_size())
    throw ShapeError("lstm_step: input width " + std::to_string(x.cols()) + " but cell expects " +
                     std::to_string(cell.input_size()));
  if (state.hidden.rows() != x.rows() || state.hidden.cols() != h || !state.cell.same_shape(state.hidden))
    throw ShapeError("lstm_step: state " + shape_str(state.hidden) + "/" + shape_str(state.cell) +
                     " does not fit batch " + std::to_string(x.rows()) + " hidden " + std::to_string(h));
  if (!all_finite(state.hidden) || !all_finite(state.cell))
    throw std::domain_error("lstm_step: non-finite state");

  Matrix<S> gates = matmul_nt(x, cell.w_input);
  add_matmul_nt(gates, state.hidden, cell.w_hidden);
  add_row_broadcast(gates, cell.bias);
  LSTMStepResult<S> out{Matrix<S>(x.rows(), h), LSTMState<S>::zeros(x.rows(), h)};
  Matrix<S> tanh_c(x.rows(), h);
  detail::lstm_cell_update(gates.data(), state.cell.data(), out.next_state.cell.data(),
                           tanh_c.data(), out.next_state.hidden.data(), x.rows(), h);
  out.output = out.next_state.hidden;
  return out;
}

/// Everything the backward pass needs from an unrolled forward pass.
template <std::floating_point S>
struct LSTMTrace {
  std::size_t steps = 0;
  std::size_t batch = 0;
  Matrix<S> gates;   // (T*B) x 4H, post-activation
  Matrix<S> cells;   // (T*B) x H
  Matrix<S> tanh_cells;
  Matrix<S> hidden;  // (T*B) x H, the per-step outputs
  LSTMState<S> initial;

  LSTMState<S> final_state() const {
    return LSTMState<S>{hidden.row_block((steps - 1) * batch, batch),
                        cells.row_block((steps - 1) * batch, batch)};
  }
};

/// Unrolls the cell over a time-major (T*B) x in input.
template <std::floating_point S>
LSTMTrace<S> lstm_forward(const LSTMCell<S>& cell, const Matrix<S>& inputs, std::size_t batch,
                          const LSTMState<S>* initial = nullptr) {
  const std::size_t h = cell.hidden_size();
  if (batch == 0 || inputs.rows() % batch != 0 || inputs.rows() == 0)
    throw ShapeError("lstm_forward: " + std::to_string(inputs.rows()) +
                     " rows are not a positive multiple of batch " + std::to_string(batch));
  if (inputs.cols() != cell.input_size())
    throw ShapeError("lstm_forward: input width " + std::to_string(inputs.cols()) +
                     " but cell expects " + std::to_string(cell.input_size()));
  LSTMTrace<S> tr;
  tr.batch = batch;
  tr.steps = inputs.rows() / batch;
  tr.initial = initial ? *initial : LSTMState<S>::zeros(batch, h);
  if (tr.initial.hidden.rows() != batch || tr.initial.hidden.cols() != h)
    throw ShapeError("lstm_forward: initial state shape mismatch");

  tr.gates = matmul_nt(inputs, cell.w_input);
  add_row_broadcast(tr.gates, cell.bias);
  tr.cells = Matrix<S>(inputs.rows(), h);
  tr.tanh_cells = Matrix<S>(inputs.rows(), h);
  tr.hidden = Matrix<S>(inputs.rows(), h);

  const auto wh = detail::view(cell.w_hidden);
  for (std::size_t t = 0; t < tr.steps; ++t) {
    const std::size_t r0 = t * batch;
    const S* h_prev = t == 0 ? tr.initial.hidden.data() : tr.hidden.data() + (r0 - batch) * h;
    const S* c_prev = t == 0 ? tr.initial.cell.data() : tr.cells.data() + (r0 - batch) * h;
    Eigen::Map<const detail::RowMajor<S>> hp(h_prev, static_cast<Eigen::Index>(batch),
                                             static_cast<Eigen::Index>(h));
    detail::block(tr.gates, r0, batch).noalias() += hp * wh.transpose();
    detail::lstm_cell_update(tr.gates.data() + r0 * 4 * h, c_prev, tr.cells.data() + r0 * h,
                             tr.tanh_cells.data() + r0 * h, tr.hidden.data() + r0 * h, batch, h);
  }
  return tr;
}

/// Backpropagation through time. `d_hidden` is the upstream gradient on every
/// per-step output. Parameter gradients accumulate into `grad`; returns dL/dinputs
/// (empty when `input_grad` is false).
template <std::floating_point S>
Matrix<S> lstm_backward(const LSTMCell<S>& cell, const Matrix<S>& inputs, const LSTMTrace<S>& tr,
                        const Matrix<S>& d_hidden, LSTMCell<S>& grad, bool input_grad = true) {
  const std::size_t h = cell.hidden_size();
  const std::size_t batch = tr.batch;
  if (d_hidden.rows() != tr.steps * batch || d_hidden.cols() != h || inputs.rows() != d_hidden.rows())
    throw ShapeError("lstm_backward: gradient " + shape_str(d_hidden) + " / inputs " +
                     shape_str(inputs) + " do not match a trace of " + std::to_string(tr.steps) +
                     " steps x batch " + std::to_string(batch));

  Matrix<S> dz(d_hidden.rows(), 4 * h);
  Matrix<S> dh_next(batch, h);
  Matrix<S> dc_next(batch, h);
  const auto wh = detail::view(cell.w_hidden);

  for (std::size_t step = tr.steps; step-- > 0;) {
    const std::size_t r0 = step * batch;
    const S* c_prev_all = step == 0 ? tr.initial.cell.data() : tr.cells.data() + (r0 - batch) * h;
    for (std::size_t b = 0; b < batch; ++b) {
      const S* g = tr.gates.data() + (r0 + b) * 4 * h;
      const S* tc = tr.tanh_cells.data() + (r0 + b) * h;
      const S* cp = c_prev_all + b * h;
      const S* up = d_hidden.data() + (r0 + b) * h;
      S* dhn = dh_next.data() + b * h;
      S* dcn = dc_next.data() + b * h;
      S* d = dz.data() + (r0 + b) * 4 * h;
      for (std::size_t j = 0; j < h; ++j) {
        const S i = g[j], f = g[h + j], o = g[2 * h + j], cand = g[3 * h + j];
        const S dh = up[j] + dhn[j];
        const S dc = dcn[j] + dh * o * (S(1) - tc[j] * tc[j]);
        d[j] = dc * cand * i * (S(1) - i);
        d[h + j] = dc * cp[j] * f * (S(1) - f);
        d[2 * h + j] = dh * tc[j] * o * (S(1) - o);
        d[3 * h + j] = dc * i * (S(1) - cand * cand);
        dcn[j] = dc * f;
      }
    }
    detail::view(dh_next).noalias() = detail::block(std::as_const(dz), r0, batch) * wh;
  }

  // h_{t-1} for every step, with the initial state in the first block.
  Matrix<S> h_prev(d_hidden.rows(), h);
  std::copy_n(tr.initial.hidden.data(), batch * h, h_prev.data());
  if (tr.steps > 1)
    std::copy_n(tr.hidden.data(), (tr.steps - 1) * batch * h, h_prev.data() + batch * h);

  add_matmul_tn(grad.w_input, dz, inputs);
  add_matmul_tn(grad.w_hidden, dz, h_prev);
  add_column_sums(grad.bias, dz);
  if (!input_grad) return {};
  return matmul(dz, cell.w_input);
}

}  // namespace mmlstm
