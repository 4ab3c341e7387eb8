#pragma once

// Time-weighted anticipation loss. Each frame contributes
//   -sum_c [ y_c log p_c + w(t) (1 - y_c) log(1 - p_c) ]
// where y is the one-hot label and w(t) ramps up the penalty on wrong-class
// confidence as the clip progresses.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "mmlstm/numerics.hpp"

namespace mmlstm {

enum class WeightingKind { linear, sigmoid, uniform };

inline const char* to_string(WeightingKind k) {
  switch (k) {
    case WeightingKind::linear: return "linear";
    case WeightingKind::sigmoid: return "sigmoid";
    case WeightingKind::uniform: return "uniform";
  }
  return "?";
}

inline WeightingKind weighting_from_string(const std::string& s) {
  if (s == "linear") return WeightingKind::linear;
  if (s == "sigmoid") return WeightingKind::sigmoid;
  if (s == "uniform") return WeightingKind::uniform;
  throw std::invalid_argument("unknown weighting '" + s + "'");
}

struct WeightingFn {
  WeightingKind kind = WeightingKind::sigmoid;
  double alpha = 3.0;
  double beta = 6.0;
  double duration = 5.0;  // seconds

  static WeightingFn linear(double duration) { return {WeightingKind::linear, 0, 0, duration}; }
  static WeightingFn sigmoid(double alpha, double beta, double duration) {
    return {WeightingKind::sigmoid, alpha, beta, duration};
  }
  static WeightingFn uniform(double duration) { return {WeightingKind::uniform, 0, 0, duration}; }
};

/// w(t) for t in seconds, 0 <= t <= duration.
inline double weight_at(const WeightingFn& w, double t) {
  if (!(t >= 0.0) || t > w.duration * (1 + 1e-12))
    throw std::out_of_range("weight_at: t=" + std::to_string(t) + "s outside [0, " +
                            std::to_string(w.duration) + "]");
  switch (w.kind) {
    case WeightingKind::linear: return t / w.duration;
    case WeightingKind::sigmoid: return logistic(w.alpha * t - w.beta);
    case WeightingKind::uniform: return 1.0;
  }
  return 1.0;
}

struct LossConfig {
  std::size_t num_classes = 6;
  double clip_epsilon = 1e-7;
  WeightingFn weighting;
  double intermediate_loss_weight = 1.0;

  void validate() const {
    if (num_classes == 0) throw std::invalid_argument("LossConfig: num_classes must be positive");
    if (!(clip_epsilon > 0.0 && clip_epsilon <= 0.01))
      throw std::invalid_argument("LossConfig: clip_epsilon must lie in (0, 0.01]");
    if (!(intermediate_loss_weight >= 0.0) || !std::isfinite(intermediate_loss_weight))
      throw std::invalid_argument("LossConfig: intermediate_loss_weight must be nonnegative");
    if (!(weighting.duration > 0.0)) throw std::invalid_argument("LossConfig: duration must be positive");
  }
};

/// Time stamp of each frame in seconds. Frame f (0-based) closes at (f+1)/fps,
/// so the last frame of a full clip sits exactly at its duration.
inline std::vector<double> frame_times(std::size_t frames, double fps) {
  std::vector<double> t(frames);
  for (std::size_t f = 0; f < frames; ++f) t[f] = static_cast<double>(f + 1) / fps;
  return t;
}

/// Arithmetic type for loss values: at least double, wider if the model is.
template <std::floating_point S>
using loss_scalar_t = std::conditional_t<(sizeof(S) > sizeof(double)), S, double>;

template <std::floating_point W = double>
struct LossResult {
  W value = 0;
  Matrix<W> gradient;  // dL/dp, same shape as the predictions
};

namespace detail {

// No distribution checks, so finite differences can perturb entries freely.
template <std::floating_point W>
LossResult<W> weighted_log_loss(const Matrix<W>& p, std::size_t label, const LossConfig& cfg,
                                std::span<const double> times) {
  LossResult<W> out{0, Matrix<W>(p.rows(), p.cols())};
  const W eps = static_cast<W>(cfg.clip_epsilon);
  for (std::size_t t = 0; t < p.rows(); ++t) {
    const W w = static_cast<W>(weight_at(cfg.weighting, times[t]));
    for (std::size_t c = 0; c < p.cols(); ++c) {
      const W raw = p(t, c);
      const bool clipped = raw < eps || raw > 1 - eps;
      const W q = std::clamp(raw, eps, 1 - eps);
      if (c == label) {
        out.value -= std::log(q);
        if (!clipped) out.gradient(t, c) = -1 / q;
      } else {
        out.value -= w * std::log1p(-q);
        if (!clipped) out.gradient(t, c) = w / (1 - q);
      }
    }
  }
  return out;
}

}  // namespace detail

/// Loss of one sequence's per-frame predictions (T x N_c). Divide by the batch
/// size to get the mini-batch mean.
template <std::floating_point W>
LossResult<W> anticipation_loss(const Matrix<W>& predictions, std::size_t label, const LossConfig& cfg,
                                std::span<const double> times) {
  cfg.validate();
  if (predictions.cols() != cfg.num_classes)
    throw ShapeError("anticipation_loss: predictions have " + std::to_string(predictions.cols()) +
                     " classes, config says " + std::to_string(cfg.num_classes));
  if (times.size() != predictions.rows())
    throw ShapeError("anticipation_loss: " + std::to_string(times.size()) + " time stamps for " +
                     std::to_string(predictions.rows()) + " frames");
  if (label >= cfg.num_classes)
    throw std::out_of_range("anticipation_loss: label " + std::to_string(label) + " out of range");
  for (std::size_t t = 0; t < predictions.rows(); ++t) {
    W sum = 0;
    for (W v : predictions.row(t)) {
      if (!std::isfinite(v) || v < 0) throw std::invalid_argument("anticipation_loss: malformed distribution");
      sum += v;
    }
    if (std::abs(sum - 1) > 1e-6)
      throw std::invalid_argument("anticipation_loss: frame " + std::to_string(t) + " sums to " +
                                  std::to_string(static_cast<double>(sum)));
  }
  return detail::weighted_log_loss(predictions, label, cfg, times);
}

inline double stagewise_total(double final_loss, double intermediate_loss, const LossConfig& cfg) {
  if (!(cfg.intermediate_loss_weight >= 0.0))
    throw std::invalid_argument("stagewise_total: negative intermediate loss weight");
  if (!std::isfinite(final_loss) || !std::isfinite(intermediate_loss))
    throw std::invalid_argument("stagewise_total: non-finite loss");
  return final_loss + cfg.intermediate_loss_weight * intermediate_loss;
}

}  // namespace mmlstm
