#pragma once

// Dense row-major matrices, the handful of kernels the recurrent layers need,
// and a central-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

namespace mmlstm {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <std::floating_point S>
class Matrix {
 public:
  using value_type = S;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, S fill = S(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<S> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      std::ostringstream os;
      os << "matrix data length " << data_.size() << " does not match shape " << rows_ << "x"
         << cols_;
      throw ShapeError(os.str());
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<S>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged initializer rows");
      std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
      ++i;
    }
    return m;
  }

  static Matrix row_vector(std::span<const S> values) {
    return Matrix(1, values.size(), std::vector<S>(values.begin(), values.end()));
  }
  static Matrix row_vector(std::initializer_list<S> values) {
    return row_vector(std::span<const S>(values.begin(), values.size()));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = S(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  S* data() noexcept { return data_.data(); }
  const S* data() const noexcept { return data_.data(); }
  std::span<S> values() noexcept { return data_; }
  std::span<const S> values() const noexcept { return data_; }

  S& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  S operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<S> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const S> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  /// Copy of rows [first, first + count).
  Matrix row_block(std::size_t first, std::size_t count) const {
    if (first + count > rows_) throw ShapeError("row block out of range");
    Matrix out(count, cols_);
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(first * cols_), count * cols_,
                out.data_.begin());
    return out;
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }
  void set_zero() { fill(S(0)); }

  template <std::floating_point U>
  Matrix<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](S v) { return static_cast<U>(v); });
    return Matrix<U>(rows_, cols_, std::move(out));
  }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<S> data_;
};

template <std::floating_point S>
std::string shape_str(const Matrix<S>& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

/// Prints shape then rows, full precision; meant for diagnostics.
template <std::floating_point S>
std::ostream& operator<<(std::ostream& os, const Matrix<S>& m) {
  const auto old = os.precision(std::numeric_limits<S>::max_digits10);
  os << shape_str(m) << " [";
  for (std::size_t r = 0; r < m.rows(); ++r) {
    os << (r ? "; " : "");
    for (std::size_t c = 0; c < m.cols(); ++c) os << (c ? " " : "") << m(r, c);
  }
  os.precision(old);
  return os << "]";
}

template <std::floating_point S>
bool all_finite(const Matrix<S>& m) {
  return std::all_of(m.values().begin(), m.values().end(), [](S v) { return std::isfinite(v); });
}

namespace detail {

template <class S>
using RowMajor = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMut = Eigen::Map<RowMajor<S>>;
template <class S>
using MapConst = Eigen::Map<const RowMajor<S>>;

template <class S>
MapConst<S> view(const Matrix<S>& m) {
  return MapConst<S>(m.data(), static_cast<Eigen::Index>(m.rows()),
                     static_cast<Eigen::Index>(m.cols()));
}
template <class S>
MapMut<S> view(Matrix<S>& m) {
  return MapMut<S>(m.data(), static_cast<Eigen::Index>(m.rows()),
                   static_cast<Eigen::Index>(m.cols()));
}

inline void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op) + ": " + detail);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Products. The _nt / _tn variants multiply by a transposed operand without
// materializing it; the add_ forms accumulate into an existing output.

template <std::floating_point S>
Matrix<S> matmul(const Matrix<S>& a, const Matrix<S>& b) {
  detail::require(a.cols() == b.rows(), "matmul",
                  "cannot multiply " + shape_str(a) + " by " + shape_str(b));
  Matrix<S> out(a.rows(), b.cols());
  if (!out.empty() && a.cols() > 0) detail::view(out).noalias() = detail::view(a) * detail::view(b);
  return out;
}

/// a * b^T
template <std::floating_point S>
Matrix<S> matmul_nt(const Matrix<S>& a, const Matrix<S>& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt",
                  "cannot multiply " + shape_str(a) + " by transpose of " + shape_str(b));
  Matrix<S> out(a.rows(), b.rows());
  if (!out.empty() && a.cols() > 0)
    detail::view(out).noalias() = detail::view(a) * detail::view(b).transpose();
  return out;
}

/// out += a^T * b
template <std::floating_point S>
void add_matmul_tn(Matrix<S>& out, const Matrix<S>& a, const Matrix<S>& b) {
  detail::require(a.rows() == b.rows() && out.rows() == a.cols() && out.cols() == b.cols(),
                  "add_matmul_tn",
                  "transpose of " + shape_str(a) + " times " + shape_str(b) + " into " +
                      shape_str(out));
  if (!out.empty() && a.rows() > 0)
    detail::view(out).noalias() += detail::view(a).transpose() * detail::view(b);
}

/// out += a * b^T
template <std::floating_point S>
void add_matmul_nt(Matrix<S>& out, const Matrix<S>& a, const Matrix<S>& b) {
  detail::require(a.cols() == b.cols() && out.rows() == a.rows() && out.cols() == b.rows(),
                  "add_matmul_nt",
                  shape_str(a) + " times transpose of " + shape_str(b) + " into " +
                      shape_str(out));
  if (!out.empty() && a.cols() > 0)
    detail::view(out).noalias() += detail::view(a) * detail::view(b).transpose();
}

/// out += a * b
template <std::floating_point S>
void add_matmul(Matrix<S>& out, const Matrix<S>& a, const Matrix<S>& b) {
  detail::require(a.cols() == b.rows() && out.rows() == a.rows() && out.cols() == b.cols(),
                  "add_matmul",
                  shape_str(a) + " times " + shape_str(b) + " into " + shape_str(out));
  if (!out.empty() && a.cols() > 0)
    detail::view(out).noalias() += detail::view(a) * detail::view(b);
}

// ---------------------------------------------------------------------------
// Entrywise operations.

template <std::floating_point S>
S logistic(S x) noexcept {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

enum class UnaryOp { tanh, logistic };
enum class BinaryOp { add, sub, mul };

template <std::floating_point S>
Matrix<S> elementwise(UnaryOp op, Matrix<S> m) {
  for (S& v : m.values()) v = op == UnaryOp::tanh ? std::tanh(v) : logistic(v);
  return m;
}

template <std::floating_point S>
Matrix<S> elementwise(BinaryOp op, const Matrix<S>& a, const Matrix<S>& b) {
  detail::require(a.same_shape(b), "elementwise", shape_str(a) + " vs " + shape_str(b));
  Matrix<S> out(a.rows(), a.cols());
  auto x = a.values();
  auto y = b.values();
  auto z = out.values();
  for (std::size_t i = 0; i < z.size(); ++i) {
    switch (op) {
      case BinaryOp::add: z[i] = x[i] + y[i]; break;
      case BinaryOp::sub: z[i] = x[i] - y[i]; break;
      case BinaryOp::mul: z[i] = x[i] * y[i]; break;
    }
  }
  return out;
}

template <std::floating_point S>
Matrix<S> add(const Matrix<S>& a, const Matrix<S>& b) { return elementwise(BinaryOp::add, a, b); }
template <std::floating_point S>
Matrix<S> sub(const Matrix<S>& a, const Matrix<S>& b) { return elementwise(BinaryOp::sub, a, b); }
template <std::floating_point S>
Matrix<S> hadamard(const Matrix<S>& a, const Matrix<S>& b) { return elementwise(BinaryOp::mul, a, b); }

/// a += b, same shape.
template <std::floating_point S>
void accumulate(Matrix<S>& a, const Matrix<S>& b) {
  detail::require(a.same_shape(b), "accumulate", shape_str(a) + " vs " + shape_str(b));
  auto x = a.values();
  auto y = b.values();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
}

template <std::floating_point S>
void scale(Matrix<S>& a, S factor) {
  for (S& v : a.values()) v *= factor;
}

/// The one broadcast we allow: a 1 x cols bias added to every row.
template <std::floating_point S>
void add_row_broadcast(Matrix<S>& m, const Matrix<S>& bias) {
  detail::require(bias.rows() == 1 && bias.cols() == m.cols(), "add_row_broadcast",
                  "bias " + shape_str(bias) + " for " + shape_str(m));
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias(0, c);
  }
}

/// Column sums accumulated into a 1 x cols row vector.
template <std::floating_point S>
void add_column_sums(Matrix<S>& out, const Matrix<S>& m) {
  detail::require(out.rows() == 1 && out.cols() == m.cols(), "add_column_sums",
                  shape_str(out) + " for " + shape_str(m));
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out(0, c) += row[c];
  }
}

/// Horizontal concatenation [a | b | ...]; all parts need the same row count.
template <std::floating_point S>
Matrix<S> hconcat(std::span<const Matrix<S>* const> parts) {
  if (parts.empty()) return {};
  const std::size_t rows = parts.front()->rows();
  std::size_t cols = 0;
  for (const auto* p : parts) {
    detail::require(p->rows() == rows, "hconcat", "row counts differ");
    cols += p->cols();
  }
  Matrix<S> out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    S* dst = out.row(r).data();
    for (const auto* p : parts) dst = std::copy_n(p->row(r).data(), p->cols(), dst);
  }
  return out;
}

/// Inverse of hconcat: splits columns into blocks of the given widths.
template <std::floating_point S>
std::vector<Matrix<S>> hsplit(const Matrix<S>& m, std::span<const std::size_t> widths) {
  std::size_t total = 0;
  for (auto w : widths) total += w;
  detail::require(total == m.cols(), "hsplit", "widths do not sum to " + std::to_string(m.cols()));
  std::vector<Matrix<S>> out;
  out.reserve(widths.size());
  for (auto w : widths) out.emplace_back(m.rows(), w);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const S* src = m.row(r).data();
    for (auto& o : out) {
      std::copy_n(src, o.cols(), o.row(r).data());
      src += o.cols();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax.

template <std::floating_point S>
void softmax_inplace(std::span<S> v) {
  if (v.empty()) throw ShapeError("softmax: empty input");
  const S mx = *std::max_element(v.begin(), v.end());
  S sum = 0;
  for (S& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (S& x : v) x /= sum;
}

template <std::floating_point S>
Matrix<S> softmax(const Matrix<S>& logits) {
  detail::require(logits.rows() == 1 && logits.cols() >= 1, "softmax",
                  "expected a non-empty row vector, got " + shape_str(logits));
  Matrix<S> out = logits;
  softmax_inplace(out.row(0));
  return out;
}

/// Row-wise softmax.
template <std::floating_point S>
Matrix<S> softmax_rows(Matrix<S> logits) {
  for (std::size_t r = 0; r < logits.rows(); ++r) softmax_inplace(logits.row(r));
  return logits;
}

/// Given softmax outputs p and dL/dp, returns dL/dlogits row-wise.
template <std::floating_point S>
Matrix<S> softmax_backward(const Matrix<S>& probs, const Matrix<S>& dprobs) {
  detail::require(probs.same_shape(dprobs), "softmax_backward",
                  shape_str(probs) + " vs " + shape_str(dprobs));
  Matrix<S> out(probs.rows(), probs.cols());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    auto p = probs.row(r);
    auto g = dprobs.row(r);
    S dot = 0;
    for (std::size_t c = 0; c < p.size(); ++c) dot += p[c] * g[c];
    auto o = out.row(r);
    for (std::size_t c = 0; c < p.size(); ++c) o[c] = p[c] * (g[c] - dot);
  }
  return out;
}

/// Index of the largest entry; ties go to the lowest index.
template <class Range>
std::size_t argmax(const Range& values) {
  std::size_t best = 0;
  std::size_t i = 0;
  auto it = std::begin(values);
  if (it == std::end(values)) throw std::invalid_argument("argmax of empty range");
  auto best_value = *it;
  for (; it != std::end(values); ++it, ++i) {
    if (*it > best_value) {
      best_value = *it;
      best = i;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

struct GradCheckReport {
  double max_relative_error = 0.0;
  long worst_parameter_index = -1;
  bool passed = true;
  std::string diagnostic;
};

/// Relative error with the denominator floored at 1e-8.
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Compares `analytic` against central differences of `f` around `x`,
/// coordinate by coordinate. `f` must not retain `x`.
template <class F>
  requires std::is_invocable_r_v<long double, F&, const Matrix<double>&>
GradCheckReport finite_difference_check(F&& f, Matrix<double> x, const Matrix<double>& analytic,
                                        double h = 1e-5, double tolerance = 1e-5) {
  // An objective may return long double; differences are then taken at that width.
  using V = std::common_type_t<std::invoke_result_t<F&, const Matrix<double>&>, double>;
  if (!(h > 0)) throw std::invalid_argument("finite_difference_check: step must be positive");
  detail::require(x.same_shape(analytic), "finite_difference_check",
                  "parameters " + shape_str(x) + " vs gradient " + shape_str(analytic));
  GradCheckReport report;
  auto xs = x.values();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double saved = xs[i];
    const double up = saved + h, down = saved - h;
    xs[i] = up;
    const V plus = f(x);
    xs[i] = down;
    const V minus = f(x);
    xs[i] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      report.passed = false;
      report.worst_parameter_index = static_cast<long>(i);
      report.max_relative_error = std::numeric_limits<double>::infinity();
      report.diagnostic = "non-finite function value at coordinate " + std::to_string(i);
      return report;
    }
    const double numeric = static_cast<double>((plus - minus) / static_cast<V>(up - down));
    const double err = relative_error(analytic.values()[i], numeric);
    if (err > report.max_relative_error || report.worst_parameter_index < 0) {
      report.max_relative_error = err;
      report.worst_parameter_index = static_cast<long>(i);
    }
  }
  report.passed = report.max_relative_error <= tolerance;
  if (!report.passed) {
    std::ostringstream os;
    os << "max relative error " << report.max_relative_error << " at coordinate "
       << report.worst_parameter_index;
    report.diagnostic = os.str();
  }
  return report;
}

}  // namespace mmlstm
