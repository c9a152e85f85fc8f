#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "unlearn/error.hpp"

namespace unlearn {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << 'x';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major tensor. Value type: copies are deep.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, std::vector<T>{v}); }

  static BasicTensor matrix(std::size_t rows, std::size_t cols, std::vector<T> data) {
    return BasicTensor(Shape{rows, cols}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool is_scalar() const { return data_.size() == 1; }

  // Row/column counts, treating rank-1 tensors as a single row.
  std::size_t rows() const { return shape_.size() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  T item() const {
    if (data_.size() != 1) {
      throw DimensionError("item() on non-scalar tensor " + shape_str(shape_));
    }
    return data_[0];
  }

  BasicTensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (auto d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

// Bitwise comparison; unlike operator== this distinguishes -0 and +0 and
// treats identical NaN payloads as equal.
template <typename T>
bool bit_identical(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(), [](T x, T y) {
    return std::memcmp(&x, &y, sizeof(T)) == 0;
  });
}

template <typename T>
const BasicTensor<T>& require_finite(const BasicTensor<T>& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  return t;
}

namespace detail {

template <typename T>
void require_matrix(const BasicTensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
void require_row_vector(const BasicTensor<T>& v, std::size_t n, const char* op) {
  const bool ok = (v.rank() == 1 && v.shape()[0] == n) ||
                  (v.rank() == 2 && v.shape()[0] == 1 && v.shape()[1] == n);
  if (!ok) {
    throw DimensionError(std::string(op) + ": expected a row vector of length " + std::to_string(n) +
                         ", got " + shape_str(v.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Kernels. Every reduction runs sequentially in ascending index order so
// results are bit-reproducible.
// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  BasicTensor<T> out(Shape{m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// a[m×k] · b[n×k]ᵀ -> [m×n]
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  BasicTensor<T> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data().data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.data().data() + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out.at(i, j) = acc;
    }
  }
  return out;
}

// a[k×m]ᵀ · b[k×n] -> [m×n]
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul_tn");
  detail::require_matrix(b, "matmul_tn");
  const std::size_t k = a.shape()[0], m = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul_tn: inner dimensions differ, " + shape_str(a.shape()) + "^T x " +
                         shape_str(b.shape()));
  }
  BasicTensor<T> out(Shape{m, n});
  T* po = out.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a.data().data() + p * m;
    const T* brow = b.data().data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  BasicTensor<T> out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

template <typename T, typename F>
BasicTensor<T> zip_with(const BasicTensor<T>& a, const BasicTensor<T>& b, F f, const char* op) {
  detail::require_same_shape(a, b, op);
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <typename T, typename F>
BasicTensor<T> map(const BasicTensor<T>& a, F f) {
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
  return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip_with(a, b, [](T x, T y) { return x + y; }, "add");
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip_with(a, b, [](T x, T y) { return x - y; }, "sub");
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip_with(a, b, [](T x, T y) { return x * y; }, "mul");
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  return map(a, [s](T x) { return x * s; });
}

// x[m×n] + row[n], the row broadcast down every row.
template <typename T>
BasicTensor<T> add_row(const BasicTensor<T>& x, const BasicTensor<T>& row) {
  detail::require_matrix(x, "add_row");
  detail::require_row_vector(row, x.cols(), "add_row");
  BasicTensor<T> out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto o = out.row(r);
    for (std::size_t c = 0; c < o.size(); ++c) o[c] += row[c];
  }
  return out;
}

template <typename T>
T sum(const BasicTensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return acc;
}

template <typename T>
T mean(const BasicTensor<T>& a) {
  return sum(a) / static_cast<T>(a.numel());
}

// Column sums of a matrix, i.e. the reduction over rows.
template <typename T>
BasicTensor<T> sum_rows(const BasicTensor<T>& a) {
  detail::require_matrix(a, "sum_rows");
  BasicTensor<T> out(Shape{a.cols()});
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto row = a.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out[c] += row[c];
  }
  return out;
}

// tanh approximation of GELU.
template <typename T>
T gelu_scalar(T x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(kC * (x + kA * x * x * x)));
}

template <typename T>
T gelu_derivative(T x) {
  constexpr T kC = T(0.7978845608028654);
  constexpr T kA = T(0.044715);
  const T u = kC * (x + kA * x * x * x);
  const T t = std::tanh(u);
  const T du = kC * (T(1) + T(3) * kA * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  return map(x, [](T v) { return gelu_scalar(v); });
}

namespace detail {

// Row-wise softmax over the first `width(r)` entries of each row; the
// remaining entries are set to zero.
template <typename T, typename Width>
BasicTensor<T> softmax_prefix_rows(const BasicTensor<T>& x, Width width) {
  require_matrix(x, "softmax");
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    const std::size_t w = width(r);
    T mx = in[0];
    for (std::size_t c = 1; c < w; ++c) mx = std::max(mx, in[c]);
    T total = 0;
    for (std::size_t c = 0; c < w; ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (std::size_t c = 0; c < w; ++c) o[c] /= total;
  }
  return out;
}

}  // namespace detail

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  const std::size_t n = x.cols();
  return detail::softmax_prefix_rows(x, [n](std::size_t) { return n; });
}

// Softmax where row i only attends to columns 0..i. Requires a square matrix.
template <typename T>
BasicTensor<T> causal_softmax_rows(const BasicTensor<T>& x) {
  detail::require_matrix(x, "causal_softmax_rows");
  if (x.rows() != x.cols()) {
    throw DimensionError("causal_softmax_rows: expected a square matrix, got " + shape_str(x.shape()));
  }
  return detail::softmax_prefix_rows(x, [](std::size_t r) { return r + 1; });
}

template <typename T>
BasicTensor<T> log_softmax_rows(const BasicTensor<T>& x) {
  detail::require_matrix(x, "log_softmax_rows");
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    T mx = in[0];
    for (T v : in) mx = std::max(mx, v);
    T total = 0;
    for (T v : in) total += std::exp(v - mx);
    const T lse = mx + std::log(total);
    for (std::size_t c = 0; c < in.size(); ++c) o[c] = in[c] - lse;
  }
  return out;
}

namespace detail {

template <typename T>
void check_targets(const BasicTensor<T>& logits, std::span<const std::int32_t> targets, const char* op) {
  require_matrix(logits, op);
  if (targets.size() != logits.rows()) {
    throw DimensionError(std::string(op) + ": " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(logits.rows()) + " rows");
  }
  for (auto t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= logits.cols()) {
      throw DimensionError(std::string(op) + ": target id " + std::to_string(t) +
                           " outside vocabulary of size " + std::to_string(logits.cols()));
    }
  }
}

}  // namespace detail

// Mean over rows of -log softmax(logits)[r, targets[r]].
template <typename T>
T cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets) {
  detail::check_targets(logits, targets, "cross_entropy");
  const auto ls = log_softmax_rows(logits);
  T acc = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) acc -= ls.at(r, static_cast<std::size_t>(targets[r]));
  return acc / static_cast<T>(targets.size());
}

template <typename T>
struct LayerNormResult {
  BasicTensor<T> out;
  BasicTensor<T> normalized;  // (x - mean) * rstd
  std::vector<T> rstd;        // per row
};

template <typename T>
LayerNormResult<T> layer_norm_forward(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                                      const BasicTensor<T>& bias, T eps) {
  detail::require_matrix(x, "layer_norm");
  const std::size_t n = x.cols();
  detail::require_row_vector(gain, n, "layer_norm gain");
  detail::require_row_vector(bias, n, "layer_norm bias");
  LayerNormResult<T> res{BasicTensor<T>(x.shape()), BasicTensor<T>(x.shape()), std::vector<T>(x.rows())};
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    T mu = 0;
    for (T v : in) mu += v;
    mu /= static_cast<T>(n);
    T var = 0;
    for (T v : in) var += (v - mu) * (v - mu);
    var /= static_cast<T>(n);
    const T rstd = T(1) / std::sqrt(var + eps);
    res.rstd[r] = rstd;
    auto xn = res.normalized.row(r);
    auto o = res.out.row(r);
    for (std::size_t c = 0; c < n; ++c) {
      xn[c] = (in[c] - mu) * rstd;
      o[c] = xn[c] * gain[c] + bias[c];
    }
  }
  return res;
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias,
                          T eps = T(1e-5)) {
  return layer_norm_forward(x, gain, bias, eps).out;
}

// Row gather: out[t] = table[ids[t]].
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const std::int32_t> ids) {
  detail::require_matrix(table, "embedding");
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  const std::size_t d = table.cols();
  BasicTensor<T> out(Shape{ids.size(), d});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const auto id = ids[t];
    if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) {
      throw DimensionError("embedding: id " + std::to_string(id) + " outside table of " +
                           std::to_string(table.rows()) + " rows");
    }
    auto src = table.row(static_cast<std::size_t>(id));
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "slice_cols");
  if (begin >= end || end > x.cols()) {
    throw DimensionError("slice_cols: bad range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") for " + shape_str(x.shape()));
  }
  BasicTensor<T> out(Shape{x.rows(), end - begin});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto src = x.row(r).subspan(begin, end - begin);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "slice_rows");
  if (begin >= end || end > x.rows()) {
    throw DimensionError("slice_rows: bad range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") for " + shape_str(x.shape()));
  }
  const std::size_t n = x.cols();
  std::vector<T> data(x.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                      x.data().begin() + static_cast<std::ptrdiff_t>(end * n));
  return BasicTensor<T>(Shape{end - begin, n}, std::move(data));
}

template <typename T>
BasicTensor<T> concat_cols(std::span<const BasicTensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
    n += p.cols();
  }
  BasicTensor<T> out(Shape{m, n});
  for (std::size_t r = 0; r < m; ++r) {
    auto o = out.row(r).begin();
    for (const auto& p : parts) o = std::copy(p.row(r).begin(), p.row(r).end(), o);
  }
  return out;
}

}  // namespace unlearn
