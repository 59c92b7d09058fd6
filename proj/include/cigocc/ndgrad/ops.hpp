#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cigocc/ndgrad/tensor.hpp"

namespace cigocc::nd {

enum class Pointwise { add, sub, mul, div };

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMatrix = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMapMatrix = Eigen::Map<const RowMatrix<T>>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
}

inline void require_axis(std::size_t axis, std::size_t rank, const char* op) {
  if (axis >= rank) throw ShapeError(std::string(op) + ": axis out of range");
}

// outer * axis * inner decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> elementwise(Pointwise kind, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "elementwise");
  const std::size_t n = a.size();
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(n);
  switch (kind) {
    case Pointwise::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
      break;
    case Pointwise::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
      break;
    case Pointwise::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
      break;
    case Pointwise::div:
      for (std::size_t i = 0; i < n; ++i) {
        if (y[i] == T(0)) throw NumericError("div: division by zero");
        out[i] = x[i] / y[i];
      }
      break;
  }
  return Tape<T>::active().record(
      a.shape(), std::move(out), {a, b},
      [kind, a, b](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        auto x = a.data();
        auto y = b.data();
        const std::size_t n = g.size();
        if (auto* ga = grads[0]) {
          auto& d = *ga;
          switch (kind) {
            case Pointwise::add:
            case Pointwise::sub:
              for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
              break;
            case Pointwise::mul:
              for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * y[i];
              break;
            case Pointwise::div:
              for (std::size_t i = 0; i < n; ++i) d[i] += g[i] / y[i];
              break;
          }
        }
        if (auto* gb = grads[1]) {
          auto& d = *gb;
          switch (kind) {
            case Pointwise::add:
              for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
              break;
            case Pointwise::sub:
              for (std::size_t i = 0; i < n; ++i) d[i] -= g[i];
              break;
            case Pointwise::mul:
              for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * x[i];
              break;
            case Pointwise::div:
              for (std::size_t i = 0; i < n; ++i) d[i] -= g[i] * x[i] / (y[i] * y[i]);
              break;
          }
        }
      });
}

template <class T>
Tensor<T> elementwise(Pointwise kind, const Tensor<T>& a, T s) {
  const std::size_t n = a.size();
  auto x = a.data();
  if (kind == Pointwise::div && s == T(0)) throw NumericError("div: division by zero");
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case Pointwise::add: out[i] = x[i] + s; break;
      case Pointwise::sub: out[i] = x[i] - s; break;
      case Pointwise::mul: out[i] = x[i] * s; break;
      case Pointwise::div: out[i] = x[i] / s; break;
    }
  }
  const T scale = kind == Pointwise::mul ? s : kind == Pointwise::div ? T(1) / s : T(1);
  return Tape<T>::active().record(
      a.shape(), std::move(out), {a},
      [scale](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        auto& d = *grads[0];
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * scale;
      });
}

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Pointwise::add, a, b); }
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Pointwise::sub, a, b); }
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Pointwise::mul, a, b); }
template <class T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Pointwise::div, a, b); }
template <class T> Tensor<T> add(const Tensor<T>& a, T s) { return elementwise(Pointwise::add, a, s); }
template <class T> Tensor<T> mul(const Tensor<T>& a, T s) { return elementwise(Pointwise::mul, a, s); }

namespace detail {

// Unary op with derivative expressed through input x and output y.
template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  auto y = std::make_shared<std::vector<T>>(out);
  return Tape<T>::active().record(
      a.shape(), std::move(out), {a},
      [a, y, deriv](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        auto x = a.data();
        auto& d = *grads[0];
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * deriv(x[i], (*y)[i]);
      });
}

}  // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

/// Natural log; any non-positive input is an error rather than -inf/NaN.
template <class T>
Tensor<T> log(const Tensor<T>& a) {
  for (T v : a.data()) {
    if (!(v > T(0))) throw NumericError("log: non-positive input");
  }
  return detail::unary(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

/// Clamps into [lo, hi]; the gradient is passed through only strictly inside.
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return detail::unary(
      a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a,
      [](T x) {
        return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      },
      [](T, T y) { return y * (T(1) - y); });
}

/// x * sigmoid(x): a smooth ReLU substitute with a continuous derivative.
template <class T>
Tensor<T> silu(const Tensor<T>& a) {
  auto sig = [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); };
  return detail::unary(
      a, [sig](T x) { return x * sig(x); },
      [sig](T x, T) {
        const T s = sig(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return Tape<T>::active().record(
      {1}, {acc}, {a}, [](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        for (T& d : *grads[0]) d += g[0];
      });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return mul(sum(a), T(1) / static_cast<T>(a.size()));
}

/// Dot product of two same-shape tensors, reduced to a scalar.
template <class T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
  return sum(mul(a, b));
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<T> out(static_cast<std::size_t>(m * n));
  detail::MapMatrix<T>(out.data(), m, n).noalias() =
      detail::ConstMapMatrix<T>(a.data().data(), m, k) * detail::ConstMapMatrix<T>(b.data().data(), k, n);
  return Tape<T>::active().record(
      {a.dim(0), b.dim(1)}, std::move(out), {a, b},
      [a, b, m, k, n](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        detail::ConstMapMatrix<T> G(g.data(), m, n);
        if (auto* ga = grads[0]) {
          detail::MapMatrix<T>(ga->data(), m, k).noalias() +=
              G * detail::ConstMapMatrix<T>(b.data().data(), k, n).transpose();
        }
        if (auto* gb = grads[1]) {
          detail::MapMatrix<T>(gb->data(), k, n).noalias() +=
              detail::ConstMapMatrix<T>(a.data().data(), m, k).transpose() * G;
        }
      });
}

/// x[N x C] + bias[C] added to every row.
template <class T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 2 || bias.size() != x.dim(1)) {
    throw ShapeError("add_row: bias " + to_string(bias.shape()) + " for " + to_string(x.shape()));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(x.data().begin(), x.data().end());
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  return Tape<T>::active().record(
      x.shape(), std::move(out), {x, bias},
      [rows, cols](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        if (auto* gx = grads[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        if (auto* gb = grads[1])
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += g[r * cols + c];
      });
}

/// Affine map of rows: x[N x in] * weight[in x out] + bias[out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add_row(matmul(x, weight), bias);
}

// ---------------------------------------------------------------------------
// Softmax

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::require_axis(axis, x.rank(), "softmax");
  const auto s = detail::split_at(x.shape(), axis);
  auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, in[base + e * s.inner]);
      T total = 0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const T v = std::exp(in[base + e * s.inner] - mx);
        out[base + e * s.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= total;
    }
  }
  auto y = std::make_shared<std::vector<T>>(out);
  return Tape<T>::active().record(
      x.shape(), std::move(out), {x},
      [s, y](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        auto& d = *grads[0];
        const auto& p = *y;
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            T gp = 0;
            for (std::size_t e = 0; e < s.extent; ++e) gp += g[base + e * s.inner] * p[base + e * s.inner];
            for (std::size_t e = 0; e < s.extent; ++e) {
              const std::size_t j = base + e * s.inner;
              d[j] += p[j] * (g[j] - gp);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  return Tape<T>::active().record(
      std::move(shape), std::vector<T>(x.data().begin(), x.data().end()), {x},
      [](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        auto& d = *grads[0];
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      });
}

/// 2-D transpose.
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects a matrix, got " + to_string(x.shape()));
  const auto r = static_cast<Eigen::Index>(x.dim(0));
  const auto c = static_cast<Eigen::Index>(x.dim(1));
  std::vector<T> out(x.size());
  detail::MapMatrix<T>(out.data(), c, r) = detail::ConstMapMatrix<T>(x.data().data(), r, c).transpose();
  return Tape<T>::active().record(
      {x.dim(1), x.dim(0)}, std::move(out), {x},
      [r, c](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        detail::MapMatrix<T>((*grads[0]).data(), r, c) += detail::ConstMapMatrix<T>(g.data(), c, r).transpose();
      });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  detail::require_axis(axis, x.rank(), "slice");
  if (begin >= end || end > x.dim(axis)) throw ShapeError("slice: bad range");
  const auto s = detail::split_at(x.shape(), axis);
  const std::size_t len = end - begin;
  Shape shape = x.shape();
  shape[axis] = len;
  std::vector<T> out(s.outer * len * s.inner);
  auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((o * s.extent + begin) * s.inner), len * s.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner));
  }
  return Tape<T>::active().record(
      std::move(shape), std::move(out), {x},
      [s, begin, len](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        auto& d = *grads[0];
        for (std::size_t o = 0; o < s.outer; ++o) {
          const std::size_t src = o * len * s.inner;
          const std::size_t dst = (o * s.extent + begin) * s.inner;
          for (std::size_t i = 0; i < len * s.inner; ++i) d[dst + i] += g[src + i];
        }
      });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  detail::require_axis(axis, parts[0].rank(), "concat");
  Shape shape = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size()) throw ShapeError("concat: rank mismatch");
    probe[axis] = shape[axis];
    if (probe != shape) throw ShapeError("concat: shape mismatch " + to_string(p.shape()));
    total += p.dim(axis);
  }
  shape[axis] = total;
  const auto s = detail::split_at(shape, axis);
  std::vector<T> out(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    const std::size_t len = p.dim(axis);
    auto in = p.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner), len * s.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + at) * s.inner));
    }
    at += len;
  }
  std::vector<std::size_t> lens;
  for (const auto& p : parts) lens.push_back(p.dim(axis));
  return Tape<T>::active().record(
      std::move(shape), std::move(out), parts,
      [s, total, offsets, lens](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        for (std::size_t k = 0; k < grads.size(); ++k) {
          if (!grads[k]) continue;
          auto& d = *grads[k];
          const std::size_t len = lens[k];
          for (std::size_t o = 0; o < s.outer; ++o) {
            const std::size_t src = (o * total + offsets[k]) * s.inner;
            const std::size_t dst = o * len * s.inner;
            for (std::size_t i = 0; i < len * s.inner; ++i) d[dst + i] += g[src + i];
          }
        }
      });
}

/// Rows idx[i] of x[N x C].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> idx) {
  if (x.rank() != 2) throw ShapeError("gather_rows expects a matrix");
  if (idx.empty()) throw ShapeError("gather_rows: empty index set");
  const std::size_t cols = x.dim(1);
  std::vector<T> out(idx.size() * cols);
  auto in = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.dim(0)) throw ShapeError("gather_rows: index out of range");
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(idx[i] * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(i * cols));
  }
  std::vector<std::size_t> rows(idx.begin(), idx.end());
  return Tape<T>::active().record(
      {idx.size(), cols}, std::move(out), {x},
      [rows, cols](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        auto& d = *grads[0];
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t c = 0; c < cols; ++c) d[rows[i] * cols + c] += g[i * cols + c];
      });
}

/// Builds a [count x C] matrix whose row idx[i] is x row i; every other row
/// is `fill` (a length-C vector). Indices must be distinct.
template <class T>
Tensor<T> scatter_rows(const Tensor<T>& x, std::span<const std::size_t> idx, std::size_t count,
                       const Tensor<T>& fill) {
  const std::size_t cols = fill.size();
  if (x.rank() != 2 || x.dim(0) != idx.size() || x.dim(1) != cols) {
    throw ShapeError("scatter_rows: " + to_string(x.shape()) + " rows vs " + std::to_string(idx.size()) +
                     " indices, fill width " + std::to_string(cols));
  }
  std::vector<char> taken(count, 0);
  for (std::size_t i : idx) {
    if (i >= count) throw ShapeError("scatter_rows: index out of range");
    if (taken[i]) throw ShapeError("scatter_rows: duplicate index");
    taken[i] = 1;
  }
  std::vector<T> out(count * cols);
  auto f = fill.data();
  for (std::size_t r = 0; r < count; ++r)
    if (!taken[r]) std::copy(f.begin(), f.end(), out.begin() + static_cast<std::ptrdiff_t>(r * cols));
  auto in = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(i * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(idx[i] * cols));
  std::vector<std::size_t> rows(idx.begin(), idx.end());
  return Tape<T>::active().record(
      {count, cols}, std::move(out), {x, fill},
      [rows, cols, taken = std::move(taken)](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        if (auto* gx = grads[0])
          for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t c = 0; c < cols; ++c) (*gx)[i * cols + c] += g[rows[i] * cols + c];
        if (auto* gf = grads[1])
          for (std::size_t r = 0; r < taken.size(); ++r)
            if (!taken[r])
              for (std::size_t c = 0; c < cols; ++c) (*gf)[c] += g[r * cols + c];
      });
}

/// out[n, c] = sum_k weights[n, k] * values[n, k, c].
template <class T>
Tensor<T> weighted_pool(const Tensor<T>& values, const Tensor<T>& weights) {
  if (values.rank() != 3 || weights.rank() != 2 || values.dim(0) != weights.dim(0) ||
      values.dim(1) != weights.dim(1)) {
    throw ShapeError("weighted_pool: values " + to_string(values.shape()) + " weights " +
                     to_string(weights.shape()));
  }
  const std::size_t n = values.dim(0), k = values.dim(1), c = values.dim(2);
  auto v = values.data();
  auto w = weights.data();
  std::vector<T> out(n * c, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const T wij = w[i * k + j];
      const T* row = v.data() + (i * k + j) * c;
      T* o = out.data() + i * c;
      for (std::size_t q = 0; q < c; ++q) o[q] += wij * row[q];
    }
  return Tape<T>::active().record(
      {n, c}, std::move(out), {values, weights},
      [values, weights, n, k, c](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        auto v = values.data();
        auto w = weights.data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const T* gi = g.data() + i * c;
            if (auto* gv = grads[0]) {
              T* d = gv->data() + (i * k + j) * c;
              const T wij = w[i * k + j];
              for (std::size_t q = 0; q < c; ++q) d[q] += wij * gi[q];
            }
            if (auto* gw = grads[1]) {
              const T* row = v.data() + (i * k + j) * c;
              T acc = 0;
              for (std::size_t q = 0; q < c; ++q) acc += gi[q] * row[q];
              (*gw)[i * k + j] += acc;
            }
          }
      });
}

/// (C, S...) channel-first volume to (S, C) token rows, and back.
template <class T>
Tensor<T> to_tokens(const Tensor<T>& volume) {
  const std::size_t c = volume.dim(0);
  return transpose(reshape(volume, {c, volume.size() / c}));
}

template <class T>
Tensor<T> from_tokens(const Tensor<T>& tokens, const Shape& spatial) {
  Shape shape{tokens.dim(1)};
  shape.insert(shape.end(), spatial.begin(), spatial.end());
  return reshape(transpose(tokens), shape);
}

}  // namespace cigocc::nd
