#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <optional>
#include <vector>

#include "cigocc/ndgrad/ops.hpp"

namespace cigocc::nd {

namespace detail {

// Rank-2 inputs are handled as rank-3 volumes with a unit trailing axis.
struct ConvGeometry {
  std::size_t cin = 0, cout = 0;
  std::array<std::size_t, 3> in{1, 1, 1}, kernel{1, 1, 1}, out{1, 1, 1};
  std::array<std::size_t, 3> stride{1, 1, 1}, pad{0, 0, 0};
  std::size_t rank = 3;

  std::size_t kvol() const { return kernel[0] * kernel[1] * kernel[2]; }
  std::size_t in_vol() const { return in[0] * in[1] * in[2]; }
  std::size_t out_vol() const { return out[0] * out[1] * out[2]; }
  bool pointwise() const {
    return kvol() == 1 && stride == std::array<std::size_t, 3>{1, 1, 1} &&
           pad == std::array<std::size_t, 3>{0, 0, 0};
  }

  Shape out_shape() const {
    Shape s{cout};
    for (std::size_t a = 0; a < rank; ++a) s.push_back(out[a]);
    return s;
  }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t padding,
                                  std::size_t rank) {
  if (rank != 2 && rank != 3) throw ShapeError("conv_nd: rank must be 2 or 3");
  if (x.size() != rank + 1 || w.size() != rank + 2) {
    throw ShapeError("conv_nd: input " + to_string(x) + " / kernel " + to_string(w) + " do not match rank " +
                     std::to_string(rank));
  }
  if (w[1] != x[0]) {
    throw ShapeError("conv_nd: kernel expects " + std::to_string(w[1]) + " input channels, got " +
                     std::to_string(x[0]));
  }
  if (stride == 0) throw ShapeError("conv_nd: stride must be positive");
  ConvGeometry g;
  g.rank = rank;
  g.cin = x[0];
  g.cout = w[0];
  for (std::size_t a = 0; a < rank; ++a) {
    g.in[a] = x[a + 1];
    g.kernel[a] = w[a + 2];
    g.stride[a] = stride;
    g.pad[a] = padding;
    if (g.in[a] + 2 * padding < g.kernel[a]) throw ShapeError("conv_nd: kernel larger than padded input");
    g.out[a] = (g.in[a] + 2 * padding - g.kernel[a]) / stride + 1;
  }
  return g;
}

// Output voxels are processed in slabs of whole leading-axis slices so the
// unfolded patch matrix stays cache-sized.
inline std::size_t slab_slices(const ConvGeometry& g) {
  const std::size_t per_slab = g.cin * g.kvol() * g.out[1] * g.out[2];
  return std::clamp<std::size_t>((std::size_t{1} << 17) / std::max<std::size_t>(1, per_slab), 1, g.out[0]);
}

// Output positions oc along the innermost axis whose input index
// oc * stride + k - pad falls inside [0, n).
struct ValidRange {
  std::size_t lo, hi;
};

inline ValidRange valid_range(std::size_t out, std::size_t n, std::size_t stride, std::size_t k, std::size_t pad) {
  std::size_t lo = 0;
  if (pad > k) lo = (pad - k + stride - 1) / stride;
  // largest oc with oc * stride + k - pad <= n - 1
  const std::ptrdiff_t top = static_cast<std::ptrdiff_t>(n) - 1 + static_cast<std::ptrdiff_t>(pad) - static_cast<std::ptrdiff_t>(k);
  std::size_t hi = top < 0 ? 0 : std::min(out, static_cast<std::size_t>(top) / stride + 1);
  if (hi < lo) hi = lo;
  return {std::min(lo, out), std::min(hi, out)};
}

// cols[(ci, ka, kb, kc), (oa, ob, oc)] for oa in [a0, a1).
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* cols, std::size_t a0, std::size_t a1) {
  const std::size_t bov = (a1 - a0) * g.out[1] * g.out[2];
  const std::size_t oz = g.out[2], sz = g.stride[2];
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const T* xc = x + ci * g.in_vol();
    for (std::size_t ka = 0; ka < g.kernel[0]; ++ka)
      for (std::size_t kb = 0; kb < g.kernel[1]; ++kb)
        for (std::size_t kc = 0; kc < g.kernel[2]; ++kc, ++row) {
          const auto r = valid_range(oz, g.in[2], sz, kc, g.pad[2]);
          T* dst = cols + row * bov;
          for (std::size_t oa = a0; oa < a1; ++oa) {
            const auto ia = static_cast<std::ptrdiff_t>(oa * g.stride[0] + ka) - static_cast<std::ptrdiff_t>(g.pad[0]);
            const bool va = ia >= 0 && ia < static_cast<std::ptrdiff_t>(g.in[0]);
            for (std::size_t ob = 0; ob < g.out[1]; ++ob, dst += oz) {
              const auto ib = static_cast<std::ptrdiff_t>(ob * g.stride[1] + kb) - static_cast<std::ptrdiff_t>(g.pad[1]);
              if (!va || ib < 0 || ib >= static_cast<std::ptrdiff_t>(g.in[1])) {
                std::fill_n(dst, oz, T(0));
                continue;
              }
              const T* line = xc + (static_cast<std::size_t>(ia) * g.in[1] + static_cast<std::size_t>(ib)) * g.in[2] +
                              kc - g.pad[2];  // indexed by oc * sz, only inside [lo, hi)
              std::fill_n(dst, r.lo, T(0));
              if (sz == 1) {
                std::copy(line + r.lo, line + r.hi, dst + r.lo);
              } else {
                for (std::size_t oc = r.lo; oc < r.hi; ++oc) dst[oc] = line[oc * sz];
              }
              std::fill(dst + r.hi, dst + oz, T(0));
            }
          }
        }
  }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* cols, T* dx, std::size_t a0, std::size_t a1) {
  const std::size_t bov = (a1 - a0) * g.out[1] * g.out[2];
  const std::size_t oz = g.out[2], sz = g.stride[2];
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    T* xc = dx + ci * g.in_vol();
    for (std::size_t ka = 0; ka < g.kernel[0]; ++ka)
      for (std::size_t kb = 0; kb < g.kernel[1]; ++kb)
        for (std::size_t kc = 0; kc < g.kernel[2]; ++kc, ++row) {
          const auto r = valid_range(oz, g.in[2], sz, kc, g.pad[2]);
          const T* src = cols + row * bov;
          for (std::size_t oa = a0; oa < a1; ++oa) {
            const auto ia = static_cast<std::ptrdiff_t>(oa * g.stride[0] + ka) - static_cast<std::ptrdiff_t>(g.pad[0]);
            const bool va = ia >= 0 && ia < static_cast<std::ptrdiff_t>(g.in[0]);
            for (std::size_t ob = 0; ob < g.out[1]; ++ob, src += oz) {
              const auto ib = static_cast<std::ptrdiff_t>(ob * g.stride[1] + kb) - static_cast<std::ptrdiff_t>(g.pad[1]);
              if (!va || ib < 0 || ib >= static_cast<std::ptrdiff_t>(g.in[1])) continue;
              T* line = xc + (static_cast<std::size_t>(ia) * g.in[1] + static_cast<std::size_t>(ib)) * g.in[2] +
                        kc - g.pad[2];
              for (std::size_t oc = r.lo; oc < r.hi; ++oc) line[oc * sz] += src[oc];
            }
          }
        }
  }
}

template <class T>
using ColMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
template <class T>
using StridedCols = Eigen::Map<ColMatrix<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedCols = Eigen::Map<const ColMatrix<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstCols = Eigen::Map<const ColMatrix<T>>;

}  // namespace detail

/// Cross-correlation with zero padding over channel-first input (Cin, S...)
/// and kernel (Cout, Cin, K...). Output spatial size per axis is
/// floor((in + 2*padding - k) / stride) + 1.
template <class T>
Tensor<T> conv_nd(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                  std::size_t padding, std::size_t rank) {
  const auto g = detail::conv_geometry(x.shape(), kernel.shape(), stride, padding, rank);
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != g.cout) throw ShapeError("conv_nd: bias length must equal output channels");

  const auto rows = static_cast<Eigen::Index>(g.cin * g.kvol());
  const auto ov = static_cast<Eigen::Index>(g.out_vol());
  const auto co = static_cast<Eigen::Index>(g.cout);
  const std::size_t slab = detail::slab_slices(g), per_slice = g.out[1] * g.out[2];

  // Products are formed transposed, (voxels x rows) * (rows x cout), which
  // keeps the long voxel axis as the GEMM's row dimension.
  std::vector<T> out(static_cast<std::size_t>(co * ov));
  const detail::ConstCols<T> Wt(kernel.data().data(), rows, co);
  if (g.pointwise()) {
    detail::StridedCols<T>(out.data(), ov, co, Eigen::OuterStride<>(ov)).noalias() =
        detail::ConstCols<T>(x.data().data(), ov, rows) * Wt;
  } else {
    std::vector<T> cols(static_cast<std::size_t>(rows) * slab * per_slice);
    for (std::size_t a0 = 0; a0 < g.out[0]; a0 += slab) {
      const std::size_t a1 = std::min(g.out[0], a0 + slab);
      const auto bov = static_cast<Eigen::Index>((a1 - a0) * per_slice);
      detail::im2col(g, x.data().data(), cols.data(), a0, a1);
      detail::StridedCols<T>(out.data() + a0 * per_slice, bov, co, Eigen::OuterStride<>(ov)).noalias() =
          detail::ConstCols<T>(cols.data(), bov, rows) * Wt;
    }
  }
  if (has_bias) {
    auto b = bias.data();
    for (std::size_t c = 0; c < g.cout; ++c) {
      T* row = out.data() + c * static_cast<std::size_t>(ov);
      for (Eigen::Index i = 0; i < ov; ++i) row[i] += b[c];
    }
  }

  std::vector<Tensor<T>> inputs{x, kernel};
  if (has_bias) inputs.push_back(bias);
  return Tape<T>::active().record(
      g.out_shape(), std::move(out), std::move(inputs),
      [g, x, kernel, rows, ov, co, has_bias, slab, per_slice](std::span<const T> grad,
                                                              std::span<std::vector<T>* const> grads) {
        if (has_bias && grads[2]) {
          auto& gb = *grads[2];
          for (std::size_t c = 0; c < g.cout; ++c) {
            const T* row = grad.data() + c * static_cast<std::size_t>(ov);
            T acc = 0;
            for (Eigen::Index i = 0; i < ov; ++i) acc += row[i];
            gb[c] += acc;
          }
        }
        auto* gw = grads[1];
        auto* gx = grads[0];
        if (!gw && !gx) return;
        const detail::ConstCols<T> Wt(kernel.data().data(), rows, co);
        if (g.pointwise()) {
          const detail::ConstStridedCols<T> Gt(grad.data(), ov, co, Eigen::OuterStride<>(ov));
          if (gw) {
            detail::StridedCols<T>(gw->data(), rows, co, Eigen::OuterStride<>(rows)).noalias() +=
                detail::ConstCols<T>(x.data().data(), ov, rows).transpose() * Gt;
          }
          if (gx) {
            detail::StridedCols<T>(gx->data(), ov, rows, Eigen::OuterStride<>(ov)).noalias() += Gt * Wt.transpose();
          }
          return;
        }
        std::vector<T> cols(static_cast<std::size_t>(rows) * slab * per_slice);
        std::vector<T> dcols(gx ? cols.size() : 0);
        for (std::size_t a0 = 0; a0 < g.out[0]; a0 += slab) {
          const std::size_t a1 = std::min(g.out[0], a0 + slab);
          const auto bov = static_cast<Eigen::Index>((a1 - a0) * per_slice);
          const detail::ConstStridedCols<T> Gt(grad.data() + a0 * per_slice, bov, co, Eigen::OuterStride<>(ov));
          if (gw) {
            detail::im2col(g, x.data().data(), cols.data(), a0, a1);
            detail::StridedCols<T>(gw->data(), rows, co, Eigen::OuterStride<>(rows)).noalias() +=
                detail::ConstCols<T>(cols.data(), bov, rows).transpose() * Gt;
          }
          if (gx) {
            detail::StridedCols<T>(dcols.data(), bov, rows, Eigen::OuterStride<>(bov)).noalias() = Gt * Wt.transpose();
            detail::col2im_add(g, dcols.data(), gx->data(), a0, a1);
          }
        }
      });
}

template <class T>
Tensor<T> conv_nd(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t padding,
                  std::size_t rank) {
  return conv_nd(x, kernel, Tensor<T>{}, stride, padding, rank);
}

/// Nearest-neighbour resize of a channel-first (C, S...) tensor to the given
/// spatial size; source index is floor(i * in / out) per axis.
template <class T>
Tensor<T> resize_nearest(const Tensor<T>& x, const Shape& spatial) {
  if (x.rank() != spatial.size() + 1 || spatial.empty() || spatial.size() > 3) {
    throw ShapeError("resize_nearest: target " + to_string(spatial) + " for input " + to_string(x.shape()));
  }
  std::array<std::size_t, 3> in{1, 1, 1}, out{1, 1, 1};
  for (std::size_t a = 0; a < spatial.size(); ++a) {
    in[a] = x.dim(a + 1);
    out[a] = spatial[a];
  }
  const std::size_t c = x.dim(0);
  const std::size_t in_vol = in[0] * in[1] * in[2];
  const std::size_t out_vol = out[0] * out[1] * out[2];
  std::vector<std::size_t> source(out_vol);
  std::size_t o = 0;
  for (std::size_t a = 0; a < out[0]; ++a)
    for (std::size_t b = 0; b < out[1]; ++b)
      for (std::size_t k = 0; k < out[2]; ++k, ++o) {
        const std::size_t sa = a * in[0] / out[0], sb = b * in[1] / out[1], sk = k * in[2] / out[2];
        source[o] = (sa * in[1] + sb) * in[2] + sk;
      }
  std::vector<T> result(c * out_vol);
  auto xd = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < out_vol; ++i) result[ch * out_vol + i] = xd[ch * in_vol + source[i]];
  Shape shape{c};
  shape.insert(shape.end(), spatial.begin(), spatial.end());
  return Tape<T>::active().record(
      std::move(shape), std::move(result), {x},
      [source = std::move(source), c, in_vol, out_vol](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        auto& d = *grads[0];
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < out_vol; ++i) d[ch * in_vol + source[i]] += g[ch * out_vol + i];
      });
}

}  // namespace cigocc::nd
