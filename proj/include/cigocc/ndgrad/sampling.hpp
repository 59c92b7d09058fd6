#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <vector>

#include "cigocc/ndgrad/ops.hpp"

namespace cigocc::nd {

namespace detail {

// Interpolates rows of a channel-last grid values[(spatial...), C].
// Point coordinate j addresses spatial axis axis_of[j]; a normalized
// coordinate p lands at continuous index p * extent - 0.5, so cell centres
// sit at (i + 0.5) / extent. Corners outside the grid contribute zero.
template <class T, std::size_t R>
struct GridSampler {
  std::array<std::size_t, R> dims{};     // spatial extents, row-major order
  std::array<std::size_t, R> axis_of{};  // point coordinate -> spatial axis
  std::size_t channels = 0;

  static constexpr std::size_t kCorners = std::size_t{1} << R;

  // Corner row offsets (-1 outside), weights and per-coordinate fractions of
  // one point. Corner bit j selects the upper neighbour along coordinate j.
  void corners(const T* p, std::ptrdiff_t* offset, T* weight, T* frac) const {
    std::array<std::ptrdiff_t, R> base{};
    std::array<std::ptrdiff_t, R> stride{};
    for (std::size_t j = 0; j < R; ++j) {
      const std::size_t axis = axis_of[j];
      const T pos = p[j] * static_cast<T>(dims[axis]) - T(0.5);
      const T fl = std::floor(pos);
      base[j] = static_cast<std::ptrdiff_t>(fl);
      frac[j] = pos - fl;
      std::ptrdiff_t st = 1;
      for (std::size_t a = axis + 1; a < R; ++a) st *= static_cast<std::ptrdiff_t>(dims[a]);
      stride[j] = st;
    }
    for (std::size_t mask = 0; mask < kCorners; ++mask) {
      bool inside = true;
      T w = 1;
      std::ptrdiff_t lin = 0;
      for (std::size_t j = 0; j < R; ++j) {
        const bool hi = (mask >> j) & 1u;
        const std::ptrdiff_t i = base[j] + (hi ? 1 : 0);
        inside = inside && i >= 0 && i < static_cast<std::ptrdiff_t>(dims[axis_of[j]]);
        w *= hi ? frac[j] : T(1) - frac[j];
        lin += i * stride[j];
      }
      offset[mask] = inside ? lin : -1;
      weight[mask] = w;
    }
  }

  // d weight / d (continuous index) along coordinate j for a corner.
  static T dweight(std::size_t mask, std::size_t j, const T* frac) {
    T dw = ((mask >> j) & 1u) ? T(1) : T(-1);
    for (std::size_t k = 0; k < R; ++k) {
      if (k != j) dw *= ((mask >> k) & 1u) ? frac[k] : T(1) - frac[k];
    }
    return dw;
  }
};

template <class T, std::size_t R>
Tensor<T> sample_rows(const Tensor<T>& values, const GridSampler<T, R>& sampler, const Tensor<T>& points) {
  if (points.rank() != 2 || points.dim(1) != R) {
    throw ShapeError("grid sampling expects points [N x " + std::to_string(R) + "], got " + to_string(points.shape()));
  }
  constexpr std::size_t kc = GridSampler<T, R>::kCorners;
  const std::size_t n = points.dim(0), c = sampler.channels;
  auto v = values.data();
  auto p = points.data();
  auto offsets = std::make_shared<std::vector<std::ptrdiff_t>>(n * kc);
  auto weights = std::make_shared<std::vector<T>>(n * kc);
  auto fracs = std::make_shared<std::vector<T>>(n * R);
  std::vector<T> out(n * c, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    std::ptrdiff_t* off = offsets->data() + i * kc;
    T* w = weights->data() + i * kc;
    sampler.corners(p.data() + i * R, off, w, fracs->data() + i * R);
    T* o = out.data() + i * c;
    for (std::size_t m = 0; m < kc; ++m) {
      if (off[m] < 0 || w[m] == T(0)) continue;
      const T* row = v.data() + static_cast<std::size_t>(off[m]) * c;
      const T wm = w[m];
      for (std::size_t q = 0; q < c; ++q) o[q] += wm * row[q];
    }
  }
  std::array<T, R> extent{};
  for (std::size_t j = 0; j < R; ++j) extent[j] = static_cast<T>(sampler.dims[sampler.axis_of[j]]);
  return Tape<T>::active().record(
      {n, c}, std::move(out), {values, points},
      [values, offsets, weights, fracs, extent, n, c](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        auto v = values.data();
        auto* gv = grads[0];
        auto* gp = grads[1];
        for (std::size_t i = 0; i < n; ++i) {
          const T* gi = g.data() + i * c;
          const std::ptrdiff_t* off = offsets->data() + i * kc;
          const T* w = weights->data() + i * kc;
          const T* fr = fracs->data() + i * R;
          for (std::size_t m = 0; m < kc; ++m) {
            if (off[m] < 0) continue;
            const std::size_t at = static_cast<std::size_t>(off[m]) * c;
            if (gv) {
              T* d = gv->data() + at;
              const T wm = w[m];
              for (std::size_t q = 0; q < c; ++q) d[q] += wm * gi[q];
            }
            if (gp) {
              T acc = 0;
              for (std::size_t q = 0; q < c; ++q) acc += gi[q] * v[at + q];
              for (std::size_t j = 0; j < R; ++j) {
                (*gp)[i * R + j] += acc * GridSampler<T, R>::dweight(m, j, fr) * extent[j];
              }
            }
          }
        }
      });
}

}  // namespace detail

/// Bilinear sampling of channel-last rows laid out over an (H, W) grid.
/// Points are (u, v) in normalized image coordinates, u along the width.
template <class T>
Tensor<T> bilinear_sample_rows(const Tensor<T>& rows, std::size_t height, std::size_t width,
                               const Tensor<T>& points) {
  if (rows.rank() != 2 || rows.dim(0) != height * width) {
    throw ShapeError("bilinear_sample_rows: rows " + to_string(rows.shape()) + " for grid " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  detail::GridSampler<T, 2> s;
  s.dims = {height, width};
  s.axis_of = {1, 0};
  s.channels = rows.dim(1);
  return detail::sample_rows(rows, s, points);
}

/// Trilinear sampling of channel-last rows over an (X, Y, Z) grid; points are
/// normalized (x, y, z).
template <class T>
Tensor<T> trilinear_sample_rows(const Tensor<T>& rows, const std::array<std::size_t, 3>& dims,
                                const Tensor<T>& points) {
  if (rows.rank() != 2 || rows.dim(0) != dims[0] * dims[1] * dims[2]) {
    throw ShapeError("trilinear_sample_rows: rows " + to_string(rows.shape()) + " do not cover the grid");
  }
  detail::GridSampler<T, 3> s;
  s.dims = dims;
  s.axis_of = {0, 1, 2};
  s.channels = rows.dim(1);
  return detail::sample_rows(rows, s, points);
}

/// feat (C, H, W), points [N x 2] normalized -> [N x C].
template <class T>
Tensor<T> bilinear_sample2d(const Tensor<T>& feat, const Tensor<T>& points) {
  if (feat.rank() != 3) throw ShapeError("bilinear_sample2d expects (C, H, W)");
  return bilinear_sample_rows(to_tokens(feat), feat.dim(1), feat.dim(2), points);
}

/// vol (C, X, Y, Z), points [N x 3] normalized -> [N x C].
template <class T>
Tensor<T> trilinear_sample3d(const Tensor<T>& vol, const Tensor<T>& points) {
  if (vol.rank() != 4) throw ShapeError("trilinear_sample3d expects (C, X, Y, Z)");
  return trilinear_sample_rows(to_tokens(vol), {vol.dim(1), vol.dim(2), vol.dim(3)}, points);
}

}  // namespace cigocc::nd
