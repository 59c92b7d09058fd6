#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cigocc/errors.hpp"
#include "cigocc/ndgrad.hpp"

namespace cigocc::objective {

using nd::Tensor;

inline constexpr std::uint16_t kIgnoreLabel = 255;
inline constexpr double kScalEpsilon = 1e-6;

/// Inverse-frequency class weights normalised to mean 1.
inline std::vector<double> class_weights(std::span<const double> freqs) {
  if (freqs.empty()) throw ConfigError("class_weights: no classes");
  std::vector<double> w(freqs.size());
  double total = 0;
  for (std::size_t c = 0; c < freqs.size(); ++c) {
    if (!(freqs[c] > 0) || !std::isfinite(freqs[c])) {
      throw ConfigError("class_weights: frequency of class " + std::to_string(c) + " must be positive");
    }
    w[c] = 1.0 / freqs[c];
    total += w[c];
  }
  const double mean = total / static_cast<double>(w.size());
  for (double& x : w) x /= mean;
  return w;
}

namespace detail {

inline void check_logits(const nd::Shape& shape, std::size_t labels, const char* op) {
  if (shape.size() < 2) throw ShapeError(std::string(op) + ": logits need a class axis and voxels");
  if (nd::numel(shape) / shape[0] != labels) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels) + " labels for logits " + nd::to_string(shape));
  }
}

}  // namespace detail

/// Weighted cross-entropy over channel-first logits (C, voxels...), averaged
/// over non-ignored voxels.
template <class T>
Tensor<T> loss_ssc(const Tensor<T>& logits, std::span<const std::uint16_t> gt, std::span<const double> weights) {
  detail::check_logits(logits.shape(), gt.size(), "loss_ssc");
  const std::size_t c = logits.dim(0), n = gt.size();
  if (weights.size() != c) throw ShapeError("loss_ssc: one weight per class required");
  auto x = logits.data();
  std::vector<T> grad(c * n, T(0));
  double loss = 0;
  std::size_t counted = 0;
  std::vector<double> p(c);
  for (std::size_t k = 0; k < n; ++k) {
    const std::uint16_t y = gt[k];
    if (y == kIgnoreLabel) continue;
    if (y >= c) throw DataError("loss_ssc: label " + std::to_string(y) + " outside " + std::to_string(c) + " classes");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(x[j * n + k]));
    double z = 0;
    for (std::size_t j = 0; j < c; ++j) z += (p[j] = std::exp(static_cast<double>(x[j * n + k]) - mx));
    for (std::size_t j = 0; j < c; ++j) p[j] /= z;
    loss -= weights[y] * (static_cast<double>(x[y * n + k]) - mx - std::log(z));
    for (std::size_t j = 0; j < c; ++j) {
      grad[j * n + k] = static_cast<T>(weights[y] * (p[j] - (j == y ? 1.0 : 0.0)));
    }
    ++counted;
  }
  if (counted == 0) throw DataError("loss_ssc: every voxel is ignored");
  const double inv = 1.0 / static_cast<double>(counted);
  for (T& g : grad) g = static_cast<T>(static_cast<double>(g) * inv);
  return nd::Tape<T>::active().record(
      {1}, {static_cast<T>(loss * inv)}, {logits},
      [grad = std::move(grad)](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        auto& d = *grads[0];
        for (std::size_t i = 0; i < grad.size(); ++i) d[i] += g[0] * grad[i];
      });
}

/// Mean binary cross-entropy on logits, computed as
/// max(x, 0) - t x + log(1 + exp(-|x|)).
template <class T>
Tensor<T> loss_bce(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("loss_bce: logits " + nd::to_string(logits.shape()) + " vs targets " +
                     nd::to_string(targets.shape()));
  }
  auto x = logits.data();
  auto t = targets.data();
  const std::size_t n = x.size();
  double loss = 0;
  std::vector<T> grad(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = static_cast<double>(x[i]), ti = static_cast<double>(t[i]);
    loss += std::max(xi, 0.0) - ti * xi + std::log1p(std::exp(-std::abs(xi)));
    const double s = xi >= 0 ? 1.0 / (1.0 + std::exp(-xi)) : std::exp(xi) / (1.0 + std::exp(xi));
    grad[i] = static_cast<T>((s - ti) / static_cast<double>(n));
  }
  return nd::Tape<T>::active().record(
      {1}, {static_cast<T>(loss / static_cast<double>(n))}, {logits},
      [grad = std::move(grad)](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        auto& d = *grads[0];
        for (std::size_t i = 0; i < grad.size(); ++i) d[i] += g[0] * grad[i];
      });
}

enum class ScalMode { geo, sem };

namespace detail {

// Scene-class affinity terms on softmax probabilities probs (C, n).
// Geo mode scores class 0 (probability p_0) and "occupied" (1 - p_0);
// sem mode scores classes 1..C-1 with their own probabilities.
template <class T>
Tensor<T> scal_on_probs(const Tensor<T>& probs, std::span<const std::uint16_t> gt, ScalMode mode) {
  const std::size_t c = probs.dim(0), n = gt.size();
  auto p = probs.data();
  std::vector<std::size_t> counted;
  for (std::size_t k = 0; k < n; ++k) {
    if (gt[k] == kIgnoreLabel) continue;
    if (gt[k] >= c) throw DataError("loss_scal: label " + std::to_string(gt[k]) + " outside the class range");
    counted.push_back(k);
  }
  const std::size_t groups = mode == ScalMode::geo ? 2 : c - 1;

  // Probability of group g at voxel k; geo "occupied" reads channel 0 negated.
  auto channel = [&](std::size_t g) { return mode == ScalMode::geo ? std::size_t{0} : g + 1; };
  auto prob = [&](std::size_t g, std::size_t k) {
    const double v = static_cast<double>(p[channel(g) * n + k]);
    return (mode == ScalMode::geo && g == 1) ? 1.0 - v : v;
  };
  auto member = [&](std::size_t g, std::size_t k) {
    return mode == ScalMode::geo ? ((gt[k] != 0) == (g == 1)) : gt[k] == g + 1;
  };

  std::vector<T> grad(c * n, T(0));
  double loss = 0;
  std::size_t present = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    double tp = 0, psum = 0, pos = 0, tn = 0, neg = 0;
    for (std::size_t k : counted) {
      const double pk = prob(g, k);
      const bool m = member(g, k);
      psum += pk;
      if (m) {
        tp += pk;
        pos += 1;
      } else {
        tn += 1.0 - pk;
        neg += 1;
      }
    }
    if (pos == 0) continue;
    ++present;
    // Each term contributes -log(clamp(a)); record d(-log a)/da where unclamped.
    auto term = [&](double num, double den, double& dnum, double& dden) {
      const double a = num / den;
      if (a < kScalEpsilon) {
        loss -= std::log(kScalEpsilon);
        dnum = dden = 0;
        return;
      }
      loss -= std::log(std::min(a, 1.0));
      if (a > 1.0) {
        dnum = dden = 0;
        return;
      }
      dnum = -1.0 / num;  // d(-log(num/den))/dnum
      dden = 1.0 / den;
    };
    double dP_num = 0, dP_den = 0, dR_num = 0, dR_den = 0, dS_num = 0, dS_den = 0;
    if (psum > 0) term(tp, psum, dP_num, dP_den);
    term(tp, pos, dR_num, dR_den);
    if (neg > 0) term(tn, neg, dS_num, dS_den);
    // Gradient w.r.t. the group probability at each voxel.
    for (std::size_t k : counted) {
      const bool m = member(g, k);
      double d = dP_den;                 // psum
      if (m) d += dP_num + dR_num;       // tp
      else d -= dS_num;                  // tn = sum (1 - p)
      const double s = (mode == ScalMode::geo && g == 1) ? -1.0 : 1.0;
      grad[channel(g) * n + k] += static_cast<T>(s * d);
    }
  }
  if (present == 0) throw DataError("loss_scal: no class is present in the ground truth");
  const double inv = 1.0 / static_cast<double>(present);
  for (T& v : grad) v = static_cast<T>(static_cast<double>(v) * inv);
  return nd::Tape<T>::active().record(
      {1}, {static_cast<T>(loss * inv)}, {probs},
      [grad = std::move(grad)](std::span<const T> g, std::span<std::vector<T>* const> grads) {
        auto& d = *grads[0];
        for (std::size_t i = 0; i < grad.size(); ++i) d[i] += g[0] * grad[i];
      });
}

}  // namespace detail

/// Scene-class affinity loss over precision, recall and specificity of each
/// class present in the ground truth (geo: empty vs occupied; sem: every
/// non-empty class).
template <class T>
Tensor<T> loss_scal(const Tensor<T>& logits, std::span<const std::uint16_t> gt, ScalMode mode) {
  detail::check_logits(logits.shape(), gt.size(), "loss_scal");
  if (logits.dim(0) < 2) throw ShapeError("loss_scal: need at least two classes");
  const auto flat = nd::reshape(logits, {logits.dim(0), gt.size()});
  return detail::scal_on_probs(nd::softmax(flat, 0), gt, mode);
}

struct Lambdas {
  double bce = 1, scal_geo = 1, scal_sem = 1, ssc = 1;

  void validate() const {
    for (double l : {bce, scal_geo, scal_sem, ssc}) {
      if (!(l >= 0) || !std::isfinite(l)) throw ConfigError("loss weights must be finite and non-negative");
    }
  }
};

template <class T>
struct LossBundle {
  Tensor<T> l_bce, l_scal_geo, l_scal_sem, l_ssc, total;
  Lambdas lambdas;
};

/// total = l1 * l_bce + l2 * l_scal_geo + l3 * l_scal_sem + l4 * l_ssc.
template <class T>
LossBundle<T> total_loss(const Tensor<T>& l_bce, const Tensor<T>& l_scal_geo, const Tensor<T>& l_scal_sem,
                         const Tensor<T>& l_ssc, const Lambdas& lambdas) {
  lambdas.validate();
  for (const auto* t : {&l_bce, &l_scal_geo, &l_scal_sem, &l_ssc}) {
    if (t->size() != 1) throw ShapeError("total_loss: components must be scalars");
  }
  auto term = [](const Tensor<T>& x, double l) { return nd::mul(x, static_cast<T>(l)); };
  auto total = nd::add(nd::add(nd::add(term(l_bce, lambdas.bce), term(l_scal_geo, lambdas.scal_geo)),
                               term(l_scal_sem, lambdas.scal_sem)),
                       term(l_ssc, lambdas.ssc));
  return {l_bce, l_scal_geo, l_scal_sem, l_ssc, total, lambdas};
}

}  // namespace cigocc::objective
