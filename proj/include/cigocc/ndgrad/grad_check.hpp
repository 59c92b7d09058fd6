#pragma once

#include <algorithm>
#include <array>
#include <numeric>
#include <bit>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cigocc/ndgrad/tensor.hpp"

namespace cigocc::nd {

namespace detail {

template <class T>
T relative_error(T analytic, T numeric) {
  return std::abs(analytic - numeric) / std::max(T(1), std::abs(numeric));
}

}  // namespace detail

/// Max over coordinates of |analytic - central difference| / max(1, |central
/// difference|) for a scalar function of one tensor. Throws if f is not
/// deterministic across two evaluations at x.
template <class T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T eps) {
  TapeScope<T> scope;
  Tensor<T> leaf = x.detach();
  leaf.set_requires_grad(true);
  const Tensor<T> y = f(leaf);
  if (y.size() != 1) throw ShapeError("grad_check: f must be scalar-valued");
  if (y.requires_grad()) backward(y);
  std::vector<T> analytic(x.size(), T(0));
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
  Tape<T>::active().clear();

  const T again = f(x.detach()).item();
  if (std::bit_cast<std::array<unsigned char, sizeof(T)>>(again) !=
      std::bit_cast<std::array<unsigned char, sizeof(T)>>(y.item())) {
    throw Error("grad_check: f is not deterministic");
  }

  T worst = 0;
  std::vector<T> probe(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const T saved = probe[i];
    probe[i] = saved + eps;
    const T up = f(Tensor<T>(x.shape(), probe)).item();
    probe[i] = saved - eps;
    const T down = f(Tensor<T>(x.shape(), probe)).item();
    probe[i] = saved;
    Tape<T>::active().clear();
    worst = std::max(worst, detail::relative_error(analytic[i], (up - down) / (T(2) * eps)));
  }
  return worst;
}

struct ParamCheckReport {
  double max_error = 0;
  std::string worst_param;
  std::size_t coordinates = 0;
};

/// Finite-difference check of every named parameter of a scalar objective.
/// Parameters are perturbed in place; at most `max_coords` randomly chosen
/// coordinates are probed per parameter (0 = all).
template <class T>
ParamCheckReport grad_check_params(const std::function<Tensor<T>()>& f,
                                   std::vector<std::pair<std::string, Tensor<T>>> params, T eps,
                                   std::size_t max_coords = 0, std::uint64_t seed = 1) {
  TapeScope<T> scope;
  for (auto& [name, p] : params) {
    p.zero_grad();
    p.set_requires_grad(true);
  }
  const Tensor<T> y = f();
  if (y.size() != 1) throw ShapeError("grad_check_params: objective must be scalar");
  backward(y);
  Tape<T>::active().clear();

  ParamCheckReport report;
  std::mt19937_64 rng(seed);
  for (auto& [name, p] : params) {
    std::vector<T> analytic(p.size(), T(0));
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords > 0 && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    auto values = p.mutable_data();
    for (std::size_t i : coords) {
      const T saved = values[i];
      values[i] = saved + eps;
      const T up = f().item();
      Tape<T>::active().clear();
      values[i] = saved - eps;
      const T down = f().item();
      Tape<T>::active().clear();
      values[i] = saved;
      const T err = detail::relative_error(analytic[i], (up - down) / (T(2) * eps));
      ++report.coordinates;
      if (report.worst_param.empty() || err >= report.max_error) {
        report.max_error = err;
        report.worst_param = name;
      }
    }
  }
  return report;
}

}  // namespace cigocc::nd
