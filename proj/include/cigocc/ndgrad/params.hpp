#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cigocc/io.hpp"
#include "cigocc/ndgrad/tensor.hpp"

namespace cigocc::nd {

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

using Rng = std::mt19937_64;

template <class T>
Tensor<T> uniform_param(Shape shape, T bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  std::vector<T> data(numel(shape));
  for (T& v : data) v = static_cast<T>(dist(rng));
  Tensor<T> t(std::move(shape), std::move(data));
  t.set_requires_grad(true);
  return t;
}

template <class T>
Tensor<T> constant_param(Shape shape, T value) {
  Tensor<T> t = Tensor<T>::full(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

/// Fan-in scaled uniform init; gain sqrt(6) suits layers followed by ReLU.
template <class T>
Tensor<T> fan_in_param(Shape shape, std::size_t fan_in, Rng& rng, double gain = std::sqrt(6.0)) {
  return uniform_param<T>(std::move(shape), static_cast<T>(gain / std::sqrt(static_cast<double>(fan_in))), rng);
}

template <class T>
void set_trainable(const NamedParams<T>& params, bool on) {
  for (auto [name, p] : params) {
    p.set_requires_grad(on);
    p.zero_grad();
  }
}

/// Copies checkpoint values into same-named parameters; every parameter must
/// be present with a matching shape.
template <class T, class U>
void assign_params(const NamedParams<T>& params, const std::map<std::string, Tensor<U>>& values) {
  for (auto [name, p] : params) {
    auto it = values.find(name);
    if (it == values.end()) throw DataError("checkpoint lacks parameter " + name);
    if (it->second.shape() != p.shape()) {
      throw DataError("checkpoint parameter " + name + " has shape " + to_string(it->second.shape()) +
                      ", model expects " + to_string(p.shape()));
    }
    auto dst = p.mutable_data();
    auto src = it->second.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
  }
}

template <class T>
std::uint64_t checksum(const NamedParams<T>& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [name, p] : params) {
    h = io::fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(name.data()), name.size()), h);
    h = io::fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(p.data().data()), p.size() * sizeof(T)), h);
  }
  return h;
}

/// Gradient descent with heavy-ball momentum: v = mu * v + g; p -= lr * v.
template <class T>
class SgdMomentum {
 public:
  SgdMomentum(T lr, T momentum) : lr_(lr), momentum_(momentum) {}

  /// `grad_scale` multiplies every gradient first (used for norm clipping).
  void step(const NamedParams<T>& params, T grad_scale = T(1)) {
    if (velocity_.size() != params.size()) {
      velocity_.assign(params.size(), {});
      for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i].second.size(), T(0));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T> p = params[i].second;
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto v = std::span<T>(velocity_[i]);
      auto w = p.mutable_data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        v[k] = momentum_ * v[k] + grad_scale * g[k];
        w[k] -= lr_ * v[k];
      }
      p.zero_grad();
    }
  }

  /// L2 norm over all current gradients.
  static T grad_norm(const NamedParams<T>& params) {
    T acc = 0;
    for (const auto& [name, p] : params)
      for (T g : p.grad()) acc += g * g;
    return std::sqrt(acc);
  }

 private:
  T lr_, momentum_;
  std::vector<std::vector<T>> velocity_;
};

}  // namespace cigocc::nd
