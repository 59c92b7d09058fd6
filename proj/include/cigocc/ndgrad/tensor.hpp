#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cigocc/errors.hpp"

namespace cigocc::nd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? ", " : "") << shape[i];
  }
  os << ')';
  return os.str();
}

template <class T>
class Tape;

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  // Set when the value was produced by a recorded op; leaves keep nullptr.
  const Tape<T>* tape = nullptr;
  std::size_t tape_index = 0;
};

}  // namespace detail

/// Dense row-major array with optional gradient tracking.
///
/// A Tensor is a cheap handle: copies share storage. Values are immutable once
/// produced by an op; only leaves (parameters and inputs) may be overwritten,
/// and only between tape resets.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data)
      : node_(std::make_shared<detail::Node<T>>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
    }
    if (shape.empty()) shape = {1};
    if (numel(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T value) {
    std::vector<T> data(numel(shape), value);
    return Tensor(std::move(shape), std::move(data));
  }

  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  bool defined() const { return static_cast<bool>(node_); }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
    return node_->data[0];
  }

  /// Writable view of a leaf's values. Op outputs are immutable.
  std::span<T> mutable_data() {
    if (node_->tape != nullptr) {
      throw Error("cannot mutate a tensor produced by a recorded op");
    }
    return node_->data;
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }

  Tensor& set_requires_grad(bool on) {
    if (node_->tape != nullptr) throw Error("requires_grad can only be set on leaves");
    node_->requires_grad = on;
    return *this;
  }

  bool is_leaf() const { return node_->tape == nullptr; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no history.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  /// Same storage viewed under a new shape; leaves only.
  Tensor reshaped_leaf(Shape shape) const {
    if (numel(shape) != size()) throw ShapeError("reshape " + to_string(this->shape()) + " -> " + to_string(shape));
    return Tensor(std::move(shape), node_->data);
  }

  detail::Node<T>* node() const { return node_.get(); }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  friend class Tape<T>;
  std::shared_ptr<detail::Node<T>> node_;
};

/// Linear record of differentiable ops, replayed in reverse by backward().
///
/// One tape per scalar type per thread. Ops record themselves only when at
/// least one input requires a gradient; clear() drops every node and the
/// intermediate values they keep alive.
template <class T>
class Tape {
 public:
  // grad_in[i] is null when input i does not need a gradient. Backward rules
  // must accumulate (+=) so that an input used twice receives both terms.
  using BackwardFn =
      std::function<void(std::span<const T> grad_out, std::span<std::vector<T>* const> grad_in)>;

  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  Tensor<T> record(Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                   BackwardFn backward_fn) {
    for (const T& v : data) {
      if (!std::isfinite(v)) throw NumericError("op produced a non-finite value");
    }
    Tensor<T> out(std::move(shape), std::move(data));
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return out;

    out.node_->requires_grad = true;
    out.node_->tape = this;
    out.node_->tape_index = nodes_.size();
    Entry entry;
    entry.inputs.reserve(inputs.size());
    for (auto& in : inputs) entry.inputs.push_back(in.node_);
    entry.output = out.node_;
    entry.backward = std::move(backward_fn);
    nodes_.push_back(std::move(entry));
    return out;
  }

  /// Accumulates d(root)/d(leaf) into every reachable leaf that requires grad.
  void backward(const Tensor<T>& root) {
    if (!root.defined() || root.size() != 1) {
      throw ShapeError("backward() needs a scalar root");
    }
    const auto* rn = root.node_.get();
    if (rn->tape != this || rn->tape_index >= nodes_.size() ||
        nodes_[rn->tape_index].output.get() != rn) {
      throw Error("backward() root was not recorded on this tape");
    }

    std::unordered_map<const detail::Node<T>*, std::vector<T>> buffers;
    buffers[rn] = std::vector<T>{T(1)};
    std::vector<std::vector<T>*> slots;
    for (std::size_t i = rn->tape_index + 1; i-- > 0;) {
      Entry& entry = nodes_[i];
      auto it = buffers.find(entry.output.get());
      if (it == buffers.end()) continue;
      std::vector<T> grad_out = std::move(it->second);
      buffers.erase(it);

      slots.assign(entry.inputs.size(), nullptr);
      for (std::size_t k = 0; k < entry.inputs.size(); ++k) {
        detail::Node<T>* in = entry.inputs[k].get();
        if (!in->requires_grad) continue;
        std::vector<T>& buf = in->tape == nullptr ? in->grad : buffers[in];
        if (buf.empty()) buf.assign(in->data.size(), T(0));
        slots[k] = &buf;
      }
      entry.backward(grad_out, slots);
    }
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Entry {
    std::vector<std::shared_ptr<detail::Node<T>>> inputs;
    std::shared_ptr<detail::Node<T>> output;
    BackwardFn backward;
  };
  std::vector<Entry> nodes_;
};

template <class T>
void backward(const Tensor<T>& root) {
  Tape<T>::active().backward(root);
}

/// Clears the active tape on scope exit.
template <class T>
class TapeScope {
 public:
  TapeScope() { Tape<T>::active().clear(); }
  ~TapeScope() { Tape<T>::active().clear(); }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
};

}  // namespace cigocc::nd
