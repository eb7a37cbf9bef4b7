// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "tpd/autodiff/tensor.hpp"

namespace tpd::ad {

/// A learnable tensor. Values are always stored in 32-bit; tapes of any
/// precision bind to it and flush gradients back as 32-bit.
struct Parameter {
  std::string name;
  Tensor<float> value;
  Tensor<float> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<float> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor<float>(value.shape()); }
};

/// How a network binds its parameters onto a tape.
enum class Mode {
  kTrain,   ///< parameters are gradient leaves; backward flushes into Parameter::grad
  kFrozen,  ///< parameters enter as constants
};

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run tape. Nodes are appended in evaluation order, which is a
/// topological order, so backward is a single reverse sweep.
template <typename T>
class Tape {
 public:
  /// Receives the output gradient; pushes contributions into inputs through
  /// grad_buffer().
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  /// Leaf that receives a gradient (read back with grad()).
  Var<T> input(Tensor<T> value);
  Var<T> parameter(Parameter& p, Mode mode = Mode::kTrain);

  /// Appends an op result. The node requires grad iff any input does; the
  /// backward closure is dropped otherwise.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn);
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn);

  /// Reverse sweep from a one-element loss. Parameter gradients are added to
  /// Parameter::grad. Backward closures are released afterwards; values stay.
  void backward(const Var<T>& loss);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient accumulated on a node by backward(); zeros if none reached it.
  Tensor<T> grad(const Var<T>& v) const;

  /// Zero-initialised accumulation buffer for a node; for use by backward closures.
  Tensor<T>& grad_buffer(const Var<T>& v);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace tpd::ad
