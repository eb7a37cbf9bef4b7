// SPDX-License-Identifier: Apache-2.0
#include "tpd/autodiff/tape.hpp"

#include <stdexcept>

namespace tpd::ad {

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::input(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}, nullptr});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter& p, Mode mode) {
  if (mode == Mode::kFrozen) return constant(p.value.template cast<T>());
  nodes_.push_back(Node{p.value.template cast<T>(), {}, true, {}, &p});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
  bool any = false;
  for (const auto& v : inputs) any = any || (v.valid() && requires_grad(v.id()));
  nodes_.push_back(Node{std::move(value), {}, any, any ? std::move(fn) : BackwardFn{}, nullptr});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
  bool any = false;
  for (const auto& v : inputs) any = any || (v.valid() && requires_grad(v.id()));
  nodes_.push_back(Node{std::move(value), {}, any, any ? std::move(fn) : BackwardFn{}, nullptr});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T> Tape<T>::grad(const Var<T>& v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(const Var<T>& v) {
  Node& n = nodes_.at(v.id());
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (consumed_) throw std::logic_error("Tape::backward: tape already consumed by a previous backward");
  Node& root = nodes_.at(loss.id());
  if (root.value.size() != 1) {
    throw ShapeError("backward", "loss must be scalar, got shape " + shape_str(root.value.shape()));
  }
  consumed_ = true;
  if (!root.requires_grad) return;
  grad_buffer(loss)[0] = T{1};

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) {
      n.backward(*this, n.grad);
      n.backward = nullptr;
    }
  }

  for (Node& n : nodes_) {
    n.backward = nullptr;
    if (n.param == nullptr || n.grad.empty()) continue;
    Parameter& p = *n.param;
    if (p.grad.shape() != p.value.shape()) p.zero_grad();
    for (std::size_t k = 0; k < n.grad.size(); ++k) p.grad[k] += static_cast<float>(n.grad[k]);
  }
}

template class Tape<float>;
template class Tape<double>;
template class Var<float>;
template class Var<double>;

}  // namespace tpd::ad
