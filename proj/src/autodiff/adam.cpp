// SPDX-License-Identifier: Apache-2.0
#include "tpd/autodiff/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace tpd::ad {

AdamState AdamState::for_params(std::span<Parameter* const> params, AdamOptions options) {
  AdamState s;
  s.options = options;
  for (const Parameter* p : params) {
    s.first_moment.emplace_back(p->value.shape());
    s.second_moment.emplace_back(p->value.shape());
  }
  return s;
}

void adam_step(std::span<Parameter* const> params, AdamState& state, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: learning rate must be positive");
  if (params.size() != state.first_moment.size()) throw std::invalid_argument("adam_step: state built for a different parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = *params[i];
    if (state.first_moment[i].shape() != p.value.shape()) throw ShapeError("adam_step", state.first_moment[i].shape(), p.value.shape());
    if (p.grad.shape() != p.value.shape()) throw ShapeError("adam_step(" + p.name + ")", p.grad.shape(), p.value.shape());
    if (!p.grad.all_finite()) throw std::runtime_error("adam_step: non-finite gradient in parameter '" + p.name + "'");
  }

  state.step += 1;
  const double b1 = state.options.beta1, b2 = state.options.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      const double mk = b1 * m[k] + (1.0 - b1) * g;
      const double vk = b2 * v[k] + (1.0 - b2) * g * g;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + state.options.eps);
      p.value[k] = static_cast<float>(p.value[k] - update);
    }
  }
}

}  // namespace tpd::ad
