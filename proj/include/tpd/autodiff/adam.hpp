// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tpd/autodiff/tape.hpp"

namespace tpd::ad {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment accumulators, one pair per parameter in the order they were given.
struct AdamState {
  AdamOptions options;
  std::vector<Tensor<float>> first_moment;
  std::vector<Tensor<float>> second_moment;
  std::uint64_t step = 0;

  static AdamState for_params(std::span<Parameter* const> params, AdamOptions options = {});
};

/// Bias-corrected Adam update from Parameter::grad. Throws
/// std::runtime_error naming the first parameter with a non-finite gradient;
/// nothing is modified in that case.
void adam_step(std::span<Parameter* const> params, AdamState& state, double lr);

}  // namespace tpd::ad
