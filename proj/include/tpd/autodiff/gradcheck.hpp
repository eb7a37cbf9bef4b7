// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tpd/autodiff/tape.hpp"

namespace tpd::ad {

/// Outcome of comparing reverse-mode gradients against central differences.
///
/// The relative error of one element is |analytic - numeric| divided by
/// max(|analytic|, |numeric|, kRelativeFloor); the floor keeps elements whose
/// true gradient is zero from reporting round-off as a relative blow-up.
struct GradcheckReport {
  static constexpr double kRelativeFloor = 1e-3;

  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  double tolerance = 0.0;
  bool passed = false;

  std::string summary() const;
};

/// Scalar function of a list of inputs, evaluated on a fresh 64-bit tape.
using GradcheckFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

GradcheckReport gradcheck(const GradcheckFn& f, const std::vector<Tensor<double>>& inputs, double tolerance = 1e-4,
                          double step = 1e-5);

}  // namespace tpd::ad
