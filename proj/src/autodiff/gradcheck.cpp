// SPDX-License-Identifier: Apache-2.0
#include "tpd/autodiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tpd::ad {
namespace {

double evaluate(const GradcheckFn& f, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

}  // namespace

std::string GradcheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "pass" : "FAIL") << " max_rel_error=" << max_rel_error << " (tol " << tolerance << ", input "
     << worst_input << " element " << worst_element << ": analytic " << worst_analytic << " numeric "
     << worst_numeric << ")";
  return os.str();
}

GradcheckReport gradcheck(const GradcheckFn& f, const std::vector<Tensor<double>>& inputs, double tolerance,
                          double step) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.input(t));
    Var<double> out = f(tape, vars);
    tape.backward(out);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }

  GradcheckReport report;
  report.tolerance = tolerance;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double x0 = inputs[i][k];
      probe[i][k] = x0 + step;
      const double fp = evaluate(f, probe);
      probe[i][k] = x0 - step;
      const double fm = evaluate(f, probe);
      probe[i][k] = x0;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[i][k];
      const double denom = std::max({std::abs(a), std::abs(numeric), GradcheckReport::kRelativeFloor});
      const double rel = std::abs(a - numeric) / denom;
      if (!(rel <= report.max_rel_error)) {
        report.max_rel_error = std::isnan(rel) ? INFINITY : rel;
        report.worst_input = i;
        report.worst_element = k;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace tpd::ad
