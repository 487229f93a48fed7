#pragma once

#include <functional>
#include <string>
#include <vector>

namespace tpsalign {

struct GradReport {
  std::string op;
  double max_rel_err = 0.0;
  std::vector<double> per_param_err;
  double tolerance = 0.0;
  bool pass = false;
};

// Compares an analytic gradient against central differences
// (f(x + h e_i) - f(x - h e_i)) / 2h. Relative error per coordinate uses
// max(1, |analytic|, |numeric|) as the denominator. A non-finite analytic
// entry fails the report regardless of the numeric side.
GradReport finite_diff_check(const std::function<double(const std::vector<double>&)>& f,
                             const std::vector<double>& point,
                             const std::vector<double>& analytic_grad, double step,
                             double tolerance, const std::string& op_name = "f");

}  // namespace tpsalign
