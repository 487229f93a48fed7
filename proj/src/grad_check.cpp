#include "tpsalign/grad_check.hpp"

#include <cmath>

#include "tpsalign/common.hpp"

namespace tpsalign {

GradReport finite_diff_check(const std::function<double(const std::vector<double>&)>& f,
                             const std::vector<double>& point,
                             const std::vector<double>& analytic_grad, double step,
                             double tolerance, const std::string& op_name) {
  if (step <= 0.0) throw ConfigError("finite_diff_check: step must be positive");
  if (point.size() != analytic_grad.size())
    throw ConfigError("finite_diff_check: gradient size does not match point size");

  GradReport report;
  report.op = op_name;
  report.tolerance = tolerance;
  report.per_param_err.resize(point.size(), 0.0);

  bool finite = true;
  std::vector<double> x = point;
  for (size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double fp = f(x);
    x[i] = saved - step;
    const double fm = f(x);
    x[i] = saved;

    const double numeric = (fp - fm) / (2.0 * step);
    const double analytic = analytic_grad[i];
    if (!std::isfinite(analytic) || !std::isfinite(numeric)) finite = false;
    const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
    const double rel = std::fabs(analytic - numeric) / denom;
    report.per_param_err[i] = rel;
    if (rel > report.max_rel_err || !std::isfinite(rel)) report.max_rel_err = std::max(report.max_rel_err, rel);
  }
  report.pass = finite && std::isfinite(report.max_rel_err) && report.max_rel_err <= tolerance;
  return report;
}

}  // namespace tpsalign
