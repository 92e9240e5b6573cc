#include "dtx/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace dtx {

GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                           double h, double tol) {
  if (!(h > 0.0)) throw ContractError("grad_check: step h must be positive");
  for (Tensor& x : inputs) {
    if (!x.is_leaf() || !x.requires_grad())
      throw ContractError("grad_check: inputs must be trainable leaves");
    x.zero_grad();
  }

  Tensor loss = f();
  if (loss.numel() != 1) throw ContractError("grad_check: function must be scalar-valued");
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (Tensor& x : inputs) {
    analytic.emplace_back(x.grad().begin(), x.grad().end());
    x.zero_grad();
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = f().item();
      values[i] = orig - h;
      const double down = f().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      // NaN is sticky.
      const bool worse = std::isnan(rel) || rel > report.max_rel_error;
      if (!std::isnan(report.max_rel_error) && worse) {
        report.max_rel_error = rel;
        report.worst_input = k;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = std::isfinite(report.max_rel_error) && report.max_rel_error < tol;
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h,
                           double tol) {
  return grad_check([&] { return f(x); }, {x}, h, tol);
}

}  // namespace dtx
