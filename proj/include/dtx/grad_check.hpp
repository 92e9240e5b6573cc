#pragma once
// Central finite-difference gradient checker used as a test oracle.

#include <functional>
#include <vector>

#include "dtx/tensor.hpp"

namespace dtx {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

// Relative error per element is |a - n| / max(|a|, |n|, floor). The floor
// keeps near-zero gradients from turning round-off into huge ratios.
inline constexpr double kGradCheckFloor = 1e-3;

// `f` must build a scalar from the given leaves (all requires_grad). Inputs are
// perturbed in place and restored before returning.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                           double h = 1e-5, double tol = 1e-4);

// Single-input convenience overload.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                           double h = 1e-5, double tol = 1e-4);

}  // namespace dtx
