#pragma once

#include <functional>
#include <vector>

#include "xt/tensor.hpp"

namespace xt {

using ScalarFn = std::function<Tensor(const Tensor&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<double> autodiff;
  std::vector<double> numeric;
};

/// Compares reverse-mode gradients of a scalar function against central finite
/// differences: max_i |ad_i - fd_i| / (|fd_i| + 1e-12).
///
/// Finite-difference evaluations replay every stop_gradient output recorded
/// during the reference evaluation, so severed branches are held constant and
/// only declared-differentiable paths are compared.
GradCheckReport grad_check_report(const ScalarFn& f, const Tensor& x, double h = 1e-5);

double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

}  // namespace xt
