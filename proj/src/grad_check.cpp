#include "xt/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "xt/errors.hpp"

namespace xt {

GradCheckReport grad_check_report(const ScalarFn& f, const Tensor& x, double h) {
  require(h > 0.0, "grad_check: step must be positive");
  GradCheckReport rep;
  std::vector<Tensor> sg_values;
  const Tensor x0 = x.clone().set_requires_grad(true);
  {
    GradTape tape;
    TapeScope scope(tape);
    detail::StopGradientReplay rec(detail::StopGradientReplay::Mode::Record, &sg_values);
    const Tensor y = f(x0);
    if (y.numel() != 1) {
      throw ContractViolation("grad_check: function must return a scalar, got shape " +
                              shape_str(y.shape()));
    }
    backward(y);
  }
  const std::size_t n = x0.numel();
  rep.autodiff.assign(n, 0.0);
  if (x0.has_grad()) std::copy_n(x0.grad().begin(), n, rep.autodiff.begin());

  NoGradGuard no_grad;
  auto eval = [&](const std::vector<double>& v) {
    detail::StopGradientReplay replay(detail::StopGradientReplay::Mode::Replay, &sg_values);
    return f(Tensor(x.shape(), v, x.dtype())).item();
  };
  std::vector<double> buf(x.data().begin(), x.data().end());
  rep.numeric.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double orig = buf[i];
    buf[i] = orig + h;
    const double fp = eval(buf);
    buf[i] = orig - h;
    const double fm = eval(buf);
    buf[i] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    rep.numeric[i] = fd;
    const double err = std::abs(rep.autodiff[i] - fd) / (std::abs(fd) + 1e-12);
    rep.max_rel_error = std::max(rep.max_rel_error, err);
  }
  return rep;
}

double grad_check(const ScalarFn& f, const Tensor& x, double h) {
  return grad_check_report(f, x, h).max_rel_error;
}

}  // namespace xt
