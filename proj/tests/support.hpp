#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "xt/tensor.hpp"

namespace xt::testing {

/// Max relative error between the tape gradient of loss() with respect to
/// the parameter `p` and central differences taken by editing p in place.
/// Stop-gradient outputs are replayed as constants during the differences.
/// About `max_elems` evenly strided coordinates are compared; the relative
/// error is |ad - fd| / max(|fd|, floor).
inline double param_grad_check(const std::function<Tensor()>& loss, Tensor p, double h = 1e-5,
                               std::size_t max_elems = 0, double floor = 1e-12) {
  std::vector<Tensor> sg_values;
  {
    GradTape tape;
    TapeScope scope(tape);
    detail::StopGradientReplay rec(detail::StopGradientReplay::Mode::Record, &sg_values);
    backward(loss());
  }
  std::vector<double> ad(p.numel(), 0.0);
  if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), ad.begin());
  NoGradGuard ng;
  auto eval = [&] {
    detail::StopGradientReplay replay(detail::StopGradientReplay::Mode::Replay, &sg_values);
    return loss().item();
  };
  double worst = 0.0;
  const std::size_t stride = max_elems == 0 ? 1 : std::max<std::size_t>(1, p.numel() / max_elems);
  for (std::size_t i = 0; i < p.numel(); i += stride) {
    double& v = p.mutable_data()[i];
    const double orig = v;
    v = orig + h;
    const double fp = eval();
    v = orig - h;
    const double fm = eval();
    v = orig;
    const double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(ad[i] - fd) / std::max(std::abs(fd), floor));
  }
  return worst;
}

}  // namespace xt::testing
