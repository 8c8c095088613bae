#include "xt/optim.hpp"

#include <cmath>
#include <numbers>

#include "xt/errors.hpp"
#include "xt/params.hpp"

namespace xt {

void adamw_step(Tensor& param, std::span<const double> grad, AdamWState& st, double lr_scale) {
  const std::size_t n = param.numel();
  require(grad.size() == n, "adamw_step: gradient shape does not match parameter");
  if (st.m.empty() && st.v.empty()) {
    st.m.assign(n, 0.0);
    st.v.assign(n, 0.0);
  }
  require(st.m.size() == n && st.v.size() == n, "adamw_step: moment shape does not match parameter");
  const auto& hp = st.hp;
  ++st.step;
  const double t = static_cast<double>(st.step);
  const double bc1 = 1.0 - std::pow(hp.beta1, t);
  const double bc2 = 1.0 - std::pow(hp.beta2, t);
  const double lr = hp.lr * lr_scale;
  auto p = param.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    st.m[i] = hp.beta1 * st.m[i] + (1.0 - hp.beta1) * g;
    st.v[i] = hp.beta2 * st.v[i] + (1.0 - hp.beta2) * g * g;
    const double mhat = st.m[i] / bc1;
    const double vhat = st.v[i] / bc2;
    p[i] -= lr * hp.weight_decay * p[i];
    p[i] -= lr * mhat / (std::sqrt(vhat) + hp.eps);
  }
}

double cosine_lr_scale(std::uint64_t t, std::uint64_t total) {
  if (total == 0) return 1.0;
  const double frac = std::min(1.0, static_cast<double>(t) / static_cast<double>(total));
  return 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

AdamW::AdamW(ParamStore& params, AdamWHyper hp) : params_(params) {
  states_.resize(params.size());
  for (auto& s : states_) s.hp = hp;
}

void AdamW::step(double lr_scale) {
  auto& items = params_.items();
  require(items.size() == states_.size(), "AdamW: parameter set changed after construction");
  std::vector<double> zeros;
  for (std::size_t i = 0; i < items.size(); ++i) {
    Tensor& p = items[i].tensor;
    if (p.has_grad()) {
      adamw_step(p, p.grad(), states_[i], lr_scale);
    } else {
      zeros.assign(p.numel(), 0.0);
      adamw_step(p, zeros, states_[i], lr_scale);
    }
  }
  ++steps_;
}

}  // namespace xt
