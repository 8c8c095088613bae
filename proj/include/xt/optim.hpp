#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "xt/tensor.hpp"

namespace xt {

class ParamStore;

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  AdamWHyper hp;
};

/// One bias-corrected AdamW update with decoupled weight decay. `lr_scale`
/// multiplies hp.lr (learning-rate schedules feed in here).
void adamw_step(Tensor& param, std::span<const double> grad, AdamWState& state,
                double lr_scale = 1.0);

/// Cosine decay multiplier in [0, 1] for step t of total.
double cosine_lr_scale(std::uint64_t t, std::uint64_t total);

/// AdamW over every parameter of a store, in store order.
class AdamW {
 public:
  AdamW(ParamStore& params, AdamWHyper hp);
  // Applies one update using each parameter's current gradient; parameters
  // without a gradient are treated as having zero gradient.
  void step(double lr_scale = 1.0);
  std::uint64_t steps() const { return steps_; }

 private:
  ParamStore& params_;
  std::vector<AdamWState> states_;
  std::uint64_t steps_ = 0;
};

}  // namespace xt
