#pragma once

#include <span>
#include <vector>

#include "xt/nn.hpp"

namespace xt {

struct DiscreteStep {
  double a_bar;
  double b_bar;
};

/// Zero-order hold for a scalar diagonal entry:
/// a_bar = exp(delta*a), b_bar = (delta*a)^-1 (exp(delta*a) - 1) delta*b,
/// with the series limit delta*b when |delta*a| < 1e-6.
DiscreteStep zoh_discretize(double a, double b, double delta);

// expm1(z)/z and its derivative, with series forms near 0.
double zoh_gain(double z);
double zoh_gain_derivative(double z);

/// Element of the linear-recurrence monoid h -> a*h + b.
struct ScanElement {
  double a;
  double b;
};
// Applies `first` then `second`: (a, b) then (a', b') gives (a'a, a'b + b').
ScanElement scan_combine(const ScanElement& first, const ScanElement& second);

/// Time-varying diagonal SSM already in discrete form. Per step t, channel c,
/// state n: h = a_bar*h + b_bar*x[t, c]; y[t, c] = sum_n c[t, n] h + d[c] x[t, c].
struct DiscreteSsm {
  std::size_t length = 0, channels = 0, state = 0;
  std::vector<double> a_bar;  // [L, channels, state]
  std::vector<double> b_bar;  // [L, channels, state]
  std::vector<double> c;      // [L, state]
  std::vector<double> d;      // [channels]; empty means no skip

  // Time-invariant system broadcast over L steps.
  static DiscreteSsm time_invariant(std::size_t length, std::size_t channels, std::size_t state,
                                    std::span<const double> a_bar, std::span<const double> b_bar,
                                    std::span<const double> c, std::span<const double> d);
};

// Reference recurrence from h_0 = 0. x: [L, channels] -> y: [L, channels].
std::vector<double> ssm_scan_sequential(const DiscreteSsm& sys, std::span<const double> x);
/// Blocked associative scan: per-block local scans, a carry pass over block
/// summaries, then per-block fix-up over ceil(L/block) blocks; threads share
/// the blocks without changing the result.
std::vector<double> ssm_scan_parallel(const DiscreteSsm& sys, std::span<const double> x,
                                      int threads = 1, std::size_t block = 64);

enum class ScanMode { Sequential, Parallel };

/// Differentiable selective scan with input-dependent ZOH discretization.
/// x, delta: [B, L, Ch]; a: [Ch, N] (negative); b, c: [B, L, N]; d: [Ch] or
/// undefined. Returns y: [B, L, Ch]. Throws InvalidNumerics on a non-finite state.
Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& a, const Tensor& b,
                      const Tensor& c, const Tensor& d, ScanMode mode = ScanMode::Sequential,
                      int threads = 1);

struct SelectiveParams {
  Tensor delta;  // [B, L, Ch], > 0
  Tensor b;      // [B, L, N]
  Tensor c;      // [B, L, N]
};

/// Learned maps from tokens to per-step (delta, B, C).
struct SelectiveMaps {
  Linear delta_proj;  // width -> channels, bias initialized for softplus in [1e-3, 1e-1]
  Linear b_proj;      // width -> state
  Linear c_proj;      // width -> state

  static SelectiveMaps make(ParamStore& ps, const std::string& name, std::size_t width,
                            std::size_t channels, std::size_t state, Rng& rng);
};

// delta = softplus(linear(u) + bias); B, C = linear(u).
SelectiveParams selective_params(const SelectiveMaps& maps, const Tensor& tokens);

/// One selective-SSM residual layer: x + out(scan(in(LN x))), then an MLP block.
struct SsmLayer {
  LayerNorm norm;
  Linear in_proj;
  SelectiveMaps maps;
  Tensor a_log;  // [Ch, N]; A = -exp(a_log)
  Tensor d_skip; // [Ch], undefined when the skip is disabled
  Linear out_proj;
  LayerNorm norm2;
  Mlp mlp;

  static SsmLayer make(ParamStore& ps, const std::string& name, std::size_t width,
                       std::size_t state, std::size_t mlp_ratio, bool d_skip, Rng& rng);
  Tensor forward(const Tensor& x, ScanMode mode = ScanMode::Sequential, int threads = 1) const;
};

}  // namespace xt
