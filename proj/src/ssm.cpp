#include "xt/ssm.hpp"

#include <cmath>
#include <random>

#include "xt/errors.hpp"
#include "xt/ops.hpp"
#include "xt/parallel.hpp"

namespace xt {

double zoh_gain(double z) {
  if (std::abs(z) < 1e-6) return 1.0 + z * (0.5 + z / 6.0);
  return std::expm1(z) / z;
}

double zoh_gain_derivative(double z) {
  if (std::abs(z) < 1e-2) return 0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z / 144.0)));
  return (std::exp(z) - zoh_gain(z)) / z;
}

DiscreteStep zoh_discretize(double a, double b, double delta) {
  if (!(delta > 0.0)) throw ContractViolation("zoh_discretize: step size must be positive");
  const double z = delta * a;
  return {std::exp(z), zoh_gain(z) * delta * b};
}

ScanElement scan_combine(const ScanElement& first, const ScanElement& second) {
  return {second.a * first.a, second.a * first.b + second.b};
}

DiscreteSsm DiscreteSsm::time_invariant(std::size_t L, std::size_t ch, std::size_t N,
                                        std::span<const double> a_bar,
                                        std::span<const double> b_bar, std::span<const double> c,
                                        std::span<const double> d) {
  require(a_bar.size() == ch * N && b_bar.size() == ch * N, "time_invariant: a_bar/b_bar must be [channels, state]");
  require(c.size() == N, "time_invariant: c must be [state]");
  require(d.empty() || d.size() == ch, "time_invariant: d must be [channels]");
  DiscreteSsm s;
  s.length = L;
  s.channels = ch;
  s.state = N;
  for (std::size_t t = 0; t < L; ++t) {
    s.a_bar.insert(s.a_bar.end(), a_bar.begin(), a_bar.end());
    s.b_bar.insert(s.b_bar.end(), b_bar.begin(), b_bar.end());
    s.c.insert(s.c.end(), c.begin(), c.end());
  }
  s.d.assign(d.begin(), d.end());
  return s;
}

namespace {

// h[t, lane] = a[t, lane] h[t-1, lane] + u[t, lane], h[-1] = 0.
void scan_sequential_core(const double* a, const double* u, double* h, std::size_t L,
                          std::size_t lanes) {
  for (std::size_t j = 0; j < lanes; ++j) h[j] = u[j];
  for (std::size_t t = 1; t < L; ++t) {
    const double* at = a + t * lanes;
    const double* ut = u + t * lanes;
    const double* hp = h + (t - 1) * lanes;
    double* ht = h + t * lanes;
    for (std::size_t j = 0; j < lanes; ++j) ht[j] = at[j] * hp[j] + ut[j];
  }
}

void scan_parallel_core(const double* a, const double* u, double* h, std::size_t L,
                        std::size_t lanes, int threads, std::size_t block) {
  if (L == 0) return;
  block = std::max<std::size_t>(block, 1);
  // Block count depends on L only, so results do not vary with threads.
  const std::size_t nb = (L + block - 1) / block;
  auto lo = [&](std::size_t k) { return L * k / nb; };
  // Phase 1: each block reduced to one element per lane.
  std::vector<ScanElement> summary(nb * lanes);
  parallel_for(nb, threads, [&](std::size_t k) {
    for (std::size_t j = 0; j < lanes; ++j) {
      ScanElement acc{1.0, 0.0};
      for (std::size_t t = lo(k); t < lo(k + 1); ++t)
        acc = scan_combine(acc, {a[t * lanes + j], u[t * lanes + j]});
      summary[k * lanes + j] = acc;
    }
  });
  // Phase 2: carries into each block.
  std::vector<double> carry(nb * lanes, 0.0);
  for (std::size_t k = 1; k < nb; ++k)
    for (std::size_t j = 0; j < lanes; ++j) {
      const ScanElement& s = summary[(k - 1) * lanes + j];
      carry[k * lanes + j] = s.a * carry[(k - 1) * lanes + j] + s.b;
    }
  // Phase 3: rescan each block from its carry.
  parallel_for(nb, threads, [&](std::size_t k) {
    for (std::size_t j = 0; j < lanes; ++j) {
      double hv = carry[k * lanes + j];
      for (std::size_t t = lo(k); t < lo(k + 1); ++t) {
        hv = a[t * lanes + j] * hv + u[t * lanes + j];
        h[t * lanes + j] = hv;
      }
    }
  });
}

std::vector<double> discrete_scan(const DiscreteSsm& s, std::span<const double> x, bool parallel,
                                  int threads, std::size_t block) {
  const std::size_t L = s.length, ch = s.channels, N = s.state, lanes = ch * N;
  require(x.size() == L * ch, "ssm scan: x must be [L, channels]");
  require(s.a_bar.size() == L * lanes && s.b_bar.size() == L * lanes && s.c.size() == L * N,
          "ssm scan: parameter extents do not match [L, channels, state]");
  require(s.d.empty() || s.d.size() == ch, "ssm scan: d must be [channels]");
  std::vector<double> u(L * lanes), h(L * lanes);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t i = (t * ch + c) * N + n;
        u[i] = s.b_bar[i] * x[t * ch + c];
      }
  if (parallel) {
    scan_parallel_core(s.a_bar.data(), u.data(), h.data(), L, lanes, threads, block);
  } else {
    scan_sequential_core(s.a_bar.data(), u.data(), h.data(), L, lanes);
  }
  std::vector<double> y(L * ch, 0.0);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < ch; ++c) {
      double acc = s.d.empty() ? 0.0 : s.d[c] * x[t * ch + c];
      for (std::size_t n = 0; n < N; ++n) {
        const double hv = h[(t * ch + c) * N + n];
        if (!std::isfinite(hv)) throw InvalidNumerics("ssm scan: non-finite state");
        acc += s.c[t * N + n] * hv;
      }
      y[t * ch + c] = acc;
    }
  return y;
}

}  // namespace

std::vector<double> ssm_scan_sequential(const DiscreteSsm& sys, std::span<const double> x) {
  return discrete_scan(sys, x, false, 1, 1);
}

std::vector<double> ssm_scan_parallel(const DiscreteSsm& sys, std::span<const double> x,
                                      int threads, std::size_t block) {
  return discrete_scan(sys, x, true, threads, block);
}

Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& a, const Tensor& b,
                      const Tensor& c, const Tensor& d, ScanMode mode, int threads) {
  require(x.rank() == 3, "selective_scan: x must be [B, L, Ch]");
  const std::size_t Bn = x.dim(0), L = x.dim(1), ch = x.dim(2);
  require(delta.shape() == x.shape(), "selective_scan: delta must match x");
  require(a.rank() == 2 && a.dim(0) == ch, "selective_scan: a must be [Ch, N]");
  const std::size_t N = a.dim(1), lanes = ch * N;
  require(b.shape() == Shape{Bn, L, N} && c.shape() == Shape{Bn, L, N},
          "selective_scan: b and c must be [B, L, N]");
  require(!d.defined() || d.shape() == Shape{ch}, "selective_scan: d must be [Ch]");
  const double* X = x.data().data();
  const double* Dl = delta.data().data();
  const double* A = a.data().data();
  const double* Bv = b.data().data();
  const double* Cv = c.data().data();
  for (std::size_t i = 0; i < delta.numel(); ++i)
    if (!(Dl[i] > 0.0)) throw ContractViolation("selective_scan: step size must be positive");

  // States are the scan's saved activation and are ledger-counted.
  Tensor states = Tensor::zeros({Bn, L, ch, N});
  double* H = states.mutable_data().data();
  std::vector<double> abar(L * lanes), u(L * lanes);
  std::vector<double> y(Bn * L * ch, 0.0);
  for (std::size_t bi = 0; bi < Bn; ++bi) {
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t k = 0; k < ch; ++k) {
        const std::size_t xi = (bi * L + t) * ch + k;
        for (std::size_t n = 0; n < N; ++n) {
          const double z = Dl[xi] * A[k * N + n];
          abar[(t * ch + k) * N + n] = std::exp(z);
          u[(t * ch + k) * N + n] = zoh_gain(z) * Dl[xi] * Bv[(bi * L + t) * N + n] * X[xi];
        }
      }
    double* Hb = H + bi * L * lanes;
    if (mode == ScanMode::Parallel) {
      scan_parallel_core(abar.data(), u.data(), Hb, L, lanes, threads, 64);
    } else {
      scan_sequential_core(abar.data(), u.data(), Hb, L, lanes);
    }
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t k = 0; k < ch; ++k) {
        const std::size_t xi = (bi * L + t) * ch + k;
        double acc = d.defined() ? d.data()[k] * X[xi] : 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const double hv = Hb[(t * ch + k) * N + n];
          if (!std::isfinite(hv)) throw InvalidNumerics("selective_scan: non-finite state");
          acc += Cv[(bi * L + t) * N + n] * hv;
        }
        y[xi] = acc;
      }
  }

  const bool record = grad_enabled() && (x.requires_grad() || delta.requires_grad() ||
                                         a.requires_grad() || b.requires_grad() ||
                                         c.requires_grad() || (d.defined() && d.requires_grad()));
  Tensor saved = record ? states : Tensor();
  std::vector<Tensor> inputs{x, delta, a, b, c};
  if (d.defined()) inputs.push_back(d);
  return detail::make_result(
      x.shape(), std::move(y), detail::promote({&x, &delta, &a, &b, &c}), std::move(inputs),
      [saved, Bn, L, ch, N, lanes](const TensorImpl& o,
                                   std::span<const std::shared_ptr<TensorImpl>> in) {
        const double* X = in[0]->storage->values.data();
        const double* Dl = in[1]->storage->values.data();
        const double* A = in[2]->storage->values.data();
        const double* Bv = in[3]->storage->values.data();
        const double* Cv = in[4]->storage->values.data();
        const double* Dk = in.size() > 5 ? in[5]->storage->values.data() : nullptr;
        double* gX = detail::grad_sink(*in[0]);
        double* gDl = detail::grad_sink(*in[1]);
        double* gA = detail::grad_sink(*in[2]);
        double* gB = detail::grad_sink(*in[3]);
        double* gC = detail::grad_sink(*in[4]);
        double* gDk = in.size() > 5 ? detail::grad_sink(*in[5]) : nullptr;
        const double* H = saved.data().data();
        const double* G = o.grad.data();
        std::vector<double> carry(lanes);
        for (std::size_t bi = 0; bi < Bn; ++bi) {
          const double* Hb = H + bi * L * lanes;
          std::fill(carry.begin(), carry.end(), 0.0);
          for (std::size_t t = L; t-- > 0;) {
            for (std::size_t k = 0; k < ch; ++k) {
              const std::size_t xi = (bi * L + t) * ch + k;
              const double gy = G[xi], xv = X[xi], dl = Dl[xi];
              if (Dk) {
                if (gX) gX[xi] += Dk[k] * gy;
                if (gDk) gDk[k] += gy * xv;
              }
              for (std::size_t n = 0; n < N; ++n) {
                const std::size_t li = k * N + n, si = (bi * L + t) * N + n;
                const double ht = Hb[t * lanes + li];
                const double hprev = t > 0 ? Hb[(t - 1) * lanes + li] : 0.0;
                if (gC) gC[si] += gy * ht;
                const double gh = Cv[si] * gy + carry[li];
                const double z = dl * A[li];
                const double at = std::exp(z), e = zoh_gain(z);
                const double bx = Bv[si] * xv;
                const double gz = gh * hprev * at + gh * zoh_gain_derivative(z) * dl * bx;
                if (gDl) gDl[xi] += gz * A[li] + gh * e * bx;
                if (gA) gA[li] += gz * dl;
                if (gB) gB[si] += gh * e * dl * xv;
                if (gX) gX[xi] += gh * e * dl * Bv[si];
                carry[li] = at * gh;
              }
            }
          }
        }
      });
}

SelectiveMaps SelectiveMaps::make(ParamStore& ps, const std::string& name, std::size_t width,
                                  std::size_t channels, std::size_t state, Rng& rng) {
  SelectiveMaps m;
  m.delta_proj = Linear::make(ps, name + "/delta", width, channels, rng);
  // Step sizes log-uniform in [1e-3, 1e-1] at init, through inverse softplus.
  std::uniform_real_distribution<double> U(std::log(1e-3), std::log(1e-1));
  auto bias = m.delta_proj.bias.mutable_data();
  for (auto& v : bias) v = std::log(std::expm1(std::exp(U(rng))));
  m.b_proj = Linear::make(ps, name + "/b", width, state, rng, false);
  m.c_proj = Linear::make(ps, name + "/c", width, state, rng, false);
  return m;
}

SelectiveParams selective_params(const SelectiveMaps& maps, const Tensor& tokens) {
  return {softplus(maps.delta_proj(tokens)), maps.b_proj(tokens), maps.c_proj(tokens)};
}

SsmLayer SsmLayer::make(ParamStore& ps, const std::string& name, std::size_t width,
                        std::size_t state, std::size_t mlp_ratio, bool d_skip, Rng& rng) {
  if (state == 0) throw ConfigError(name + ": state dimension must be positive");
  SsmLayer l;
  l.norm = LayerNorm::make(ps, name + "/norm", width);
  l.in_proj = Linear::make(ps, name + "/in", width, width, rng);
  l.maps = SelectiveMaps::make(ps, name + "/select", width, width, state, rng);
  std::vector<double> alog(width * state);
  for (std::size_t k = 0; k < width; ++k)
    for (std::size_t n = 0; n < state; ++n) alog[k * state + n] = std::log(static_cast<double>(n + 1));
  l.a_log = ps.add(name + "/a_log", Tensor({width, state}, std::move(alog)));
  if (d_skip) l.d_skip = ps.add(name + "/d", Tensor::full({width}, 1.0));
  l.out_proj = Linear::make(ps, name + "/out", width, width, rng);
  l.norm2 = LayerNorm::make(ps, name + "/norm2", width);
  l.mlp = Mlp::make(ps, name + "/mlp", width, width * mlp_ratio, rng);
  return l;
}

Tensor SsmLayer::forward(const Tensor& x, ScanMode mode, int threads) const {
  require(x.rank() == 3, "ssm layer: expected [B, L, D]");
  const Tensor u = in_proj(norm(x));
  const SelectiveParams p = selective_params(maps, u);
  const Tensor a = scale(exp(a_log), -1.0);
  Tensor h = add(x, out_proj(selective_scan(u, p.delta, a, p.b, p.c, d_skip, mode, threads)));
  return add(h, mlp(norm2(h)));
}

}  // namespace xt
