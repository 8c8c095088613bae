#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "xt/errors.hpp"
#include "xt/grad_check.hpp"
#include "xt/ops.hpp"
#include "xt/ssm.hpp"
#include "support.hpp"

using namespace xt;

namespace {

std::vector<double> uniform(std::size_t n, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> U(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = U(rng);
  return v;
}

DiscreteSsm random_system(std::size_t L, std::size_t ch, std::size_t N, Rng& rng, bool skip) {
  DiscreteSsm s;
  s.length = L;
  s.channels = ch;
  s.state = N;
  s.a_bar = uniform(L * ch * N, -0.99, 0.99, rng);
  s.b_bar = uniform(L * ch * N, -1.0, 1.0, rng);
  s.c = uniform(L * N, -1.0, 1.0, rng);
  if (skip) s.d = uniform(ch, -1.0, 1.0, rng);
  return s;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Direct loop over the selective recurrence with per-step ZOH.
std::vector<double> selective_oracle(const Tensor& x, const Tensor& delta, const Tensor& a,
                                     const Tensor& b, const Tensor& c, const Tensor& d) {
  const std::size_t B = x.dim(0), L = x.dim(1), ch = x.dim(2), N = a.dim(1);
  std::vector<double> y(x.numel(), 0.0);
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t k = 0; k < ch; ++k) {
      std::vector<double> h(N, 0.0);
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t xi = (bi * L + t) * ch + k;
        double out = d.defined() ? d.data()[k] * x.data()[xi] : 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const DiscreteStep s = zoh_discretize(a.data()[k * N + n], b.data()[(bi * L + t) * N + n], delta.data()[xi]);
          h[n] = s.a_bar * h[n] + s.b_bar * x.data()[xi];
          out += c.data()[(bi * L + t) * N + n] * h[n];
        }
        y[xi] = out;
      }
    }
  return y;
}

}  // namespace

TEST_CASE("zero-order hold") {
  SUBCASE("A = -1, delta = ln 2") {
    const DiscreteStep s = zoh_discretize(-1.0, 1.0, std::log(2.0));
    CHECK(s.a_bar == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.b_bar == doctest::Approx(0.5).epsilon(1e-14));
  }
  SUBCASE("small steps approach delta * B") {
    for (double delta : {1e-4, 1e-7, 1e-10}) {
      const DiscreteStep s = zoh_discretize(-3.0, 2.0, delta);
      CHECK(s.a_bar == doctest::Approx(1.0).epsilon(1e-3));
      CHECK(s.b_bar == doctest::Approx(2.0 * delta).epsilon(1e-3));
    }
  }
  SUBCASE("A = 0 uses the series branch") {
    const DiscreteStep s = zoh_discretize(0.0, 1.5, 0.3);
    CHECK(s.a_bar == 1.0);
    CHECK(s.b_bar == doctest::Approx(0.45).epsilon(1e-15));
  }
  SUBCASE("series and closed form agree across the threshold") {
    for (double z : {-2e-6, -1e-6, -5e-7, 5e-7, 1e-6, 2e-6}) CHECK(zoh_gain(z) == doctest::Approx(std::expm1(z) / z).epsilon(1e-12));
    for (double z : {-2e-2, -5e-3, 5e-3, 2e-2}) {
      const double h = 1e-6;
      CHECK(zoh_gain_derivative(z) == doctest::Approx((zoh_gain(z + h) - zoh_gain(z - h)) / (2 * h)).epsilon(1e-7));
    }
  }
  CHECK_THROWS_AS(zoh_discretize(-1.0, 1.0, 0.0), ContractViolation);
  CHECK_THROWS_AS(zoh_discretize(-1.0, 1.0, -0.1), ContractViolation);
}

TEST_CASE("scan operator") {
  Rng rng(1);
  const auto v = uniform(6, -2.0, 2.0, rng);
  const ScanElement p{v[0], v[1]}, q{v[2], v[3]}, r{v[4], v[5]};
  const ScanElement left = scan_combine(scan_combine(p, q), r);
  const ScanElement right = scan_combine(p, scan_combine(q, r));
  CHECK(std::abs(left.a - right.a) <= 1e-12);
  CHECK(std::abs(left.b - right.b) <= 1e-12);
  // Applied to h: second(first(h)).
  const double h = 0.7;
  const ScanElement pq = scan_combine(p, q);
  CHECK(pq.a * h + pq.b == doctest::Approx(q.a * (p.a * h + p.b) + q.b).epsilon(1e-14));
}

TEST_CASE("sequential scan examples") {
  const std::vector<double> half{0.5}, one{1.0};
  const DiscreteSsm s = DiscreteSsm::time_invariant(3, 1, 1, half, half, one, {});
  const auto y = ssm_scan_sequential(s, std::vector<double>{1, 1, 1});
  REQUIRE(y.size() == 3);
  CHECK(std::abs(y[0] - 0.5) <= 1e-12);
  CHECK(std::abs(y[1] - 0.75) <= 1e-12);
  CHECK(std::abs(y[2] - 0.875) <= 1e-12);

  Rng rng(2);
  const DiscreteSsm r = random_system(20, 3, 4, rng, true);
  const auto zero = ssm_scan_sequential(r, std::vector<double>(60, 0.0));
  CHECK(std::all_of(zero.begin(), zero.end(), [](double v) { return v == 0.0; }));

  SUBCASE("impulse response decays geometrically") {
    const std::vector<double> a{0.8}, b{0.3}, c{2.0};
    const DiscreteSsm g = DiscreteSsm::time_invariant(10, 1, 1, a, b, c, {});
    std::vector<double> x(10, 0.0);
    x[0] = 1.0;
    const auto yi = ssm_scan_sequential(g, x);
    for (std::size_t t = 0; t < 10; ++t) CHECK(yi[t] == doctest::Approx(2.0 * std::pow(0.8, t) * 0.3).epsilon(1e-13));
  }
  SUBCASE("non-finite state is an error") {
    std::vector<double> x(60, 1.0);
    x[7] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(ssm_scan_sequential(r, x), InvalidNumerics);
    CHECK_THROWS_AS(ssm_scan_parallel(r, x), InvalidNumerics);
  }
}

TEST_CASE("parallel scan matches the sequential recurrence") {
  Rng rng(3);
  std::uniform_int_distribution<std::size_t> len(1, 1024), small(1, 4);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t L = trial == 0 ? 1 : len(rng), ch = small(rng), N = small(rng);
    const DiscreteSsm s = random_system(L, ch, N, rng, trial % 2 == 0);
    const auto x = uniform(L * ch, -1.0, 1.0, rng);
    const auto seq = ssm_scan_sequential(s, x);
    const std::size_t block = std::vector<std::size_t>{1, 7, 64, 1000}[trial % 4];
    const auto par = ssm_scan_parallel(s, x, 1 + trial % 3, block);
    worst = std::max(worst, max_abs_diff(seq, par));
  }
  CHECK(worst < 1e-10);

  SUBCASE("L = 1 is C B x + D x") {
    const std::vector<double> a{0.3}, b{0.6}, c{1.5}, d{0.25};
    const DiscreteSsm one = DiscreteSsm::time_invariant(1, 1, 1, a, b, c, d);
    const std::vector<double> x{2.0};
    CHECK(ssm_scan_sequential(one, x)[0] == doctest::Approx(1.5 * 0.6 * 2.0 + 0.5).epsilon(1e-15));
    CHECK(ssm_scan_parallel(one, x)[0] == doctest::Approx(1.5 * 0.6 * 2.0 + 0.5).epsilon(1e-15));
  }
  SUBCASE("result is independent of the block partition") {
    const DiscreteSsm s = random_system(300, 2, 3, rng, true);
    const auto x = uniform(600, -1.0, 1.0, rng);
    const auto ref = ssm_scan_parallel(s, x, 1, 300);
    for (std::size_t block : {1, 2, 3, 17, 64, 299})
      for (int threads : {1, 2, 4}) CHECK(max_abs_diff(ssm_scan_parallel(s, x, threads, block), ref) < 1e-12);
  }
}

TEST_CASE("time-invariant systems are linear and stable") {
  Rng rng(4);
  const std::size_t L = 200, ch = 2, N = 3;
  const auto a_bar = uniform(ch * N, -0.95, 0.95, rng);
  const auto b_bar = uniform(ch * N, -1.0, 1.0, rng);
  const auto c = uniform(N, -1.0, 1.0, rng);
  const auto d = uniform(ch, -1.0, 1.0, rng);
  const DiscreteSsm s = DiscreteSsm::time_invariant(L, ch, N, a_bar, b_bar, c, d);
  const auto x1 = uniform(L * ch, -1.0, 1.0, rng), x2 = uniform(L * ch, -1.0, 1.0, rng);
  const double alpha = -1.7;
  std::vector<double> mix(L * ch);
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * x1[i] + x2[i];
  const auto y1 = ssm_scan_sequential(s, x1), y2 = ssm_scan_sequential(s, x2), ym = ssm_scan_sequential(s, mix);
  double err = 0.0;
  for (std::size_t i = 0; i < ym.size(); ++i) err = std::max(err, std::abs(ym[i] - (alpha * y1[i] + y2[i])));
  CHECK(err < 1e-12);

  // Single state lane: |h_t| <= |b_bar| max|x| / (1 - |a_bar|), read through C = 1.
  for (double ab : {-0.9, 0.5, 0.99}) {
    const std::vector<double> av{ab}, bv{0.7}, cv{1.0};
    const DiscreteSsm lane = DiscreteSsm::time_invariant(2000, 1, 1, av, bv, cv, {});
    const auto x = uniform(2000, -1.0, 1.0, rng);
    const auto h = ssm_scan_sequential(lane, x);
    const double bound = 0.7 / (1.0 - std::abs(ab));
    CHECK(std::all_of(h.begin(), h.end(), [&](double v) { return std::abs(v) <= bound + 1e-12; }));
  }
}

TEST_CASE("selective scan") {
  Rng rng(5);
  const std::size_t B = 2, L = 8, ch = 3, N = 2;
  const Tensor x = Tensor::randn({B, L, ch}, rng);
  const Tensor delta = exp(Tensor::randn({B, L, ch}, rng, 0.5));
  const Tensor a = scale(exp(Tensor::randn({ch, N}, rng, 0.3)), -1.0);
  const Tensor b = Tensor::randn({B, L, N}, rng), c = Tensor::randn({B, L, N}, rng);
  const Tensor d = Tensor::randn({ch}, rng);

  const auto oracle = selective_oracle(x, delta, a, b, c, d);
  const Tensor ys = selective_scan(x, delta, a, b, c, d, ScanMode::Sequential);
  const Tensor yp = selective_scan(x, delta, a, b, c, d, ScanMode::Parallel, 2);
  CHECK(max_abs_diff(ys.data(), oracle) < 1e-12);
  CHECK(max_abs_diff(yp.data(), oracle) < 1e-10);
  const auto no_skip = selective_oracle(x, delta, a, b, c, Tensor());
  CHECK(max_abs_diff(selective_scan(x, delta, a, b, c, Tensor()).data(), no_skip) < 1e-12);

  SUBCASE("finite differences through discretization and scan") {
    const Tensor w = Tensor::randn({B, L, ch}, rng);
    for (ScanMode mode : {ScanMode::Sequential, ScanMode::Parallel}) {
      auto f = [&](const Tensor& xx, const Tensor& dd, const Tensor& aa, const Tensor& bb, const Tensor& cc, const Tensor& sk) {
        return sum(mul(selective_scan(xx, dd, aa, bb, cc, sk, mode), w));
      };
      CHECK(grad_check([&](const Tensor& v) { return f(v, delta, a, b, c, d); }, x) < 1e-5);
      CHECK(grad_check([&](const Tensor& v) { return f(x, v, a, b, c, d); }, delta) < 1e-5);
      CHECK(grad_check([&](const Tensor& v) { return f(x, delta, v, b, c, d); }, a) < 1e-5);
      CHECK(grad_check([&](const Tensor& v) { return f(x, delta, a, v, c, d); }, b) < 1e-5);
      CHECK(grad_check([&](const Tensor& v) { return f(x, delta, a, b, v, d); }, c) < 1e-5);
      CHECK(grad_check([&](const Tensor& v) { return f(x, delta, a, b, c, v); }, d) < 1e-5);
    }
  }
  SUBCASE("non-finite input is an error") {
    Tensor bad = x.clone();
    bad.mutable_data()[5] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(selective_scan(bad, delta, a, b, c, d), InvalidNumerics);
  }
}

TEST_CASE("selective parameters") {
  ParamStore ps;
  Rng rng(6);
  SelectiveMaps maps = SelectiveMaps::make(ps, "s", 4, 3, 2, rng);
  for (double v : maps.delta_proj.bias.data()) {
    const double sp = std::log1p(std::exp(v));
    CHECK(sp >= 1e-3 * (1 - 1e-12));
    CHECK(sp <= 1e-1 * (1 + 1e-12));
  }

  SUBCASE("two identical tokens give identical parameters") {
    const Tensor tok = Tensor::randn({1, 1, 4}, rng);
    const SelectiveParams p = selective_params(maps, concat({tok, tok}, 1));
    for (const Tensor* t : {&p.delta, &p.b, &p.c}) {
      const std::size_t w = t->dim(2);
      for (std::size_t j = 0; j < w; ++j) CHECK(t->data()[j] == t->data()[w + j]);
    }
    for (double v : p.delta.data()) CHECK(v > 0.0);
  }
  SUBCASE("constant maps reduce to a time-invariant system") {
    for (Linear* l : {&maps.delta_proj, &maps.b_proj, &maps.c_proj}) l->weight = Tensor::zeros(l->weight.shape());
    maps.b_proj.bias = Tensor({2}, {0.4, -0.3});
    maps.c_proj.bias = Tensor({2}, {1.2, 0.5});
    const std::size_t L = 12;
    const Tensor tokens = Tensor::randn({1, L, 4}, rng);
    const SelectiveParams p = selective_params(maps, tokens);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t k = 0; k < 3; ++k)
        CHECK(p.delta.data()[t * 3 + k] == doctest::Approx(std::log1p(std::exp(maps.delta_proj.bias.data()[k]))).epsilon(1e-14));

    const Tensor a({3, 2}, {-1.0, -2.0, -1.0, -2.0, -1.0, -2.0});
    const Tensor x = Tensor::randn({1, L, 3}, rng);
    const Tensor y = selective_scan(x, p.delta, a, p.b, p.c, Tensor());
    // Per-channel time-invariant system from a single ZOH step each.
    for (std::size_t k = 0; k < 3; ++k) {
      const double dk = p.delta.data()[k];
      std::vector<double> ab, bb;
      for (std::size_t n = 0; n < 2; ++n) {
        const DiscreteStep s = zoh_discretize(a.data()[k * 2 + n], p.b.data()[n], dk);
        ab.push_back(s.a_bar);
        bb.push_back(s.b_bar);
      }
      const DiscreteSsm lti = DiscreteSsm::time_invariant(L, 1, 2, ab, bb, std::vector<double>{1.2, 0.5}, {});
      std::vector<double> xk(L);
      for (std::size_t t = 0; t < L; ++t) xk[t] = x.data()[t * 3 + k];
      const auto yk = ssm_scan_sequential(lti, xk);
      for (std::size_t t = 0; t < L; ++t) CHECK(y.data()[t * 3 + k] == doctest::Approx(yk[t]).epsilon(1e-12));
    }
  }
}

TEST_CASE("ssm layer") {
  ParamStore ps;
  Rng rng(7);
  const SsmLayer layer = SsmLayer::make(ps, "ssm", 4, 3, 2, true, rng);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t n = 0; n < 3; ++n) CHECK(-std::exp(layer.a_log.data()[k * 3 + n]) == doctest::Approx(-(double)(n + 1)));
  CHECK_THROWS_AS(SsmLayer::make(ps, "bad", 4, 0, 2, true, rng), ConfigError);

  const Tensor x = Tensor::randn({2, 6, 4}, rng);
  const Tensor ys = layer.forward(x, ScanMode::Sequential);
  const Tensor yp = layer.forward(x, ScanMode::Parallel, 2);
  CHECK(max_abs_diff(ys.data(), yp.data()) < 1e-10);

  // Causal: editing the last token leaves earlier outputs unchanged.
  Tensor x2 = x.clone();
  for (std::size_t j = 0; j < 4; ++j) x2.mutable_data()[5 * 4 + j] += 0.5 * static_cast<double>(j + 1);
  const Tensor y2 = layer.forward(x2);
  for (std::size_t i = 0; i < 5 * 4; ++i) CHECK(y2.data()[i] == ys.data()[i]);
  CHECK(max_abs_diff(std::span(y2.data()).subspan(5 * 4, 4), std::span(ys.data()).subspan(5 * 4, 4)) > 1e-8);

  const Tensor w = Tensor::randn({2, 6, 4}, rng);
  CHECK(grad_check([&](const Tensor& v) { return sum(mul(layer.forward(v), w)); }, x) < 1e-5);
  auto loss = [&] { return sum(mul(layer.forward(x), w)); };
  CHECK(testing::param_grad_check(loss, ps.get("ssm/a_log"), 1e-4) < 1e-5);
  CHECK(testing::param_grad_check(loss, ps.get("ssm/select/delta/bias")) < 1e-5);
}
