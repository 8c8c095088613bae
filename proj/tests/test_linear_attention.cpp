#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "xt/errors.hpp"
#include "xt/grad_check.hpp"
#include "xt/linear_attention.hpp"
#include "xt/ops.hpp"

using namespace xt;

namespace {

Tensor randn(Shape s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return Tensor::randn(std::move(s), rng, sd);
}

Tensor identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(v));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("exact attention") {
  SUBCASE("one key returns its value") {
    const Tensor v({1, 3}, {0.5, -2.0, 7.0});
    const Tensor y = exact_attention(randn({1, 3}, 1), randn({1, 3}, 2), v);
    for (std::size_t i = 0; i < 3; ++i) CHECK(y.data()[i] == doctest::Approx(v.data()[i]).epsilon(1e-15));
  }
  SUBCASE("identical keys average the values") {
    const Tensor row = randn({1, 4}, 3);
    const Tensor k = concat({row, row, row, row, row}, 0);
    const Tensor v = randn({5, 4}, 4);
    const Tensor y = exact_attention(randn({3, 4}, 5), k, v);
    for (std::size_t c = 0; c < 4; ++c) {
      double mean = 0.0;
      for (std::size_t j = 0; j < 5; ++j) mean += v.data()[j * 4 + c] / 5.0;
      for (std::size_t i = 0; i < 3; ++i) CHECK(y.data()[i * 4 + c] == doctest::Approx(mean).epsilon(1e-12));
    }
  }
  SUBCASE("gradients") {
    const Tensor q = randn({4, 6}, 6), k = randn({5, 6}, 7), v = randn({5, 6}, 8), w = randn({4, 6}, 9);
    CHECK(grad_check([&](const Tensor& x) { return sum(mul(exact_attention(x, k, v), w)); }, q) < 1e-6);
    CHECK(grad_check([&](const Tensor& x) { return sum(mul(exact_attention(q, x, v), w)); }, k) < 1e-6);
    CHECK(grad_check([&](const Tensor& x) { return sum(mul(exact_attention(q, k, x), w)); }, v) < 1e-6);
  }
}

TEST_CASE("hash buckets") {
  LinearAttentionConfig cfg;
  const Tensor x = randn({8, 16}, 10);
  SUBCASE("a query always shares a bucket with an identical key") {
    for (std::size_t bits : {1, 2, 4, 8, 16}) {
      cfg.hash_bits = bits;
      const auto b = lsh_bucket(x, x, cfg, 77);
      for (std::size_t i = 0; i < 8; ++i)
        CHECK(std::find(b[i].begin(), b[i].end(), static_cast<std::uint32_t>(i)) != b[i].end());
    }
  }
  SUBCASE("one bit never pairs opposite vectors") {
    cfg.hash_bits = 1;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto b = lsh_bucket(x, scale(x, -1.0), cfg, seed);
      for (std::size_t i = 0; i < 8; ++i)
        CHECK(std::find(b[i].begin(), b[i].end(), static_cast<std::uint32_t>(i)) == b[i].end());
    }
  }
  SUBCASE("empty buckets leave only sampled keys") {
    cfg.hash_bits = 1;
    cfg.samples = 3;
    const Tensor q = randn({1, 16}, 11);
    const Tensor k = concat({scale(q, -1.0), scale(q, -2.0), scale(q, -0.5), scale(q, -3.0)}, 0);
    const auto b = lsh_bucket(q, k, cfg, cfg.hash_seed);
    CHECK(b[0].empty());
    const AttentionSketch sk = build_sketch(q, k, cfg, 5);
    CHECK(sk.selected(0) == 3);
    for (std::size_t t = 0; t < sk.index.size(); ++t) {
      CHECK(sk.from_bucket[t] == 0);
      CHECK(sk.weight[t] == doctest::Approx(4.0 / 3.0));
    }
    const Tensor y = approx_attention(q, k, randn({4, 16}, 12), cfg, 5);
    for (double v : y.data()) CHECK(std::isfinite(v));
  }
  SUBCASE("sketch buckets match lsh_bucket, capped") {
    cfg.hash_bits = 2;
    cfg.bucket_size = 3;
    cfg.samples = 0;
    const Tensor q = randn({6, 16}, 13), k = randn({20, 16}, 14);
    const auto b = lsh_bucket(q, k, cfg, cfg.hash_seed);
    const AttentionSketch sk = build_sketch(q, k, cfg, 0);
    for (std::size_t i = 0; i < 6; ++i) {
      const std::size_t expect = std::min<std::size_t>(3, b[i].size());
      REQUIRE(sk.selected(i) == expect);
      for (std::size_t t = 0; t < expect; ++t) CHECK(sk.index[sk.offsets[i] + t] == b[i][t]);
    }
  }
}

TEST_CASE("full sketch reproduces exact attention") {
  const Tensor q = randn({64, 16}, 20), k = randn({64, 16}, 21), v = randn({64, 16}, 22);
  const Tensor exact = exact_attention(q, k, v);
  LinearAttentionConfig all_sampled;
  all_sampled.samples = 64;
  CHECK(max_abs_diff(approx_attention(q, k, v, all_sampled, 3), exact) <= 1e-10);
  LinearAttentionConfig all_bucketed;
  all_bucketed.hash_bits = 0;
  all_bucketed.bucket_size = 64;
  all_bucketed.samples = 0;
  CHECK(max_abs_diff(approx_attention(q, k, v, all_bucketed, 3), exact) <= 1e-10);
}

TEST_CASE("approximate attention rows are convex combinations of values") {
  LinearAttentionConfig cfg;
  const Tensor q = randn({16, 16}, 30), k = randn({16, 16}, 31);
  const Tensor y = approx_attention(q, k, identity(16), cfg, 9);
  for (std::size_t i = 0; i < 16; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 16; ++j) {
      CHECK(y.data()[i * 16 + j] >= 0.0);
      s += y.data()[i * 16 + j];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("a dominant in-bucket key keeps the argmax") {
  // Unit-norm queries scaled to 4 and keys k_i = 16 q_i: q_i shares every hash
  // bit with its own key, whose score leads every other key by >= 10.
  LinearAttentionConfig cfg;
  std::size_t agree = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Tensor q = randn({16, 16}, 1000 + trial);
    for (std::size_t i = 0; i < 16; ++i) {
      double n2 = 0.0;
      for (std::size_t c = 0; c < 16; ++c) n2 += q.data()[i * 16 + c] * q.data()[i * 16 + c];
      for (std::size_t c = 0; c < 16; ++c) q.mutable_data()[i * 16 + c] *= 4.0 / std::sqrt(n2);
    }
    const Tensor k = scale(q, 16.0);
    const Tensor scores = scale(matmul(q, k, true), 0.25);
    bool margin = true;
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 16; ++j)
        if (j != i) margin = margin && scores.data()[i * 16 + i] - scores.data()[i * 16 + j] >= 10.0;
    REQUIRE(margin);
    const Tensor approx = approx_attention(q, k, identity(16), cfg, trial);
    bool ok = true;
    for (std::size_t i = 0; i < 16; ++i) {
      const auto row = approx.data().subspan(i * 16, 16);
      ok = ok && static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == i;
    }
    agree += ok;
  }
  CHECK(agree >= 99);
}

TEST_CASE("seeds vary only the sampled portion") {
  LinearAttentionConfig cfg;
  const Tensor q = randn({32, 16}, 40), k = randn({32, 16}, 41), v = randn({32, 16}, 42);
  const AttentionSketch a = build_sketch(q, k, cfg, 1), b = build_sketch(q, k, cfg, 2), a2 = build_sketch(q, k, cfg, 1);
  CHECK(a.index == a2.index);
  CHECK(a.weight == a2.weight);
  bool differs = false;
  for (std::size_t i = 0; i < 32; ++i) {
    std::vector<std::uint32_t> ba, bb, sa, sb;
    for (std::size_t t = a.offsets[i]; t < a.offsets[i + 1]; ++t) (a.from_bucket[t] ? ba : sa).push_back(a.index[t]);
    for (std::size_t t = b.offsets[i]; t < b.offsets[i + 1]; ++t) (b.from_bucket[t] ? bb : sb).push_back(b.index[t]);
    CHECK(ba == bb);
    differs = differs || sa != sb;
  }
  CHECK(differs);
  const Tensor y1 = approx_attention(q, k, v, cfg, 1), y2 = approx_attention(q, k, v, cfg, 1);
  CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
}

TEST_CASE("selected entries grow linearly with sequence length") {
  LinearAttentionConfig cfg;
  std::vector<double> per_query;
  for (std::size_t m : {64, 128, 256, 512}) {
    AttentionCounters c;
    approx_attention(randn({m, 16}, m), randn({m, 16}, m + 1), randn({m, 16}, m + 2), cfg, 0, 1, &c);
    CHECK(c.queries == m);
    CHECK(c.selected_entries <= m * (cfg.bucket_size + cfg.samples));
    per_query.push_back(static_cast<double>(c.selected_entries) / static_cast<double>(m));
  }
  // Entries per query stay bounded instead of growing with m.
  CHECK(per_query.back() <= static_cast<double>(cfg.bucket_size + cfg.samples));
  CHECK(per_query.back() / per_query.front() < 2.0);
}

TEST_CASE("approximate attention gradients") {
  LinearAttentionConfig cfg;
  cfg.hash_bits = 2;
  cfg.samples = 3;
  const Tensor q = randn({2, 6, 8}, 50), k = randn({2, 7, 8}, 51), v = randn({2, 7, 8}, 52), w = randn({2, 6, 8}, 53);
  auto f = [&](const Tensor& qq, const Tensor& kk, const Tensor& vv) {
    return sum(mul(approx_attention(qq, kk, vv, cfg, 4, 2), w));
  };
  // Hash codes depend on Q and K, so central differences stay on one sketch
  // only when the perturbation flips no sign; h = 1e-5 is far below the
  // smallest projection margin here.
  CHECK(grad_check([&](const Tensor& x) { return f(q, k, x); }, v) < 1e-6);
  CHECK(grad_check([&](const Tensor& x) { return f(x, k, v); }, q) < 1e-6);
  CHECK(grad_check([&](const Tensor& x) { return f(q, x, v); }, k) < 1e-6);
}

TEST_CASE("linear attention config") {
  LinearAttentionConfig c;
  c.bucket_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  const auto kv = KeyValueConfig::parse("context.hash_bits=3\ncontext.samples=5\n");
  const auto p = LinearAttentionConfig::from_config(kv, "context.");
  CHECK(p.hash_bits == 3);
  CHECK(p.samples == 5);
  CHECK(p.bucket_size == 16);
}
