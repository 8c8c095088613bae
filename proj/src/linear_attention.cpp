#include "xt/linear_attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "xt/errors.hpp"
#include "xt/ops.hpp"

namespace xt {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined word.
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct HeadView {
  const double* base;
  std::size_t rows;
  std::size_t stride;  // distance between consecutive rows
  const double* row(std::size_t i) const { return base + i * stride; }
};

std::vector<double> hash_planes(std::size_t dh, std::size_t bits, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> planes(bits * dh);
  for (auto& p : planes) p = nd(rng);
  return planes;
}

std::uint32_t hash_code(const double* x, std::size_t dh, const std::vector<double>& planes,
                        std::size_t bits) {
  std::uint32_t code = 0;
  for (std::size_t b = 0; b < bits; ++b) {
    double s = 0.0;
    for (std::size_t c = 0; c < dh; ++c) s += planes[b * dh + c] * x[c];
    if (s > 0.0) code |= 1u << b;
  }
  return code;
}

std::vector<std::uint32_t> codes(const HeadView& x, std::size_t dh,
                                 const std::vector<double>& planes, std::size_t bits) {
  std::vector<std::uint32_t> out(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) out[i] = hash_code(x.row(i), dh, planes, bits);
  return out;
}

void sketch_head(const HeadView& q, const HeadView& k, std::size_t dh,
                 const LinearAttentionConfig& cfg, std::uint64_t hash_seed,
                 std::uint64_t sample_seed, AttentionSketch& sk) {
  const std::size_t n = q.rows, m = k.rows;
  const auto planes = hash_planes(dh, cfg.hash_bits, hash_seed);
  const auto qc = codes(q, dh, planes, cfg.hash_bits);
  const auto kc = codes(k, dh, planes, cfg.hash_bits);
  const std::size_t s = std::min(cfg.samples, m);
  const double sample_weight = s > 0 ? static_cast<double>(m) / static_cast<double>(s) : 0.0;
  sk.queries = n;
  sk.keys = m;
  sk.offsets.assign(1, 0);
  std::vector<std::uint32_t> perm(m);
  std::vector<std::uint8_t> in_bucket(m, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t start = sk.index.size();
    for (std::size_t j = 0; j < m && sk.index.size() - start < cfg.bucket_size; ++j) {
      if (kc[j] != qc[i]) continue;
      sk.index.push_back(static_cast<std::uint32_t>(j));
      sk.weight.push_back(1.0);
      sk.from_bucket.push_back(1);
      in_bucket[j] = 1;
    }
    if (s > 0) {
      // Partial Fisher-Yates: s distinct keys, uniform over all m.
      Rng rng(mix(sample_seed, i));
      std::iota(perm.begin(), perm.end(), 0u);
      for (std::size_t t = 0; t < s; ++t) {
        std::uniform_int_distribution<std::size_t> pick(t, m - 1);
        std::swap(perm[t], perm[pick(rng)]);
      }
      std::sort(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(s));
      for (std::size_t t = 0; t < s; ++t) {
        const std::uint32_t j = perm[t];
        if (in_bucket[j]) continue;  // bucket keeps priority
        sk.index.push_back(j);
        sk.weight.push_back(sample_weight);
        sk.from_bucket.push_back(0);
      }
    }
    for (std::size_t t = start; t < sk.index.size(); ++t)
      if (sk.from_bucket[t]) in_bucket[sk.index[t]] = 0;
    sk.offsets.push_back(sk.index.size());
  }
}

HeadView view2(const Tensor& x) { return {x.data().data(), x.dim(0), x.dim(1)}; }

}  // namespace

void LinearAttentionConfig::validate() const {
  if (bucket_size < 1) throw ConfigError("linear attention: bucket size must be >= 1");
  if (hash_bits > 30) throw ConfigError("linear attention: at most 30 hash bits");
  if (temperature < 0.0) throw ConfigError("linear attention: temperature must be >= 0");
}

LinearAttentionConfig LinearAttentionConfig::from_config(const KeyValueConfig& kv,
                                                         const std::string& p) {
  LinearAttentionConfig c;
  c.hash_bits = static_cast<std::size_t>(kv.get_int(p + "hash_bits", static_cast<long long>(c.hash_bits)));
  c.bucket_size = static_cast<std::size_t>(kv.get_int(p + "bucket_size", static_cast<long long>(c.bucket_size)));
  c.samples = static_cast<std::size_t>(kv.get_int(p + "samples", static_cast<long long>(c.samples)));
  c.temperature = kv.get_double(p + "temperature", c.temperature);
  c.hash_seed = static_cast<std::uint64_t>(kv.get_int(p + "hash_seed", static_cast<long long>(c.hash_seed)));
  c.validate();
  return c;
}

Tensor exact_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  require(q.rank() >= 2 && q.rank() == k.rank() && k.rank() == v.rank(),
          "exact_attention: Q, K, V must share rank");
  require(q.dim(-1) == k.dim(-1), "exact_attention: Q and K widths differ");
  require(k.dim(-2) == v.dim(-2), "exact_attention: K and V lengths differ");
  // Single head over the full width; V may have its own width only if equal.
  require(v.dim(-1) == q.dim(-1), "exact_attention: V width must equal d");
  return attention(q, k, v, 1, 1.0 / std::sqrt(static_cast<double>(q.dim(-1))));
}

std::vector<std::vector<std::uint32_t>> lsh_bucket(const Tensor& q, const Tensor& k,
                                                   const LinearAttentionConfig& cfg,
                                                   std::uint64_t seed) {
  require(q.rank() == 2 && k.rank() == 2, "lsh_bucket: expected rank-2 Q and K");
  require(q.dim(1) == k.dim(1), "lsh_bucket: Q and K widths differ");
  const std::size_t dh = q.dim(1);
  const auto planes = hash_planes(dh, cfg.hash_bits, mix(seed, 0));
  const auto qc = codes(view2(q), dh, planes, cfg.hash_bits);
  const auto kc = codes(view2(k), dh, planes, cfg.hash_bits);
  std::vector<std::vector<std::uint32_t>> out(qc.size());
  for (std::size_t i = 0; i < qc.size(); ++i)
    for (std::size_t j = 0; j < kc.size(); ++j)
      if (kc[j] == qc[i]) out[i].push_back(static_cast<std::uint32_t>(j));
  return out;
}

AttentionSketch build_sketch(const Tensor& q, const Tensor& k, const LinearAttentionConfig& cfg,
                             std::uint64_t seed) {
  cfg.validate();
  require(q.rank() == 2 && k.rank() == 2, "build_sketch: expected rank-2 Q and K");
  require(q.dim(1) == k.dim(1), "build_sketch: Q and K widths differ");
  AttentionSketch sk;
  // Same streams as head 0 of batch item 0 in approx_attention.
  sketch_head(view2(q), view2(k), q.dim(1), cfg, mix(cfg.hash_seed, 0), mix(mix(seed, 0), 0), sk);
  return sk;
}

Tensor approx_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const LinearAttentionConfig& cfg, std::uint64_t seed, std::size_t heads,
                        AttentionCounters* counters) {
  cfg.validate();
  require(q.rank() >= 2 && q.rank() == k.rank() && k.rank() == v.rank(),
          "approx_attention: Q, K, V must share rank");
  const std::size_t D = q.dim(-1);
  require(k.dim(-1) == D && v.dim(-1) == D, "approx_attention: width mismatch");
  require(heads >= 1 && D % heads == 0, "approx_attention: heads must divide width");
  const std::size_t n = q.dim(-2), m = k.dim(-2);
  require(v.dim(-2) == m && m >= 1, "approx_attention: key/value length mismatch");
  const std::size_t B = q.numel() / (n * D);
  require(k.numel() == B * m * D, "approx_attention: batch extents differ");
  const std::size_t dh = D / heads;
  const double sc = cfg.temperature > 0.0 ? cfg.temperature : 1.0 / std::sqrt(static_cast<double>(dh));

  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  auto sketches = std::make_shared<std::vector<AttentionSketch>>(B * heads);
  std::size_t total = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      auto& sk = (*sketches)[b * heads + h];
      sketch_head({Q + b * n * D + h * dh, n, D}, {K + b * m * D + h * dh, m, D}, dh, cfg,
                  mix(cfg.hash_seed, h), mix(mix(seed, b), h), sk);
      total += sk.index.size();
      if (counters) {
        counters->queries += n;
        counters->selected_entries += sk.index.size();
        counters->bucket_entries += static_cast<std::uint64_t>(
            std::count(sk.from_bucket.begin(), sk.from_bucket.end(), 1));
      }
    }

  // Selected-entry probabilities, ledger-counted like the exact path's.
  Tensor probs = Tensor::zeros({total});
  double* P = probs.mutable_data().data();
  std::vector<double> out(B * n * D, 0.0);
  std::size_t base = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const auto& sk = (*sketches)[b * heads + h];
      for (std::size_t i = 0; i < n; ++i) {
        const double* qi = Q + (b * n + i) * D + h * dh;
        double* oi = out.data() + (b * n + i) * D + h * dh;
        const std::size_t lo = sk.offsets[i], hi = sk.offsets[i + 1];
        if (lo == hi) continue;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t t = lo; t < hi; ++t) {
          const double* kj = K + (b * m + sk.index[t]) * D + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s = s * sc + std::log(sk.weight[t]);
          if (std::isnan(s)) throw InvalidNumerics("approx_attention: NaN score");
          P[base + t] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t t = lo; t < hi; ++t) {
          P[base + t] = std::exp(P[base + t] - mx);
          z += P[base + t];
        }
        for (std::size_t t = lo; t < hi; ++t) {
          P[base + t] /= z;
          const double* vj = V + (b * m + sk.index[t]) * D + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += P[base + t] * vj[c];
        }
      }
      base += sk.index.size();
    }

  const bool record = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  Tensor saved = record ? probs : Tensor();
  return detail::make_result(
      q.shape(), std::move(out), detail::promote({&q, &k, &v}), {q, k, v},
      [saved, sketches, B, heads, n, m, D, dh, sc](const TensorImpl& o,
                                                  std::span<const std::shared_ptr<TensorImpl>> in) {
        const double* Q = in[0]->storage->values.data();
        const double* K = in[1]->storage->values.data();
        const double* V = in[2]->storage->values.data();
        double* gQ = detail::grad_sink(*in[0]);
        double* gK = detail::grad_sink(*in[1]);
        double* gV = detail::grad_sink(*in[2]);
        const double* P = saved.data().data();
        const double* G = o.grad.data();
        std::vector<double> dp;
        std::size_t base = 0;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const auto& sk = (*sketches)[b * heads + h];
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t lo = sk.offsets[i], hi = sk.offsets[i + 1];
              const double* gi = G + (b * n + i) * D + h * dh;
              const double* qi = Q + (b * n + i) * D + h * dh;
              dp.assign(hi - lo, 0.0);
              double dot = 0.0;
              for (std::size_t t = lo; t < hi; ++t) {
                const std::size_t j = sk.index[t];
                const double* vj = V + (b * m + j) * D + h * dh;
                const double p = P[base + t];
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
                dp[t - lo] = s;
                dot += p * s;
                if (gV) {
                  double* gvj = gV + (b * m + j) * D + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p * gi[c];
                }
              }
              for (std::size_t t = lo; t < hi; ++t) {
                const std::size_t j = sk.index[t];
                const double ds = P[base + t] * (dp[t - lo] - dot) * sc;
                const double* kj = K + (b * m + j) * D + h * dh;
                if (gQ) {
                  double* gqi = gQ + (b * n + i) * D + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gK) {
                  double* gkj = gK + (b * m + j) * D + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
            base += sk.index.size();
          }
      });
}

}  // namespace xt
