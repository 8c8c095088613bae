#pragma once

#include <cstdint>
#include <vector>

#include "xt/config.hpp"
#include "xt/tensor.hpp"

namespace xt {

struct LinearAttentionConfig {
  std::size_t hash_bits = 4;
  std::size_t bucket_size = 16;  // cap on bucket members kept per query
  std::size_t samples = 8;       // uniformly sampled keys per query
  double temperature = 0.0;      // score scale; 0 means 1/sqrt(head width)
  std::uint64_t hash_seed = 0x5eed;

  void validate() const;
  static LinearAttentionConfig from_config(const KeyValueConfig& kv, const std::string& prefix);
};

/// Per-query selected keys in CSR form. Bucket members carry weight 1;
/// sampled keys outside the bucket carry the inverse inclusion probability.
struct AttentionSketch {
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<std::size_t> offsets;  // queries + 1
  std::vector<std::uint32_t> index;
  std::vector<double> weight;
  std::vector<std::uint8_t> from_bucket;

  std::size_t selected(std::size_t q) const { return offsets[q + 1] - offsets[q]; }
};

struct AttentionCounters {
  std::uint64_t queries = 0;
  std::uint64_t selected_entries = 0;
  std::uint64_t bucket_entries = 0;
};

/// softmax(Q K^T / sqrt(d)) V for Q: [n, d] (or [B, n, d]), K, V: [m, d].
Tensor exact_attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// Signed random projection hashing of rank-2 Q and K. Returns, per query,
/// the indices of keys sharing all hash bits (uncapped, ascending).
std::vector<std::vector<std::uint32_t>> lsh_bucket(const Tensor& q, const Tensor& k,
                                                   const LinearAttentionConfig& cfg,
                                                   std::uint64_t seed);

/// Sketch for rank-2 Q, K. Hash projections come from cfg.hash_seed; `seed`
/// drives only the sampled portion.
AttentionSketch build_sketch(const Tensor& q, const Tensor& k, const LinearAttentionConfig& cfg,
                             std::uint64_t seed);

/// Attention restricted to each query's sketch and normalized over the
/// weighted selected entries. Q: [n, H*dh] or [B, n, H*dh]; K, V match.
/// Differentiable in Q, K and V (the sketch is held fixed).
Tensor approx_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const LinearAttentionConfig& cfg, std::uint64_t seed,
                        std::size_t heads = 1, AttentionCounters* counters = nullptr);

}  // namespace xt
