#pragma once

#include <string>
#include <vector>

#include "xt/config.hpp"
#include "xt/context_xl.hpp"
#include "xt/ssm.hpp"
#include "xt/tokenizer.hpp"

namespace xt {

enum class ContextKind { Identity, XL, Hyper, SSM };
enum class PositionalMode { None, Learned, Sinusoidal };

ContextKind parse_context_kind(const std::string& s);
std::string context_kind_name(ContextKind k);
PositionalMode parse_positional_mode(const std::string& s);

struct ContextConfig {
  ContextKind kind = ContextKind::XL;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  // Sequences up to this many tokens are processed whole; longer ones are
  // chunked (XL only).
  std::size_t context_length = 1024;
  std::size_t chunk_regions = 1;
  std::size_t memory_tokens = 0;
  bool use_memory = true;
  AttentionKind xl_attention = AttentionKind::Exact;
  LinearAttentionConfig approx;
  std::size_t state_dim = 16;
  bool d_skip = true;
  ScanMode scan = ScanMode::Parallel;
  PositionalMode positional = PositionalMode::Learned;
  std::size_t max_grid = 64;  // learned tables cover this many region rows/cols

  // Keys under "context.": kind, depth, heads, mlp_ratio, context_length,
  // chunk_regions, memory_tokens, use_memory, xl_attention (exact|approx),
  // hash_bits, bucket_size, samples, hash_seed, state_dim, d_skip,
  // scan (sequential|parallel), positional (none|learned|sinusoidal), max_grid.
  static ContextConfig from_config(const KeyValueConfig& kv, const std::string& prefix = "context.");
};

/// 2D positional embedding over (region row, region col, row, col).
struct PositionalEmbedding2D {
  PositionalMode mode = PositionalMode::None;
  std::size_t width = 0;
  // Learned per-axis tables, zero-initialized: [extent, width].
  Tensor region_row, region_col, row, col;

  static PositionalEmbedding2D make(ParamStore& ps, const std::string& name,
                                    PositionalMode mode, std::size_t width,
                                    std::size_t max_grid, std::size_t map_side);
  /// [T, width] embedding for the given coordinates.
  Tensor embed(const std::vector<TokenCoord>& coords, std::size_t map_rows,
               std::size_t map_cols) const;
};

// Adds the positional embedding to every token; shape is unchanged.
FeatureSequence add_2d_positional(const FeatureSequence& seq, const PositionalEmbedding2D& pe);

/// Stage 2. Identity passes features through (the region-only ablation).
class ContextEncoder {
 public:
  ContextEncoder() = default;
  ContextEncoder(ParamStore& ps, ContextConfig cfg, std::size_t width, Rng& rng,
                 const std::string& name = "context");

  const ContextConfig& config() const { return cfg_; }
  bool chunked(std::size_t sequence_length) const;
  XLConfig xl_config(std::size_t tokens_per_region) const;

  // Whole-sequence pass over [B, T, D].
  Tensor forward(const Tensor& x, std::uint64_t seed, int threads = 1) const;
  // One XL chunk; memory is threaded by the caller.
  Tensor forward_chunk(const Tensor& x, std::size_t chunk_index, std::size_t tokens_per_region,
                       XLMemory& memory, std::uint64_t seed) const;

 private:
  AttentionChoice choice(std::uint64_t seed) const;

  ContextConfig cfg_;
  std::vector<TransformerBlock> blocks_;
  std::vector<SsmLayer> ssm_;
  LayerNorm norm_;
};

}  // namespace xt
