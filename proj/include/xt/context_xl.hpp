#pragma once

#include <cstdint>
#include <vector>

#include "xt/linear_attention.hpp"
#include "xt/nn.hpp"

namespace xt {

enum class AttentionKind { Exact, Approx };

/// Attention backend selector shared by the transformer-style context encoders.
struct AttentionChoice {
  AttentionKind kind = AttentionKind::Exact;
  LinearAttentionConfig approx;
  std::uint64_t seed = 0;
};

/// Multi-head attention of q_in over kv_in through the chosen backend,
/// projections included.
Tensor attend(const AttentionWeights& w, const Tensor& q_in, const Tensor& kv_in,
              const AttentionChoice& choice);

struct XLConfig {
  std::size_t depth = 2;
  std::size_t width = 128;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t chunk_regions = 1;  // C
  std::size_t memory_tokens = 0;  // tokens kept per layer; 0 means one chunk
  bool use_memory = true;

  void validate() const;
};

/// Per-layer cached inputs from the previous chunk; never carries gradient.
struct XLMemory {
  std::vector<Tensor> layers;  // [B, L_mem, D] per layer, or undefined when empty
  std::size_t next_chunk = 0;

  std::size_t length(std::size_t layer) const;
};

struct XLLayerResult {
  Tensor output;  // [B, L_cur, D]
  Tensor memory;  // detached layer input, last memory_tokens tokens
};

/// One recurrent layer: queries from `current`, keys/values from
/// SG(memory) ++ current. An undefined or empty memory reduces to a plain
/// transformer block.
XLLayerResult xl_layer_forward(const Tensor& current, const Tensor& memory,
                               const TransformerBlock& w, std::size_t memory_tokens,
                               const AttentionChoice& attn);

struct XLChunk {
  std::size_t index = 0;
  Tensor tokens;  // [B, L_chunk, D]
};

/// Runs `layers` over chunks in order, threading per-layer memory. Chunk
/// indices must continue from memory.next_chunk.
std::vector<Tensor> xl_forward_chunks(const std::vector<XLChunk>& chunks,
                                      const std::vector<TransformerBlock>& layers,
                                      const XLConfig& cfg, XLMemory& memory,
                                      const AttentionChoice& attn);

struct ContextLength {
  std::uint64_t pixels = 0;      // (N + 1) * C * R^2
  std::uint64_t multiplier = 0;  // alpha * beta * N * C
};

/// Effective context in pixels for region side R, XL depth N (0 = no XL)
/// and chunk capacity C.
ContextLength effective_context_length(std::uint64_t region_px, std::uint64_t layers,
                                       std::uint64_t chunk, std::uint64_t alpha = 1,
                                       std::uint64_t beta = 1);

}  // namespace xt
