#include "xt/context_xl.hpp"

#include <cmath>

#include "xt/errors.hpp"
#include "xt/ops.hpp"

namespace xt {

void XLConfig::validate() const {
  if (depth < 1) throw ConfigError("xl: depth must be >= 1");
  if (chunk_regions < 1) throw ConfigError("xl: chunk capacity must be >= 1");
  if (heads == 0 || width % heads != 0) throw ConfigError("xl: heads must divide width");
}

std::size_t XLMemory::length(std::size_t layer) const {
  if (layer >= layers.size() || !layers[layer].defined()) return 0;
  return layers[layer].dim(1);
}

Tensor attend(const AttentionWeights& w, const Tensor& q_in, const Tensor& kv_in,
              const AttentionChoice& choice) {
  const Tensor q = w.q(q_in), k = w.k(kv_in), v = w.v(kv_in);
  Tensor a;
  if (choice.kind == AttentionKind::Exact) {
    a = attention(q, k, v, w.heads, 1.0 / std::sqrt(static_cast<double>(w.width() / w.heads)));
  } else {
    a = approx_attention(q, k, v, choice.approx, choice.seed, w.heads);
  }
  return w.out(a);
}

XLLayerResult xl_layer_forward(const Tensor& current, const Tensor& memory,
                               const TransformerBlock& w, std::size_t memory_tokens,
                               const AttentionChoice& attn) {
  require(current.rank() == 3, "xl_layer_forward: current must be [B, L, D]");
  require(current.dim(2) == w.attn.width(),
          "xl_layer_forward: token width " + std::to_string(current.dim(2)) +
              " does not match layer width " + std::to_string(w.attn.width()));
  const bool has_memory = memory.defined() && memory.numel() > 0;
  if (has_memory) {
    require(memory.rank() == 3 && memory.dim(0) == current.dim(0) &&
                memory.dim(2) == current.dim(2),
            "xl_layer_forward: memory " + shape_str(memory.shape()) +
                " incompatible with current " + shape_str(current.shape()));
  }
  const Tensor n_cur = w.norm1(current);
  const Tensor kv = has_memory ? concat({w.norm1(stop_gradient(memory)), n_cur}, 1) : n_cur;
  Tensor h = add(current, attend(w.attn, n_cur, kv, attn));
  XLLayerResult r;
  r.output = add(h, w.mlp(w.norm2(h)));
  const std::size_t L = current.dim(1);
  const std::size_t keep = memory_tokens == 0 ? L : std::min(memory_tokens, L);
  {
    PhaseScope cache(Phase::Cache);
    r.memory = slice(stop_gradient(current), 1, L - keep, L);
  }
  return r;
}

std::vector<Tensor> xl_forward_chunks(const std::vector<XLChunk>& chunks,
                                      const std::vector<TransformerBlock>& layers,
                                      const XLConfig& cfg, XLMemory& memory,
                                      const AttentionChoice& attn) {
  require(!layers.empty(), "xl_forward_chunks: no layers");
  if (memory.layers.size() != layers.size()) memory.layers.assign(layers.size(), Tensor());
  std::vector<Tensor> outputs;
  outputs.reserve(chunks.size());
  for (const auto& ch : chunks) {
    require(ch.index == memory.next_chunk,
            "xl_forward_chunks: chunk " + std::to_string(ch.index) + " arrived, expected " +
                std::to_string(memory.next_chunk));
    Tensor x = ch.tokens;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      AttentionChoice a = attn;
      a.seed = attn.seed * 1000003ULL + ch.index * 131ULL + l;
      const Tensor mem = cfg.use_memory ? memory.layers[l] : Tensor();
      XLLayerResult r = xl_layer_forward(x, mem, layers[l], cfg.memory_tokens, a);
      if (cfg.use_memory) memory.layers[l] = r.memory;
      x = r.output;
    }
    outputs.push_back(x);
    ++memory.next_chunk;
  }
  return outputs;
}

ContextLength effective_context_length(std::uint64_t region_px, std::uint64_t layers,
                                       std::uint64_t chunk, std::uint64_t alpha,
                                       std::uint64_t beta) {
  ContextLength c;
  c.pixels = (layers + 1) * chunk * region_px * region_px;
  c.multiplier = alpha * beta * layers * chunk;
  return c;
}

}  // namespace xt
