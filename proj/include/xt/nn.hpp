#pragma once

#include <string>

#include "xt/params.hpp"
#include "xt/tensor.hpp"

namespace xt {

/// y = x W + b with W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;  // undefined when the layer has no bias

  static Linear make(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
                     Rng& rng, bool with_bias = true, double init_std = 0.0);
  Tensor operator()(const Tensor& x) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm make(ParamStore& ps, const std::string& name, std::size_t width);
  Tensor operator()(const Tensor& x) const;
};

struct Mlp {
  Linear fc1;
  Linear fc2;

  static Mlp make(ParamStore& ps, const std::string& name, std::size_t width, std::size_t hidden,
                  Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

/// Separate q/k/v/output projections for multi-head attention.
struct AttentionWeights {
  Linear q, k, v, out;
  std::size_t heads = 1;

  static AttentionWeights make(ParamStore& ps, const std::string& name, std::size_t width,
                               std::size_t heads, Rng& rng);
  std::size_t width() const { return q.in_features(); }
};

/// Pre-norm transformer block: x + attn(LN x), then x + mlp(LN x).
struct TransformerBlock {
  LayerNorm norm1;
  AttentionWeights attn;
  LayerNorm norm2;
  Mlp mlp;

  static TransformerBlock make(ParamStore& ps, const std::string& name, std::size_t width,
                               std::size_t heads, std::size_t mlp_ratio, Rng& rng);
};

// Exact multi-head self-attention over [B, T, D] (projections included).
Tensor self_attention(const AttentionWeights& w, const Tensor& x);

// Full block with exact self-attention.
Tensor transformer_block(const TransformerBlock& b, const Tensor& x);

}  // namespace xt
