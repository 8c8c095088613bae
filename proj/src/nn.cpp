#include "xt/nn.hpp"

#include <cmath>

#include "xt/errors.hpp"
#include "xt/ops.hpp"

namespace xt {

Linear Linear::make(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
                    Rng& rng, bool with_bias, double init_std) {
  Linear l;
  const double sd = init_std > 0.0 ? init_std : 1.0 / std::sqrt(static_cast<double>(in));
  l.weight = ps.add(name + "/weight", Tensor::trunc_normal({in, out}, rng, sd));
  if (with_bias) l.bias = ps.add(name + "/bias", Tensor::zeros({out}));
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

LayerNorm LayerNorm::make(ParamStore& ps, const std::string& name, std::size_t width) {
  LayerNorm n;
  n.gamma = ps.add(name + "/gamma", Tensor::full({width}, 1.0));
  n.beta = ps.add(name + "/beta", Tensor::zeros({width}));
  return n;
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

Mlp Mlp::make(ParamStore& ps, const std::string& name, std::size_t width, std::size_t hidden,
              Rng& rng) {
  return Mlp{Linear::make(ps, name + "/fc1", width, hidden, rng),
             Linear::make(ps, name + "/fc2", hidden, width, rng)};
}

Tensor Mlp::operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }

AttentionWeights AttentionWeights::make(ParamStore& ps, const std::string& name,
                                        std::size_t width, std::size_t heads, Rng& rng) {
  if (heads == 0 || width % heads != 0)
    throw ConfigError(name + ": heads (" + std::to_string(heads) + ") must divide width (" +
                      std::to_string(width) + ")");
  AttentionWeights w;
  w.q = Linear::make(ps, name + "/q", width, width, rng);
  w.k = Linear::make(ps, name + "/k", width, width, rng);
  w.v = Linear::make(ps, name + "/v", width, width, rng);
  w.out = Linear::make(ps, name + "/out", width, width, rng);
  w.heads = heads;
  return w;
}

TransformerBlock TransformerBlock::make(ParamStore& ps, const std::string& name,
                                        std::size_t width, std::size_t heads,
                                        std::size_t mlp_ratio, Rng& rng) {
  TransformerBlock b;
  b.norm1 = LayerNorm::make(ps, name + "/norm1", width);
  b.attn = AttentionWeights::make(ps, name + "/attn", width, heads, rng);
  b.norm2 = LayerNorm::make(ps, name + "/norm2", width);
  b.mlp = Mlp::make(ps, name + "/mlp", width, width * mlp_ratio, rng);
  return b;
}

Tensor self_attention(const AttentionWeights& w, const Tensor& x) {
  const double sc = 1.0 / std::sqrt(static_cast<double>(w.width() / w.heads));
  return w.out(attention(w.q(x), w.k(x), w.v(x), w.heads, sc));
}

Tensor transformer_block(const TransformerBlock& b, const Tensor& x) {
  Tensor h = add(x, self_attention(b.attn, b.norm1(x)));
  return add(h, b.mlp(b.norm2(h)));
}

}  // namespace xt
