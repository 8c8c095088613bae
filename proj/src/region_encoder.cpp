#include "xt/region_encoder.hpp"

#include <algorithm>
#include <cmath>

#include "xt/errors.hpp"
#include "xt/ops.hpp"
#include "xt/tokenizer.hpp"

namespace xt {

namespace {

std::vector<std::size_t> to_sizes(const std::vector<int>& v) {
  std::vector<std::size_t> out;
  for (int x : v) {
    if (x < 0) throw ConfigError("negative extent in list");
    out.push_back(static_cast<std::size_t>(x));
  }
  return out;
}

std::vector<int> to_ints(const std::vector<std::size_t>& v) {
  return std::vector<int>(v.begin(), v.end());
}

}  // namespace

std::size_t RegionEncoderConfig::stage_side(std::size_t stage) const {
  return (region_size / patch_size) >> stage;
}

std::size_t RegionEncoderConfig::stage_window(std::size_t stage) const {
  return std::min(window, stage_side(stage));
}

void RegionEncoderConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("region encoder: " + m); };
  if (region_size == 0 || patch_size == 0 || in_channels == 0) fail("extents must be positive");
  if (region_size % patch_size != 0)
    fail("patch size " + std::to_string(patch_size) + " does not divide region size " +
         std::to_string(region_size));
  if (dims.empty() || depths.size() != dims.size() || heads.size() != dims.size())
    fail("dims, depths and heads must have one entry per stage");
  if (dims.size() < 2) fail("at least two stages are needed so the output sequence is shorter");
  if (window == 0) fail("window must be positive");
  for (std::size_t s = 0; s < dims.size(); ++s) {
    const std::size_t side = (region_size / patch_size) >> s;
    if (side == 0 || (s > 0 && ((region_size / patch_size) >> (s - 1)) % 2 != 0))
      fail("token grid side is odd before patch merge at stage " + std::to_string(s));
    if (side % std::min(window, side) != 0)
      fail("window " + std::to_string(window) + " does not divide token grid side " +
           std::to_string(side) + " at stage " + std::to_string(s));
    if (heads[s] == 0 || dims[s] % heads[s] != 0)
      fail("heads must divide width at stage " + std::to_string(s));
    if (s > 0 && dims[s] != 2 * dims[s - 1]) fail("patch merge doubles width: dims must double per stage");
  }
}

RegionEncoderConfig RegionEncoderConfig::from_config(const KeyValueConfig& kv,
                                                     const std::string& p) {
  RegionEncoderConfig c;
  c.region_size = static_cast<std::size_t>(kv.get_int(p + "region_size", static_cast<long long>(c.region_size)));
  c.in_channels = static_cast<std::size_t>(kv.get_int(p + "in_channels", static_cast<long long>(c.in_channels)));
  c.patch_size = static_cast<std::size_t>(kv.get_int(p + "patch_size", static_cast<long long>(c.patch_size)));
  c.dims = to_sizes(kv.get_ints(p + "dims", to_ints(c.dims)));
  c.depths = to_sizes(kv.get_ints(p + "depths", to_ints(c.depths)));
  c.heads = to_sizes(kv.get_ints(p + "heads", to_ints(c.heads)));
  c.window = static_cast<std::size_t>(kv.get_int(p + "window", static_cast<long long>(c.window)));
  c.mlp_ratio = static_cast<std::size_t>(kv.get_int(p + "mlp_ratio", static_cast<long long>(c.mlp_ratio)));
  return c;
}

Tensor window_attention(const Tensor& x, std::size_t ws, const AttentionWeights& w) {
  require(x.rank() == 4, "window_attention: expected [N, h, w, d]");
  const std::size_t N = x.dim(0), h = x.dim(1), wd = x.dim(2), d = x.dim(3);
  if (ws == 0 || h % ws != 0 || wd % ws != 0)
    throw ConfigError("window_attention: window " + std::to_string(ws) +
                      " does not divide grid " + std::to_string(h) + "x" + std::to_string(wd));
  if (ws == h && ws == wd) {
    Tensor y = self_attention(w, reshape(x, {N, h * wd, d}));
    return reshape(y, {N, h, wd, d});
  }
  const std::size_t nh = h / ws, nw = wd / ws;
  Tensor t = permute(reshape(x, {N, nh, ws, nw, ws, d}), {0, 1, 3, 2, 4, 5});
  t = self_attention(w, reshape(t, {N * nh * nw, ws * ws, d}));
  t = permute(reshape(t, {N, nh, nw, ws, ws, d}), {0, 1, 3, 2, 4, 5});
  return reshape(t, {N, h, wd, d});
}

Tensor patch_merge(const Tensor& x, const Linear& proj) {
  require(x.rank() == 4, "patch_merge: expected [N, h, w, d]");
  const std::size_t N = x.dim(0), h = x.dim(1), w = x.dim(2), d = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw ConfigError("patch_merge: odd grid " + std::to_string(h) + "x" + std::to_string(w));
  require(proj.in_features() == 4 * d, "patch_merge: projection expects 4d inputs");
  Tensor t = permute(reshape(x, {N, h / 2, 2, w / 2, 2, d}), {0, 1, 3, 2, 4, 5});
  return proj(reshape(t, {N, h / 2, w / 2, 4 * d}));
}

RegionEncoder::RegionEncoder(ParamStore& ps, RegionEncoderConfig cfg, Rng& rng,
                             const std::string& name)
    : cfg_(std::move(cfg)) {
  cfg_.validate();
  const std::size_t pdim = cfg_.in_channels * cfg_.patch_size * cfg_.patch_size;
  patch_embed_ = Linear::make(ps, name + "/patch_embed", pdim, cfg_.dims[0], rng);
  pos_embed_ = ps.add(name + "/pos_embed",
                      Tensor::trunc_normal({cfg_.patches_per_region(), cfg_.dims[0]}, rng, 0.02));
  for (std::size_t s = 0; s < cfg_.stages(); ++s) {
    if (s > 0) {
      merges_.push_back(Linear::make(ps, name + "/merge" + std::to_string(s), 4 * cfg_.dims[s - 1],
                                     cfg_.dims[s], rng));
    }
    std::vector<TransformerBlock> stage;
    for (std::size_t b = 0; b < cfg_.depths[s]; ++b) {
      stage.push_back(TransformerBlock::make(
          ps, name + "/stage" + std::to_string(s) + "/block" + std::to_string(b), cfg_.dims[s],
          cfg_.heads[s], cfg_.mlp_ratio, rng));
    }
    blocks_.push_back(std::move(stage));
  }
  final_norm_ = LayerNorm::make(ps, name + "/norm", cfg_.output_dim());
}

Tensor RegionEncoder::encode(const Tensor& tiles) const {
  require(tiles.rank() == 4 && tiles.dim(1) == cfg_.in_channels &&
              tiles.dim(2) == cfg_.region_size && tiles.dim(3) == cfg_.region_size,
          "encode: tiles must be [N, " + std::to_string(cfg_.in_channels) + ", " +
              std::to_string(cfg_.region_size) + ", " + std::to_string(cfg_.region_size) +
              "], got " + shape_str(tiles.shape()));
  require_finite(tiles, "region pixels");
  const std::size_t N = tiles.dim(0);
  Tensor x = add(patch_embed_(patchify(tiles, cfg_.patch_size)), pos_embed_);
  std::size_t side = cfg_.stage_side(0);
  x = reshape(x, {N, side, side, cfg_.dims[0]});
  for (std::size_t s = 0; s < cfg_.stages(); ++s) {
    if (s > 0) {
      x = patch_merge(x, merges_[s - 1]);
      side /= 2;
    }
    const std::size_t ws = cfg_.stage_window(s);
    for (const auto& b : blocks_[s]) {
      x = add(x, window_attention(b.norm1(x), ws, b.attn));
      x = add(x, b.mlp(b.norm2(x)));
    }
  }
  return final_norm_(x);
}

Tensor encode_region(const RegionEncoder& enc, const Tensor& tile) {
  require(tile.rank() == 3, "encode_region: expected [C, H, W]");
  Tensor y = enc.encode(reshape(tile, {1, tile.dim(0), tile.dim(1), tile.dim(2)}));
  return reshape(y, {y.dim(1), y.dim(2), y.dim(3)});
}

}  // namespace xt
