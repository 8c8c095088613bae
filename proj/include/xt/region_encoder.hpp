#pragma once

#include <string>
#include <vector>

#include "xt/config.hpp"
#include "xt/nn.hpp"

namespace xt {

struct RegionEncoderConfig {
  std::size_t region_size = 256;
  std::size_t in_channels = 1;
  std::size_t patch_size = 4;
  std::vector<std::size_t> dims{32, 64, 128};
  std::vector<std::size_t> depths{2, 2, 2};
  std::vector<std::size_t> heads{2, 4, 8};
  // Window side in tokens; stages whose grid is smaller attend globally.
  std::size_t window = 4;
  std::size_t mlp_ratio = 2;

  // Throws ConfigError on any inconsistent field.
  void validate() const;
  std::size_t stages() const { return dims.size(); }
  std::size_t stage_side(std::size_t stage) const;
  std::size_t stage_window(std::size_t stage) const;
  std::size_t output_side() const { return stage_side(stages() - 1); }
  std::size_t output_dim() const { return dims.back(); }
  std::size_t tokens_per_region() const { return output_side() * output_side(); }
  std::size_t patches_per_region() const { return stage_side(0) * stage_side(0); }

  // Keys: <prefix>region_size, in_channels, patch_size, dims, depths, heads,
  // window, mlp_ratio.
  static RegionEncoderConfig from_config(const KeyValueConfig& kv, const std::string& prefix = "encoder.");
};

/// Self-attention computed independently inside non-overlapping window x
/// window blocks of a [N, h, w, d] token grid; returns the attention branch
/// output (projections included, no residual).
Tensor window_attention(const Tensor& x, std::size_t window, const AttentionWeights& w);

/// [N, h, w, d] -> [N, h/2, w/2, 2d]: concatenates each 2x2 neighborhood in
/// (dy, dx) row-major order and projects 4d -> 2d.
Tensor patch_merge(const Tensor& x, const Linear& proj);

/// Stage 1: hierarchical windowed transformer applied to each region alone.
class RegionEncoder {
 public:
  RegionEncoder() = default;
  RegionEncoder(ParamStore& ps, RegionEncoderConfig cfg, Rng& rng,
                const std::string& name = "region");

  /// tiles: [N, C, region, region] -> [N, h', w', D]. Regions never mix.
  Tensor encode(const Tensor& tiles) const;
  const RegionEncoderConfig& config() const { return cfg_; }

 private:
  RegionEncoderConfig cfg_;
  Linear patch_embed_;
  Tensor pos_embed_;  // [P, dims[0]]
  std::vector<std::vector<TransformerBlock>> blocks_;
  std::vector<Linear> merges_;
  LayerNorm final_norm_;
};

// Single-region convenience: tile [C, H, W] -> [h', w', D].
Tensor encode_region(const RegionEncoder& enc, const Tensor& tile);

}  // namespace xt
