#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xt/tensor.hpp"

namespace xt {

/// The "input/region" pipeline pair, e.g. 512/256.
struct PipelineSpec {
  std::size_t input_size = 512;
  std::size_t region_size = 256;

  void validate() const;
  std::size_t grid_side() const { return (input_size + region_size - 1) / region_size; }
  std::string label() const;
};

/// A (batch of) large image(s) cut into zero-padded regions.
struct RegionGrid {
  std::size_t batch = 1;
  bool batched = false;  // source was [B, C, H, W]
  std::size_t channels = 1;
  std::size_t image_height = 0, image_width = 0;
  std::size_t region_height = 0, region_width = 0;
  std::size_t rows = 0, cols = 0;
  // [batch * rows * cols, C, region_height, region_width], image-major then
  // row-major region order.
  Tensor tiles;
  // [rows * cols, region_height, region_width]; 1 marks a real pixel.
  std::vector<std::uint8_t> pad_mask;

  std::size_t regions() const { return rows * cols; }
  std::size_t linear_index(std::size_t r, std::size_t c) const { return r * cols + c; }
  std::size_t valid_pixels(std::size_t region) const;
  std::size_t padded_pixels() const;
};

/// Geometry and pad mask of partition_regions without materializing tiles.
RegionGrid plan_grid(const Tensor& x, std::size_t region_h, std::size_t region_w);

/// Materializes the listed tiles (ids index image-major regions,
/// b * rows * cols + r) as [ids.size(), C, region_h, region_w]. Differentiable.
Tensor gather_tiles(const Tensor& x, const RegionGrid& grid, std::span<const std::size_t> ids);

/// Partitions x ([C, H, W] or [B, C, H, W]) into region_h x region_w tiles.
/// Out-of-bounds pixels are zero. Differentiable with respect to x.
RegionGrid partition_regions(const Tensor& x, std::size_t region_h, std::size_t region_w);

// Inverse of partition_regions on the valid pixels; shape of the original x.
Tensor reassemble_image(const RegionGrid& grid);

/// [N, C, H, W] (or [C, H, W]) to [N, P, C*p*p]: row-major patches, each
/// flattened channel-first. Differentiable.
Tensor patchify(const Tensor& tiles, std::size_t patch);
Tensor unpatchify(const Tensor& patches, std::size_t channels, std::size_t height,
                  std::size_t width, std::size_t patch);

struct TokenCoord {
  std::uint32_t region_row = 0, region_col = 0;
  std::uint32_t row = 0, col = 0;  // within the region's feature map
};

/// Region features concatenated in row-major region order, plus per-token
/// coordinates for positional embedding.
struct FeatureSequence {
  Tensor tokens;  // [B, T, D]
  std::vector<TokenCoord> coords;  // T entries
  std::vector<std::uint8_t> keep;  // T entries; 1 if the token covers any real pixel
  std::size_t grid_rows = 0, grid_cols = 0;
  std::size_t map_rows = 0, map_cols = 0;  // per-region feature map extents

  std::size_t length() const { return coords.size(); }
  std::size_t tokens_per_region() const { return map_rows * map_cols; }
  // Global token grid position (row, col) of token t.
  std::size_t global_row(std::size_t t) const { return coords[t].region_row * map_rows + coords[t].row; }
  std::size_t global_col(std::size_t t) const { return coords[t].region_col * map_cols + coords[t].col; }
};

struct RegionFeatures {
  std::size_t index = 0;  // row-major region index
  Tensor map;             // [B, h', w', D]
};

/// Places each region's tokens at offset index * tokens_per_region, whatever
/// the order of `parts`. Every region index in [0, rows*cols) must appear once.
FeatureSequence reassemble_row_major(std::vector<RegionFeatures> parts, std::size_t rows,
                                     std::size_t cols);

// Per-token keep mask for a fh x fw feature map over each region of `grid`.
std::vector<std::uint8_t> token_keep_mask(const RegionGrid& grid, std::size_t fh, std::size_t fw);

}  // namespace xt
