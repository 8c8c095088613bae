#include "xt/tokenizer.hpp"

#include <algorithm>

#include "xt/errors.hpp"
#include "xt/ops.hpp"

namespace xt {

void PipelineSpec::validate() const {
  if (region_size < 1) throw ConfigError("pipeline: region size must be >= 1");
  if (input_size < region_size)
    throw ConfigError("pipeline: input size " + std::to_string(input_size) +
                      " is smaller than region size " + std::to_string(region_size));
}

std::string PipelineSpec::label() const {
  return std::to_string(input_size) + "/" + std::to_string(region_size);
}

std::size_t RegionGrid::valid_pixels(std::size_t region) const {
  const std::size_t n = region_height * region_width;
  return static_cast<std::size_t>(
      std::count(pad_mask.begin() + region * n, pad_mask.begin() + (region + 1) * n, 1));
}

std::size_t RegionGrid::padded_pixels() const {
  return static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), 0));
}

RegionGrid plan_grid(const Tensor& x, std::size_t rh, std::size_t rw) {
  require(x.rank() == 3 || x.rank() == 4, "partition_regions: expected [C, H, W] or [B, C, H, W]");
  require(rh >= 1 && rw >= 1, "partition_regions: region extents must be >= 1");
  RegionGrid g;
  g.batched = x.rank() == 4;
  g.batch = g.batched ? x.dim(0) : 1;
  g.channels = x.dim(-3);
  g.image_height = x.dim(-2);
  g.image_width = x.dim(-1);
  require(g.image_height >= 1 && g.image_width >= 1 && g.channels >= 1 && g.batch >= 1,
          "partition_regions: empty image");
  g.region_height = rh;
  g.region_width = rw;
  g.rows = (g.image_height + rh - 1) / rh;
  g.cols = (g.image_width + rw - 1) / rw;
  g.pad_mask.assign(g.regions() * rh * rw, 0);
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t c = 0; c < g.cols; ++c)
      for (std::size_t y = 0; y < rh && r * rh + y < g.image_height; ++y)
        for (std::size_t xx = 0; xx < rw && c * rw + xx < g.image_width; ++xx)
          g.pad_mask[(g.linear_index(r, c) * rh + y) * rw + xx] = 1;
  return g;
}

Tensor gather_tiles(const Tensor& x, const RegionGrid& g, std::span<const std::size_t> ids) {
  const std::size_t n = g.regions(), C = g.channels, H = g.image_height, W = g.image_width;
  const std::size_t rh = g.region_height, rw = g.region_width;
  require(x.numel() == g.batch * C * H * W, "gather_tiles: image does not match grid");
  auto index = std::make_shared<std::vector<std::ptrdiff_t>>(ids.size() * C * rh * rw, -1);
  std::size_t o = 0;
  for (std::size_t id : ids) {
    require(id < g.batch * n, "gather_tiles: tile id out of range");
    const std::size_t b = id / n, r = (id % n) / g.cols, c = id % g.cols;
    for (std::size_t ch = 0; ch < C; ++ch)
      for (std::size_t y = 0; y < rh; ++y)
        for (std::size_t xx = 0; xx < rw; ++xx, ++o) {
          const std::size_t iy = r * rh + y, ix = c * rw + xx;
          if (iy < H && ix < W)
            (*index)[o] = static_cast<std::ptrdiff_t>(((b * C + ch) * H + iy) * W + ix);
        }
  }
  return gather(x, index, {ids.size(), C, rh, rw});
}

RegionGrid partition_regions(const Tensor& x, std::size_t rh, std::size_t rw) {
  RegionGrid g = plan_grid(x, rh, rw);
  std::vector<std::size_t> all(g.batch * g.regions());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  g.tiles = gather_tiles(x, g, all);
  return g;
}

Tensor reassemble_image(const RegionGrid& g) {
  const std::size_t C = g.channels, H = g.image_height, W = g.image_width;
  const std::size_t rh = g.region_height, rw = g.region_width;
  auto index = std::make_shared<std::vector<std::ptrdiff_t>>(g.batch * C * H * W);
  std::size_t o = 0;
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t ch = 0; ch < C; ++ch)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x, ++o) {
          const std::size_t region = b * g.regions() + g.linear_index(y / rh, x / rw);
          (*index)[o] = static_cast<std::ptrdiff_t>(((region * C + ch) * rh + y % rh) * rw + x % rw);
        }
  Shape s = g.batched ? Shape{g.batch, C, H, W} : Shape{C, H, W};
  return gather(g.tiles, index, s);
}

Tensor patchify(const Tensor& tiles, std::size_t p) {
  require(tiles.rank() == 3 || tiles.rank() == 4, "patchify: expected [C, H, W] or [N, C, H, W]");
  const std::size_t N = tiles.rank() == 4 ? tiles.dim(0) : 1;
  const std::size_t C = tiles.dim(-3), H = tiles.dim(-2), W = tiles.dim(-1);
  if (p == 0 || H % p != 0 || W % p != 0)
    throw ConfigError("patchify: patch " + std::to_string(p) + " does not divide region " +
                      std::to_string(H) + "x" + std::to_string(W));
  // [N, C, H/p, p, W/p, p] -> [N, H/p, W/p, C, p, p]
  Tensor t = reshape(tiles, {N, C, H / p, p, W / p, p});
  t = permute(t, {0, 2, 4, 1, 3, 5});
  return reshape(t, {N, (H / p) * (W / p), C * p * p});
}

Tensor unpatchify(const Tensor& patches, std::size_t C, std::size_t H, std::size_t W,
                  std::size_t p) {
  require(p >= 1 && H % p == 0 && W % p == 0, "unpatchify: patch must divide extents");
  require(patches.rank() == 3 && patches.dim(1) == (H / p) * (W / p) && patches.dim(2) == C * p * p,
          "unpatchify: shape mismatch");
  const std::size_t N = patches.dim(0);
  Tensor t = reshape(patches, {N, H / p, W / p, C, p, p});
  t = permute(t, {0, 3, 1, 4, 2, 5});
  return reshape(t, {N, C, H, W});
}

FeatureSequence reassemble_row_major(std::vector<RegionFeatures> parts, std::size_t rows,
                                     std::size_t cols) {
  require(rows >= 1 && cols >= 1, "reassemble_row_major: empty grid");
  require(parts.size() == rows * cols, "reassemble_row_major: expected one feature map per region");
  std::sort(parts.begin(), parts.end(),
            [](const RegionFeatures& a, const RegionFeatures& b) { return a.index < b.index; });
  const Shape& s0 = parts[0].map.shape();
  require(s0.size() == 4, "reassemble_row_major: feature maps must be [B, h, w, D]");
  for (std::size_t i = 0; i < parts.size(); ++i) {
    require(parts[i].index == i, "reassemble_row_major: region indices must be a permutation");
    require(parts[i].map.shape() == s0,
            "reassemble_row_major: heterogeneous feature shapes " + shape_str(s0) + " vs " +
                shape_str(parts[i].map.shape()));
  }
  const std::size_t B = s0[0], fh = s0[1], fw = s0[2], D = s0[3];
  std::vector<Tensor> flat;
  flat.reserve(parts.size());
  for (const auto& p : parts) flat.push_back(reshape(p.map, {B, fh * fw, D}));

  FeatureSequence seq;
  seq.tokens = flat.size() == 1 ? flat[0] : concat(flat, 1);
  seq.grid_rows = rows;
  seq.grid_cols = cols;
  seq.map_rows = fh;
  seq.map_cols = fw;
  seq.coords.reserve(rows * cols * fh * fw);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      for (std::size_t y = 0; y < fh; ++y)
        for (std::size_t x = 0; x < fw; ++x)
          seq.coords.push_back({static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(c),
                                static_cast<std::uint32_t>(y), static_cast<std::uint32_t>(x)});
  seq.keep.assign(seq.coords.size(), 1);
  return seq;
}

std::vector<std::uint8_t> token_keep_mask(const RegionGrid& g, std::size_t fh, std::size_t fw) {
  require(fh >= 1 && fw >= 1 && g.region_height % fh == 0 && g.region_width % fw == 0,
          "token_keep_mask: feature map must evenly divide the region");
  const std::size_t sy = g.region_height / fh, sx = g.region_width / fw;
  std::vector<std::uint8_t> keep(g.regions() * fh * fw, 0);
  for (std::size_t r = 0; r < g.regions(); ++r)
    for (std::size_t y = 0; y < g.region_height; ++y)
      for (std::size_t x = 0; x < g.region_width; ++x)
        if (g.pad_mask[(r * g.region_height + y) * g.region_width + x])
          keep[(r * fh + y / sy) * fw + x / sx] = 1;
  return keep;
}

}  // namespace xt
