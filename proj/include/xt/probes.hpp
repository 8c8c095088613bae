#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xt/context_xl.hpp"
#include "xt/stream.hpp"

namespace xt {

enum class ProbeStage { Region, Context };
ProbeStage parse_probe_stage(const std::string& s);

/// Normalized input-gradient magnitude of one output token.
struct ErfMap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // row-major, in [0, 1]; max is 1 unless all zero
  std::size_t probe_row = 0, probe_col = 0;  // global feature-map coordinates
  std::size_t probe_token = 0;
  double raw_max = 0.0;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

struct ErfOptions {
  ProbeStage stage = ProbeStage::Context;
  // Global feature-map coordinates of the probe; defaults to the map centre.
  std::optional<std::size_t> row, col;
  std::uint64_t seed = 0;
};

/// For each channel of the probe token, seeds a cotangent of 1 there (0
/// elsewhere) and backpropagates to the input image [1, C, H, W]; the map is
/// |grad| summed over output and input channels.
ErfMap erf_map(const XTModel& model, const Tensor& image, const ErfOptions& opts = {});

// Per-pixel magnitude -> [0, 1] by the max; an all-zero map stays zero.
std::vector<double> normalize_max(std::vector<double> v);

// Fraction of total ERF mass inside region `region` of an R x R grid.
double erf_mass_in_region(const ErfMap& m, std::size_t region_size, std::size_t region);
// Row-major indices of regions holding at least one pixel above `threshold`.
std::vector<std::size_t> erf_support_regions(const ErfMap& m, std::size_t region_size,
                                             double threshold = 0.0);

void write_erf_pgm(const std::filesystem::path& path, const ErfMap& m);

struct ThroughputCase {
  std::string label;
  XTConfig config;
  std::size_t input_size = 0;  // overrides config.pipeline.input_size when nonzero
};

struct ThroughputRow {
  std::string label;
  std::size_t input_px = 0, region_px = 0, regions = 0, tokens = 0;
  double median_s = 0.0;
  double regions_per_s = 0.0, tokens_per_s = 0.0;
  double spread = 0.0;  // (max - min) / median over the timed runs
  bool warning = false;  // spread >= max_spread
};

struct ThroughputOptions {
  std::size_t warmup = 1;
  std::size_t runs = 5;
  double max_spread = 0.2;
  std::size_t batch_regions = 0;
  int threads = 1;
  std::uint64_t seed = 0;
};

/// Times tape-free stream_forward over a random image per case and reports
/// the median of the timed runs.
std::vector<ThroughputRow> bench_throughput(const std::vector<ThroughputCase>& cases,
                                            const ThroughputOptions& opts = {});

// Header label,input_px,region_px,regions,tokens,median_s,regions_per_s,tokens_per_s,spread,warning.
std::string throughput_csv(const std::vector<ThroughputRow>& rows);

struct ContextLengthRow {
  std::string model;
  std::uint64_t input_px = 0, region_px = 0;
  std::uint64_t xl_layers = 0;  // 0 = no recurrence
  std::uint64_t chunk = 1;
  // Span the backbone attends within one pass; a region larger than this
  // adds no context.
  std::uint64_t native_px = 0;
  ContextLength context;
};

ContextLengthRow context_length_row(std::string model, std::uint64_t input_px,
                                    std::uint64_t region_px, std::uint64_t xl_layers,
                                    std::uint64_t chunk, std::uint64_t native_px);

/// Swin-B baselines at their 256 px native span and the xT XL settings.
std::vector<ContextLengthRow> reference_context_rows();

// Header model,input_px,region_px,xl_layers,chunk,context_px,multiplier.
std::string context_length_csv(const std::vector<ContextLengthRow>& rows);

}  // namespace xt
