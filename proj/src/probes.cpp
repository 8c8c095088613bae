#include "xt/probes.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "xt/errors.hpp"
#include "xt/image.hpp"

namespace xt {

ProbeStage parse_probe_stage(const std::string& s) {
  if (s == "region") return ProbeStage::Region;
  if (s == "context") return ProbeStage::Context;
  throw ConfigError("unknown probe stage '" + s + "' (region|context)");
}

std::vector<double> normalize_max(std::vector<double> v) {
  double mx = 0.0;
  for (double x : v) mx = std::max(mx, x);
  if (mx > 0.0)
    for (double& x : v) x /= mx;
  return v;
}

ErfMap erf_map(const XTModel& model, const Tensor& image, const ErfOptions& o) {
  require(image.rank() == 4 && image.dim(0) == 1, "erf_map: image must be [1, C, H, W]");
  StreamOptions so;
  so.seed = o.seed;
  ErfMap m;
  m.height = image.dim(2);
  m.width = image.dim(3);
  m.values.assign(m.height * m.width, 0.0);
  const std::size_t C = image.dim(1), px = m.height * m.width;

  // One backward pass per output channel of the probe token.
  std::size_t D = 1;
  for (std::size_t d = 0; d < D; ++d) {
    GradTape tape;
    TapeScope scope(tape);
    Tensor x = image.detach().clone();
    x.set_requires_grad(true);
    const StreamResult r = stream_forward(model, x, so);
    const FeatureSequence& seq = o.stage == ProbeStage::Region ? r.region_features : r.features;
    if (d == 0) {
      const std::size_t rows = seq.grid_rows * seq.map_rows, cols = seq.grid_cols * seq.map_cols;
      m.probe_row = o.row.value_or(rows / 2);
      m.probe_col = o.col.value_or(cols / 2);
      if (m.probe_row >= rows || m.probe_col >= cols)
        throw ContractViolation("erf_map: probe (" + std::to_string(m.probe_row) + ", " +
                                std::to_string(m.probe_col) + ") outside the " + std::to_string(rows) +
                                "x" + std::to_string(cols) + " feature map");
      m.probe_token = seq.length();
      for (std::size_t t = 0; t < seq.length(); ++t)
        if (seq.global_row(t) == m.probe_row && seq.global_col(t) == m.probe_col) m.probe_token = t;
      require(m.probe_token < seq.length(), "erf_map: probe token not found");
      D = seq.tokens.dim(2);
    }
    std::vector<double> cot(seq.tokens.numel(), 0.0);
    cot[m.probe_token * D + d] = 1.0;
    backward(seq.tokens, Tensor(seq.tokens.shape(), std::move(cot)));
    if (!x.has_grad()) continue;
    const auto g = x.grad();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < px; ++p) m.values[p] += std::abs(g[c * px + p]);
  }
  for (double v : m.values) m.raw_max = std::max(m.raw_max, v);
  m.values = normalize_max(std::move(m.values));
  return m;
}

double erf_mass_in_region(const ErfMap& m, std::size_t R, std::size_t region) {
  const std::size_t cols = (m.width + R - 1) / R;
  const std::size_t r0 = (region / cols) * R, c0 = (region % cols) * R;
  double inside = 0.0, total = 0.0;
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) {
      const double v = m.at(y, x);
      total += v;
      if (y >= r0 && y < r0 + R && x >= c0 && x < c0 + R) inside += v;
    }
  return total > 0.0 ? inside / total : 0.0;
}

std::vector<std::size_t> erf_support_regions(const ErfMap& m, std::size_t R, double threshold) {
  const std::size_t rows = (m.height + R - 1) / R, cols = (m.width + R - 1) / R;
  std::vector<std::uint8_t> hit(rows * cols, 0);
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x)
      if (m.at(y, x) > threshold) hit[(y / R) * cols + x / R] = 1;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < hit.size(); ++i)
    if (hit[i]) out.push_back(i);
  return out;
}

void write_erf_pgm(const std::filesystem::path& path, const ErfMap& m) {
  write_pgm(path, m.values, m.height, m.width);
}

std::vector<ThroughputRow> bench_throughput(const std::vector<ThroughputCase>& cases,
                                            const ThroughputOptions& o) {
  require(o.warmup >= 1, "bench_throughput: at least one warmup run is required");
  require(o.runs >= 5, "bench_throughput: at least five timed runs are required");
  NoGradGuard ng;
  std::vector<ThroughputRow> rows;
  for (const auto& tc : cases) {
    XTConfig cfg = tc.config;
    if (tc.input_size) cfg.pipeline.input_size = tc.input_size;
    const XTModel model(cfg, o.seed);
    const std::size_t S = cfg.pipeline.input_size, R = cfg.pipeline.region_size;
    Rng rng(o.seed + S);
    const Tensor img = Tensor::randn({1, cfg.encoder.in_channels, S, S}, rng, 0.1);
    StreamOptions so;
    so.batch_regions = o.batch_regions;
    so.threads = o.threads;
    so.seed = o.seed;
    ThroughputRow row;
    for (std::size_t w = 0; w < o.warmup; ++w) row.regions = stream_forward(model, img, so).regions;
    std::vector<double> t;
    for (std::size_t k = 0; k < o.runs; ++k) {
      const auto t0 = std::chrono::steady_clock::now();
      const StreamResult r = stream_forward(model, img, so);
      t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(t.begin(), t.end());
    row.label = tc.label;
    row.input_px = S;
    row.region_px = R;
    row.tokens = row.regions * cfg.encoder.tokens_per_region();
    row.median_s = t.size() % 2 ? t[t.size() / 2] : 0.5 * (t[t.size() / 2 - 1] + t[t.size() / 2]);
    row.regions_per_s = static_cast<double>(row.regions) / row.median_s;
    row.tokens_per_s = static_cast<double>(row.tokens) / row.median_s;
    row.spread = (t.back() - t.front()) / row.median_s;
    row.warning = row.spread >= o.max_spread;
    rows.push_back(row);
  }
  return rows;
}

std::string throughput_csv(const std::vector<ThroughputRow>& rows) {
  std::ostringstream os;
  os << "label,input_px,region_px,regions,tokens,median_s,regions_per_s,tokens_per_s,spread,warning\n";
  for (const auto& r : rows)
    os << r.label << ',' << r.input_px << ',' << r.region_px << ',' << r.regions << ',' << r.tokens
       << ',' << r.median_s << ',' << r.regions_per_s << ',' << r.tokens_per_s << ',' << r.spread
       << ',' << (r.warning ? 1 : 0) << '\n';
  return os.str();
}

ContextLengthRow context_length_row(std::string model, std::uint64_t input_px,
                                    std::uint64_t region_px, std::uint64_t xl_layers,
                                    std::uint64_t chunk, std::uint64_t native_px) {
  require(input_px > 0 && region_px > 0 && chunk > 0 && native_px > 0,
          "ctxlen: sizes and chunk must be positive");
  require(input_px % region_px == 0, "ctxlen: input size must be a multiple of the region size");
  ContextLengthRow r;
  r.model = std::move(model);
  r.input_px = input_px;
  r.region_px = region_px;
  r.xl_layers = xl_layers;
  r.chunk = chunk;
  r.native_px = native_px;
  const std::uint64_t side = input_px / region_px;
  r.context = effective_context_length(std::min(region_px, native_px), xl_layers, chunk, side, side);
  return r;
}

std::vector<ContextLengthRow> reference_context_rows() {
  return {
      context_length_row("Swin-B", 256, 256, 0, 1, 256),
      context_length_row("Swin-B", 512, 512, 0, 1, 256),
      context_length_row("Swin-B <xT> XL", 512, 256, 1, 1, 256),
      context_length_row("Swin-B <xT> XL", 512, 256, 2, 1, 256),
      context_length_row("Swin-B <xT> XL", 4096, 256, 2, 4, 256),
  };
}

std::string context_length_csv(const std::vector<ContextLengthRow>& rows) {
  std::ostringstream os;
  os << "model,input_px,region_px,xl_layers,chunk,context_px,multiplier\n";
  for (const auto& r : rows)
    os << r.model << ',' << r.input_px << ',' << r.region_px << ',' << r.xl_layers << ','
       << r.chunk << ',' << r.context.pixels << ',' << r.context.multiplier << '\n';
  return os.str();
}

}  // namespace xt
