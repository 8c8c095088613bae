#include "xt/stream.hpp"

#include <sstream>

#include "xt/errors.hpp"
#include "xt/ops.hpp"
#include "xt/parallel.hpp"

namespace xt {

ChunkPlan plan_chunks(std::size_t regions, std::size_t capacity) {
  require(capacity >= 1, "plan_chunks: capacity must be >= 1");
  ChunkPlan p;
  p.capacity = capacity;
  for (std::size_t start = 0; start < regions; start += capacity) {
    std::vector<std::size_t> c;
    for (std::size_t i = start; i < std::min(regions, start + capacity); ++i) c.push_back(i);
    p.chunks.push_back(std::move(c));
  }
  return p;
}

void XTConfig::validate() const {
  pipeline.validate();
  encoder.validate();
  if (encoder.region_size != pipeline.region_size)
    throw ConfigError("encoder region size " + std::to_string(encoder.region_size) +
                      " differs from pipeline region size " + std::to_string(pipeline.region_size));
  if (classes < 2) throw ConfigError("classes must be >= 2");
  if (context.positional == PositionalMode::Learned && pipeline.grid_side() > context.max_grid)
    throw ConfigError("grid side exceeds context.max_grid for learned positional tables");
}

XTConfig XTConfig::from_config(const KeyValueConfig& kv) {
  XTConfig c;
  c.pipeline.input_size = static_cast<std::size_t>(kv.get_int("input_size", static_cast<long long>(c.pipeline.input_size)));
  c.pipeline.region_size = static_cast<std::size_t>(kv.get_int("region_size", static_cast<long long>(c.pipeline.region_size)));
  KeyValueConfig enc = kv;
  enc.set("encoder.region_size", std::to_string(c.pipeline.region_size));
  c.encoder = RegionEncoderConfig::from_config(enc);
  c.context = ContextConfig::from_config(kv);
  c.mask_padding = kv.get_bool("mask_padding", c.mask_padding);
  c.classes = static_cast<std::size_t>(kv.get_int("classes", static_cast<long long>(c.classes)));
  c.validate();
  return c;
}

XTModel::XTModel(XTConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  encoder_ = RegionEncoder(params_, cfg_.encoder, rng, "region");
  const std::size_t D = cfg_.encoder.output_dim();
  positional_ = PositionalEmbedding2D::make(params_, "pos", cfg_.context.positional, D,
                                            cfg_.context.max_grid, cfg_.encoder.output_side());
  context_ = ContextEncoder(params_, cfg_.context, D, rng, "context");
  head_ = Linear::make(params_, "head", D, cfg_.classes, rng);
}

std::uint64_t XTModel::region_working_set() const {
  std::lock_guard lock(ws_mu_);
  if (!working_set_) {
    NoGradGuard ng;
    const auto& e = cfg_.encoder;
    LedgerProbe probe;
    { Tensor y = encoder_.encode(Tensor::zeros({1, e.in_channels, e.region_size, e.region_size})); }
    working_set_ = probe.close();
  }
  return *working_set_;
}

namespace {

std::vector<TokenCoord> region_coords(std::size_t rows, std::size_t cols, std::size_t fh,
                                      std::size_t fw) {
  std::vector<TokenCoord> out;
  out.reserve(rows * cols * fh * fw);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      for (std::size_t y = 0; y < fh; ++y)
        for (std::size_t x = 0; x < fw; ++x)
          out.push_back({static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(c),
                         static_cast<std::uint32_t>(y), static_cast<std::uint32_t>(x)});
  return out;
}

Tensor encode_ids(const XTModel& m, const Tensor& images, const RegionGrid& grid,
                  std::span<const std::size_t> ids) {
  PhaseScope ps(Phase::Region);
  Tensor f = m.encoder().encode(gather_tiles(images, grid, ids));
  retag_phase(f, Phase::Output);
  return f;
}

}  // namespace

StreamResult stream_forward(const XTModel& model, const Tensor& images, const StreamOptions& o) {
  const XTConfig& cfg = model.config();
  require(images.rank() == 4, "stream_forward: images must be [B, C, H, W]");
  require(images.dim(1) == cfg.encoder.in_channels, "stream_forward: channel count mismatch");
  const std::size_t R = cfg.pipeline.region_size;
  const RegionGrid grid = plan_grid(images, R, R);
  const std::size_t B = grid.batch, n = grid.regions(), total = B * n;
  require(grid.rows <= cfg.context.max_grid || cfg.context.positional != PositionalMode::Learned,
          "stream_forward: region grid exceeds the positional table");

  std::size_t batch = o.batch_regions == 0 ? total : std::min(o.batch_regions, total);
  if (o.budget_scalars > 0) {
    const std::uint64_t ws = model.region_working_set();
    if (o.budget_scalars < ws)
      throw UnsatisfiableBudget("stream_forward: budget of " + std::to_string(o.budget_scalars) +
                                " scalars is below one region's working set (" +
                                std::to_string(ws) + ")");
    batch = std::min<std::size_t>(batch, static_cast<std::size_t>(o.budget_scalars / ws));
  }
  batch = std::max<std::size_t>(batch, 1);

  // Worker threads own no tape, so concurrent encoding is reserved for
  // inference; recorded runs stay on the calling thread.
  const bool concurrent = o.threads > 1 && !grad_enabled();
  const Phase caller_phase = current_phase();
  std::vector<Tensor> parts;
  for (std::size_t start = 0; start < total; start += batch) {
    const std::size_t end = std::min(total, start + batch);
    std::vector<std::size_t> ids;
    for (std::size_t i = start; i < end; ++i) ids.push_back(i);
    if (!concurrent || ids.size() < 2) {
      parts.push_back(encode_ids(model, images, grid, ids));
      continue;
    }
    const std::size_t groups = std::min<std::size_t>(ids.size(), static_cast<std::size_t>(o.threads));
    std::vector<Tensor> out(groups);
    parallel_for(groups, o.threads, [&](std::size_t g) {
      NoGradGuard ng;
      PhaseScope ps(caller_phase);
      const std::size_t lo = ids.size() * g / groups, hi = ids.size() * (g + 1) / groups;
      out[g] = encode_ids(model, images, grid, std::span<const std::size_t>(ids).subspan(lo, hi - lo));
    });
    for (auto& t : out) parts.push_back(std::move(t));
  }

  const std::size_t fh = cfg.encoder.output_side(), fw = fh, D = cfg.encoder.output_dim();
  const std::size_t tpr = fh * fw;
  Tensor all;
  {
    PhaseScope ps(Phase::Output);
    all = parts.size() == 1 ? parts[0] : concat(parts, 0);
  }
  parts.clear();

  StreamResult res;
  res.regions = n;
  res.region_batch = batch;
  FeatureSequence& seq = res.region_features;
  seq.tokens = reshape(all, {B, n * tpr, D});
  seq.coords = region_coords(grid.rows, grid.cols, fh, fw);
  seq.keep = token_keep_mask(grid, fh, fw);
  seq.grid_rows = grid.rows;
  seq.grid_cols = grid.cols;
  seq.map_rows = fh;
  seq.map_cols = fw;

  const ContextEncoder& ctx = model.context();
  res.features = seq;
  const std::size_t T = seq.length();
  if (!ctx.chunked(T)) {
    Tensor y;
    {
      PhaseScope ps(Phase::Context);
      y = ctx.forward(add_2d_positional(seq, model.positional()).tokens, o.seed, o.threads);
    }
    retag_phase(y, Phase::Output);
    res.features.tokens = y;
    res.chunks = 1;
    return res;
  }

  const ChunkPlan plan = plan_chunks(n, cfg.context.chunk_regions);
  XLMemory memory;
  std::vector<Tensor> outs;
  for (std::size_t k = 0; k < plan.size(); ++k) {
    const std::size_t t0 = plan.chunks[k].front() * tpr, t1 = (plan.chunks[k].back() + 1) * tpr;
    Tensor y;
    {
      PhaseScope ps(Phase::Context);
      FeatureSequence part = seq;
      part.tokens = slice(seq.tokens, 1, t0, t1);
      part.coords.assign(seq.coords.begin() + static_cast<std::ptrdiff_t>(t0),
                         seq.coords.begin() + static_cast<std::ptrdiff_t>(t1));
      part.keep.assign(seq.keep.begin() + static_cast<std::ptrdiff_t>(t0),
                       seq.keep.begin() + static_cast<std::ptrdiff_t>(t1));
      y = ctx.forward_chunk(add_2d_positional(part, model.positional()).tokens, k, tpr, memory,
                            o.seed);
    }
    retag_phase(y, Phase::Output);
    outs.push_back(std::move(y));
  }
  {
    PhaseScope ps(Phase::Output);
    res.features.tokens = outs.size() == 1 ? outs[0] : concat(outs, 1);
  }
  res.chunks = plan.size();
  return res;
}

Tensor classify(const XTModel& model, const StreamResult& r) {
  const Tensor& t = r.features.tokens;
  const Tensor pooled = model.config().mask_padding ? masked_mean_tokens(t, r.features.keep) : mean(t, 1);
  return model.head()(pooled);
}

std::vector<MemoryRow> memory_growth_report(const XTConfig& cfg,
                                            const std::vector<std::size_t>& sizes,
                                            const MemoryBenchOptions& o) {
  auto& ledger = MemoryLedger::global();
  std::vector<MemoryRow> rows;
  NoGradGuard ng;
  const XTModel xt_model(cfg, o.seed);
  for (std::size_t s : sizes) {
    require(s % cfg.pipeline.region_size == 0,
            "memory_growth_report: size " + std::to_string(s) + " is not a multiple of the region size");
    const Tensor img = Tensor::zeros({1, cfg.encoder.in_channels, s, s});
    StreamOptions so;
    so.batch_regions = o.batch_regions;
    so.threads = o.threads;
    so.seed = o.seed;
    {
      ledger.reset();
      StreamResult r = stream_forward(xt_model, img, so);
      const auto snap = ledger.snapshot();
      rows.push_back({s, "xt", snap.peak, snap.peak_excl_outputs, r.regions, r.chunks});
    }
    // Naive: the image is one region and the context sees the whole sequence.
    XTConfig nc = cfg;
    nc.pipeline.input_size = s;
    nc.pipeline.region_size = s;
    nc.encoder.region_size = s;
    nc.context.context_length = static_cast<std::size_t>(-1);
    const XTModel naive(nc, o.seed);
    ledger.reset();
    ledger.set_cap(o.cap_scalars);
    try {
      StreamOptions no = so;
      no.batch_regions = 1;
      StreamResult r = stream_forward(naive, img, no);
      const auto snap = ledger.snapshot();
      rows.push_back({s, "naive", snap.peak, snap.peak_excl_outputs, r.regions, r.chunks});
    } catch (const SimulatedOom&) {
      const auto snap = ledger.snapshot();
      rows.push_back({s, "naive_oom", snap.peak, snap.peak_excl_outputs, 1, 1});
    }
    ledger.reset();
  }
  return rows;
}

std::string memory_csv(const std::vector<MemoryRow>& rows) {
  std::ostringstream os;
  os << "input_px,mode,peak_scalars,peak_excl_outputs,regions,chunks\n";
  for (const auto& r : rows)
    os << r.input_px << ',' << r.mode << ',' << r.peak_scalars << ',' << r.peak_excl_outputs
       << ',' << r.regions << ',' << r.chunks << '\n';
  return os.str();
}

}  // namespace xt
