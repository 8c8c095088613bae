#include "xt/context.hpp"

#include <cmath>

#include "xt/errors.hpp"
#include "xt/ops.hpp"

namespace xt {

ContextKind parse_context_kind(const std::string& s) {
  if (s == "identity" || s == "none") return ContextKind::Identity;
  if (s == "xl") return ContextKind::XL;
  if (s == "hyper" || s == "linear") return ContextKind::Hyper;
  if (s == "ssm" || s == "mamba") return ContextKind::SSM;
  throw ConfigError("unknown context kind '" + s + "' (identity|xl|hyper|ssm)");
}

std::string context_kind_name(ContextKind k) {
  switch (k) {
    case ContextKind::Identity: return "identity";
    case ContextKind::XL: return "xl";
    case ContextKind::Hyper: return "hyper";
    case ContextKind::SSM: return "ssm";
  }
  return "?";
}

PositionalMode parse_positional_mode(const std::string& s) {
  if (s == "none") return PositionalMode::None;
  if (s == "learned") return PositionalMode::Learned;
  if (s == "sinusoidal") return PositionalMode::Sinusoidal;
  throw ConfigError("unknown positional mode '" + s + "' (none|learned|sinusoidal)");
}

ContextConfig ContextConfig::from_config(const KeyValueConfig& kv, const std::string& p) {
  ContextConfig c;
  auto sz = [&](const std::string& k, std::size_t def) {
    const long long v = kv.get_int(p + k, static_cast<long long>(def));
    if (v < 0) throw ConfigError(p + k + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  c.kind = parse_context_kind(kv.get_string(p + "kind", context_kind_name(c.kind)));
  c.depth = sz("depth", c.depth);
  c.heads = sz("heads", c.heads);
  c.mlp_ratio = sz("mlp_ratio", c.mlp_ratio);
  c.context_length = sz("context_length", c.context_length);
  c.chunk_regions = sz("chunk_regions", c.chunk_regions);
  c.memory_tokens = sz("memory_tokens", c.memory_tokens);
  c.use_memory = kv.get_bool(p + "use_memory", c.use_memory);
  const std::string xa = kv.get_string(p + "xl_attention", "exact");
  if (xa != "exact" && xa != "approx") throw ConfigError(p + "xl_attention must be exact or approx");
  c.xl_attention = xa == "exact" ? AttentionKind::Exact : AttentionKind::Approx;
  c.approx = LinearAttentionConfig::from_config(kv, p);
  c.state_dim = sz("state_dim", c.state_dim);
  c.d_skip = kv.get_bool(p + "d_skip", c.d_skip);
  const std::string sm = kv.get_string(p + "scan", "parallel");
  if (sm != "sequential" && sm != "parallel") throw ConfigError(p + "scan must be sequential or parallel");
  c.scan = sm == "parallel" ? ScanMode::Parallel : ScanMode::Sequential;
  c.positional = parse_positional_mode(kv.get_string(p + "positional", "learned"));
  c.max_grid = sz("max_grid", c.max_grid);
  return c;
}

PositionalEmbedding2D PositionalEmbedding2D::make(ParamStore& ps, const std::string& name,
                                                  PositionalMode mode, std::size_t width,
                                                  std::size_t max_grid, std::size_t map_side) {
  PositionalEmbedding2D pe;
  pe.mode = mode;
  pe.width = width;
  if (mode == PositionalMode::Learned) {
    pe.region_row = ps.add(name + "/region_row", Tensor::zeros({max_grid, width}));
    pe.region_col = ps.add(name + "/region_col", Tensor::zeros({max_grid, width}));
    pe.row = ps.add(name + "/row", Tensor::zeros({map_side, width}));
    pe.col = ps.add(name + "/col", Tensor::zeros({map_side, width}));
  }
  if (mode == PositionalMode::Sinusoidal && width % 4 != 0)
    throw ConfigError("sinusoidal positional embedding needs width divisible by 4");
  return pe;
}

Tensor PositionalEmbedding2D::embed(const std::vector<TokenCoord>& coords,
                                    std::size_t map_rows, std::size_t map_cols) const {
  const std::size_t T = coords.size();
  if (mode == PositionalMode::Learned) {
    auto rows_of = [&](auto field, std::size_t extent, const char* what) {
      auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(T);
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t v = field(coords[t]);
        require(v < extent, std::string("positional embedding: ") + what + " " +
                                std::to_string(v) + " exceeds table extent " +
                                std::to_string(extent));
        (*idx)[t] = static_cast<std::ptrdiff_t>(v);
      }
      return idx;
    };
    Tensor e = gather_rows(region_row, width,
                           rows_of([](const TokenCoord& c) { return c.region_row; }, region_row.dim(0), "region row"),
                           {T, width});
    e = add(e, gather_rows(region_col, width,
                           rows_of([](const TokenCoord& c) { return c.region_col; }, region_col.dim(0), "region col"),
                           {T, width}));
    e = add(e, gather_rows(row, width,
                           rows_of([](const TokenCoord& c) { return c.row; }, row.dim(0), "row"),
                           {T, width}));
    return add(e, gather_rows(col, width,
                              rows_of([](const TokenCoord& c) { return c.col; }, col.dim(0), "col"),
                              {T, width}));
  }
  std::vector<double> v(T * width, 0.0);
  if (mode == PositionalMode::Sinusoidal) {
    // First half encodes the global row, second half the global column.
    const std::size_t half = width / 2, pairs = half / 2;
    for (std::size_t t = 0; t < T; ++t) {
      const double gr = static_cast<double>(coords[t].region_row * map_rows + coords[t].row);
      const double gc = static_cast<double>(coords[t].region_col * map_cols + coords[t].col);
      for (std::size_t i = 0; i < pairs; ++i) {
        const double f = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(half));
        v[t * width + 2 * i] = std::sin(gr * f);
        v[t * width + 2 * i + 1] = std::cos(gr * f);
        v[t * width + half + 2 * i] = std::sin(gc * f);
        v[t * width + half + 2 * i + 1] = std::cos(gc * f);
      }
    }
  }
  return Tensor({T, width}, std::move(v));
}

FeatureSequence add_2d_positional(const FeatureSequence& seq, const PositionalEmbedding2D& pe) {
  require(seq.tokens.rank() == 3, "add_2d_positional: tokens must be [B, T, D]");
  require(seq.coords.size() == seq.tokens.dim(1),
          "add_2d_positional: token coordinates missing (" + std::to_string(seq.coords.size()) +
              " for " + std::to_string(seq.tokens.dim(1)) + " tokens)");
  FeatureSequence out = seq;
  if (pe.mode == PositionalMode::None) return out;
  require(seq.tokens.dim(2) == pe.width, "add_2d_positional: width mismatch");
  out.tokens = add(seq.tokens, pe.embed(seq.coords, seq.map_rows, seq.map_cols));
  return out;
}

ContextEncoder::ContextEncoder(ParamStore& ps, ContextConfig cfg, std::size_t width, Rng& rng,
                               const std::string& name)
    : cfg_(std::move(cfg)) {
  if (cfg_.kind == ContextKind::Identity) return;
  if (cfg_.depth < 1) throw ConfigError("context: depth must be >= 1");
  if (cfg_.chunk_regions < 1) throw ConfigError("context: chunk_regions must be >= 1");
  cfg_.approx.validate();
  for (std::size_t l = 0; l < cfg_.depth; ++l) {
    const std::string ln = name + "/layer" + std::to_string(l);
    if (cfg_.kind == ContextKind::SSM) {
      ssm_.push_back(SsmLayer::make(ps, ln, width, cfg_.state_dim, cfg_.mlp_ratio, cfg_.d_skip, rng));
    } else {
      blocks_.push_back(TransformerBlock::make(ps, ln, width, cfg_.heads, cfg_.mlp_ratio, rng));
    }
  }
  norm_ = LayerNorm::make(ps, name + "/norm", width);
}

bool ContextEncoder::chunked(std::size_t sequence_length) const {
  return cfg_.kind == ContextKind::XL && sequence_length > cfg_.context_length;
}

XLConfig ContextEncoder::xl_config(std::size_t tokens_per_region) const {
  XLConfig x;
  x.depth = cfg_.depth;
  x.heads = cfg_.heads;
  x.mlp_ratio = cfg_.mlp_ratio;
  x.chunk_regions = cfg_.chunk_regions;
  x.memory_tokens = cfg_.memory_tokens == 0 ? cfg_.chunk_regions * tokens_per_region : cfg_.memory_tokens;
  x.use_memory = cfg_.use_memory;
  return x;
}

AttentionChoice ContextEncoder::choice(std::uint64_t seed) const {
  AttentionChoice c;
  c.kind = cfg_.kind == ContextKind::Hyper ? AttentionKind::Approx : cfg_.xl_attention;
  c.approx = cfg_.approx;
  c.seed = seed;
  return c;
}

Tensor ContextEncoder::forward(const Tensor& x, std::uint64_t seed, int threads) const {
  if (cfg_.kind == ContextKind::Identity) return x;
  Tensor h = x;
  if (cfg_.kind == ContextKind::SSM) {
    for (const auto& l : ssm_) h = l.forward(h, cfg_.scan, threads);
  } else {
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      AttentionChoice a = choice(seed * 1000003ULL + l);
      const Tensor n = blocks_[l].norm1(h);
      h = add(h, attend(blocks_[l].attn, n, n, a));
      h = add(h, blocks_[l].mlp(blocks_[l].norm2(h)));
    }
  }
  return norm_(h);
}

Tensor ContextEncoder::forward_chunk(const Tensor& x, std::size_t chunk_index,
                                     std::size_t tokens_per_region, XLMemory& memory,
                                     std::uint64_t seed) const {
  require(cfg_.kind == ContextKind::XL, "forward_chunk: chunked processing is XL-only");
  const std::vector<XLChunk> one{{chunk_index, x}};
  auto out = xl_forward_chunks(one, blocks_, xl_config(tokens_per_region), memory, choice(seed));
  return norm_(out[0]);
}

}  // namespace xt
