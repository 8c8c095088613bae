#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "xt/context.hpp"
#include "xt/errors.hpp"
#include "xt/ops.hpp"

using namespace xt;

namespace {

// 2x2 regions, each a 2x2 token map: 16 tokens on a 4x4 global grid.
FeatureSequence grid_sequence(std::size_t width, std::uint64_t seed) {
  FeatureSequence s;
  Rng rng(seed);
  s.tokens = Tensor::randn({1, 16, width}, rng);
  s.grid_rows = s.grid_cols = 2;
  s.map_rows = s.map_cols = 2;
  for (std::uint32_t r = 0; r < 2; ++r)
    for (std::uint32_t c = 0; c < 2; ++c)
      for (std::uint32_t y = 0; y < 2; ++y)
        for (std::uint32_t x = 0; x < 2; ++x) s.coords.push_back({r, c, y, x});
  s.keep.assign(16, 1);
  return s;
}

double row_distance(const Tensor& e, std::size_t width, std::size_t i, std::size_t j) {
  double d = 0.0;
  for (std::size_t k = 0; k < width; ++k) d = std::max(d, std::abs(e.data()[i * width + k] - e.data()[j * width + k]));
  return d;
}

}  // namespace

TEST_CASE("zero learned tables leave features unchanged") {
  ParamStore ps;
  const auto pe = PositionalEmbedding2D::make(ps, "pos", PositionalMode::Learned, 8, 4, 2);
  const FeatureSequence s = grid_sequence(8, 1);
  const FeatureSequence out = add_2d_positional(s, pe);
  CHECK(out.tokens.shape() == s.tokens.shape());
  CHECK(std::equal(out.tokens.data().begin(), out.tokens.data().end(), s.tokens.data().begin()));
  CHECK(ps.get("pos/region_row").shape() == Shape{4, 8});
}

TEST_CASE("learned tables add per-axis rows") {
  ParamStore ps;
  auto pe = PositionalEmbedding2D::make(ps, "pos", PositionalMode::Learned, 4, 2, 2);
  pe.region_row = Tensor({2, 4}, {0, 0, 0, 0, 1, 1, 1, 1});
  pe.region_col = Tensor({2, 4}, {0, 0, 0, 0, 10, 10, 10, 10});
  pe.row = Tensor({2, 4}, {0, 0, 0, 0, 100, 100, 100, 100});
  pe.col = Tensor({2, 4}, {0, 0, 0, 0, 1000, 1000, 1000, 1000});
  const FeatureSequence s = grid_sequence(4, 2);
  const Tensor e = pe.embed(s.coords, 2, 2);
  for (std::size_t t = 0; t < 16; ++t) {
    const TokenCoord& c = s.coords[t];
    const double expect = c.region_row + 10.0 * c.region_col + 100.0 * c.row + 1000.0 * c.col;
    CHECK(e.data()[t * 4] == expect);
  }
  std::vector<TokenCoord> outside{{2, 0, 0, 0}};
  CHECK_THROWS_AS(pe.embed(outside, 2, 2), ContractViolation);
}

TEST_CASE("sinusoidal embedding separates every global position") {
  ParamStore ps;
  const auto pe = PositionalEmbedding2D::make(ps, "pos", PositionalMode::Sinusoidal, 8, 4, 2);
  const FeatureSequence s = grid_sequence(8, 3);
  const Tensor e = pe.embed(s.coords, 2, 2);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = i + 1; j < 16; ++j) CHECK(row_distance(e, 8, i, j) > 1e-3);

  // Token 0 is region (0,0) intra (0,0); token 4 is region (0,1) intra (0,0).
  REQUIRE(s.coords[4].region_col == 1);
  REQUIRE(s.coords[4].row == 0);
  CHECK(row_distance(e, 8, 0, 4) > 1e-3);
  // Same global coordinate reached from two decompositions embeds identically.
  const Tensor a = pe.embed({{0, 1, 0, 0}}, 2, 2), b = pe.embed({{0, 0, 0, 2}}, 2, 2);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  CHECK_THROWS_AS(PositionalEmbedding2D::make(ps, "bad", PositionalMode::Sinusoidal, 6, 4, 2), ConfigError);
}

TEST_CASE("positional addition requires coordinates") {
  ParamStore ps;
  const auto pe = PositionalEmbedding2D::make(ps, "pos", PositionalMode::Sinusoidal, 8, 4, 2);
  FeatureSequence s = grid_sequence(8, 4);
  s.coords.pop_back();
  CHECK_THROWS_AS(add_2d_positional(s, pe), ContractViolation);
  s.coords.clear();
  CHECK_THROWS_AS(add_2d_positional(s, pe), ContractViolation);
}

TEST_CASE("context encoder kinds") {
  CHECK(parse_context_kind("xl") == ContextKind::XL);
  CHECK(parse_context_kind("hyper") == ContextKind::Hyper);
  CHECK(parse_context_kind("ssm") == ContextKind::SSM);
  CHECK(parse_context_kind("identity") == ContextKind::Identity);
  CHECK_THROWS_AS(parse_context_kind("lstm"), ConfigError);
  for (ContextKind k : {ContextKind::Identity, ContextKind::XL, ContextKind::Hyper, ContextKind::SSM})
    CHECK(parse_context_kind(context_kind_name(k)) == k);

  const auto kv = KeyValueConfig::parse("context.kind=ssm\ncontext.depth=3\ncontext.state_dim=4\n"
                                        "context.positional=sinusoidal\ncontext.hash_bits=2\n");
  const ContextConfig c = ContextConfig::from_config(kv);
  CHECK(c.kind == ContextKind::SSM);
  CHECK(c.depth == 3);
  CHECK(c.state_dim == 4);
  CHECK(c.positional == PositionalMode::Sinusoidal);
  CHECK(c.approx.hash_bits == 2);
}

TEST_CASE("context encoders keep the sequence shape") {
  Rng data(5);
  const Tensor x = Tensor::randn({2, 12, 8}, data);
  for (ContextKind k : {ContextKind::Identity, ContextKind::XL, ContextKind::Hyper, ContextKind::SSM}) {
    ParamStore ps;
    Rng rng(6);
    ContextConfig cfg;
    cfg.kind = k;
    cfg.heads = 2;
    cfg.state_dim = 4;
    const ContextEncoder enc(ps, cfg, 8, rng);
    const Tensor y = enc.forward(x, 7);
    CHECK(y.shape() == x.shape());
    const Tensor y2 = enc.forward(x, 7);
    CHECK(std::equal(y.data().begin(), y.data().end(), y2.data().begin()));
    if (k == ContextKind::Identity) {
      CHECK(ps.size() == 0);
      CHECK(std::equal(y.data().begin(), y.data().end(), x.data().begin()));
    }
  }
}

TEST_CASE("whole-sequence mode below the context length") {
  ParamStore ps;
  Rng rng(8);
  ContextConfig cfg;
  cfg.heads = 2;
  cfg.context_length = 16;
  const ContextEncoder xl(ps, cfg, 8, rng);
  CHECK_FALSE(xl.chunked(16));
  CHECK(xl.chunked(17));
  cfg.kind = ContextKind::SSM;
  cfg.state_dim = 4;
  const ContextEncoder ssm(ps, cfg, 8, rng, "ssm");
  CHECK_FALSE(ssm.chunked(1000));
  XLMemory mem;
  CHECK_THROWS_AS(ssm.forward_chunk(Tensor::zeros({1, 4, 8}), 0, 4, mem, 0), ContractViolation);

  // A single chunk with empty memory is the whole-sequence pass.
  Rng data(9);
  const Tensor x = Tensor::randn({1, 8, 8}, data);
  XLMemory fresh;
  const Tensor a = xl.forward_chunk(x, 0, 4, fresh, 3), b = xl.forward(x, 3);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  CHECK(xl.xl_config(4).memory_tokens == 4);
}
