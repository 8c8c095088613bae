#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "xt/errors.hpp"
#include "xt/memory_ledger.hpp"
#include "xt/ops.hpp"
#include "xt/stream.hpp"
#include "support.hpp"

using namespace xt;

namespace {

XTConfig small_config(std::size_t input, ContextKind kind = ContextKind::XL) {
  XTConfig c;
  c.pipeline = {input, 16};
  c.encoder.region_size = 16;
  c.encoder.patch_size = 4;
  c.encoder.dims = {4, 8};
  c.encoder.depths = {1, 1};
  c.encoder.heads = {1, 2};
  c.encoder.window = 2;
  c.context.kind = kind;
  c.context.heads = 2;
  c.context.state_dim = 4;
  c.context.max_grid = 16;
  return c;
}

Tensor images(std::size_t n, std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn({n, 1, side, side}, rng);
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_CASE("plan_chunks") {
  const ChunkPlan p = plan_chunks(16, 4);
  REQUIRE(p.size() == 4);
  for (std::size_t k = 0; k < 4; ++k)
    CHECK(p.chunks[k] == std::vector<std::size_t>{4 * k, 4 * k + 1, 4 * k + 2, 4 * k + 3});
  const ChunkPlan r = plan_chunks(5, 4);
  REQUIRE(r.size() == 2);
  CHECK(r.chunks[1] == std::vector<std::size_t>{4});
  CHECK(plan_chunks(5, 5).size() == 1);
  CHECK(plan_chunks(5, 64).size() == 1);
  CHECK_THROWS_AS(plan_chunks(4, 0), ContractViolation);
}

TEST_CASE("model config") {
  XTConfig c = small_config(32);
  CHECK_NOTHROW(c.validate());
  c.classes = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config(32);
  c.encoder.region_size = 32;
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  c = small_config(512);
  c.context.max_grid = 8;
  CHECK_THROWS_AS(c.validate(), ContractViolation);

  const auto kv = KeyValueConfig::parse("input_size=64\nregion_size=32\nmask_padding=true\n"
                                        "encoder.patch_size=8\nencoder.dims=16,32\nencoder.depths=1,1\n"
                                        "encoder.heads=2,4\ncontext.kind=ssm\n");
  const XTConfig p = XTConfig::from_config(kv);
  CHECK(p.pipeline.input_size == 64);
  CHECK(p.encoder.region_size == 32);
  CHECK(p.mask_padding);
  CHECK(p.context.kind == ContextKind::SSM);
}

TEST_CASE("512 / 256 whole-sequence pass sees four regions of tokens") {
  XTConfig c;
  c.pipeline = {512, 256};
  c.encoder.region_size = 256;
  c.encoder.patch_size = 16;
  c.encoder.dims = {4, 8};
  c.encoder.depths = {1, 1};
  c.encoder.heads = {1, 2};
  c.encoder.window = 4;
  c.context.heads = 2;
  const XTModel m(c, 1);
  NoGradGuard ng;
  const StreamResult r = stream_forward(m, Tensor::zeros({1, 1, 512, 512}));
  CHECK(r.regions == 4);
  CHECK(r.chunks == 1);
  CHECK(r.features.length() == 4 * c.encoder.tokens_per_region());
  CHECK(r.features.tokens.shape() == Shape{1, 4 * 64, 8});
}

TEST_CASE("outputs do not depend on the region schedule") {
  for (ContextKind kind : {ContextKind::XL, ContextKind::Hyper, ContextKind::SSM}) {
    XTConfig c = small_config(48, kind);
    c.context.context_length = 12;  // XL runs 3 chunks of 3 regions
    c.context.chunk_regions = 3;
    const XTModel m(c, 2);
    const Tensor x = images(2, 48, 3);
    NoGradGuard ng;
    const StreamResult all = stream_forward(m, x, {0, 1, 0, 5});
    CHECK(all.region_batch == 18);  // both images' regions together
    if (kind == ContextKind::XL) CHECK(all.chunks == 3);
    for (std::size_t batch : {1, 2, 4}) {
      for (int threads : {1, 3}) {
        const StreamResult r = stream_forward(m, x, {batch, threads, 0, 5});
        CHECK(r.region_batch == batch);
        CHECK(same(r.region_features.tokens, all.region_features.tokens));
        CHECK(same(r.features.tokens, all.features.tokens));
      }
    }
  }
}

TEST_CASE("region features are laid out row-major") {
  const XTModel m(small_config(32), 4);
  const Tensor x = images(1, 32, 5);
  NoGradGuard ng;
  const StreamResult r = stream_forward(m, x);
  const std::size_t tpr = m.config().encoder.tokens_per_region();
  const RegionGrid g = partition_regions(x, 16, 16);
  for (std::size_t i = 0; i < 4; ++i) {
    const Tensor alone = m.encoder().encode(slice(g.tiles, 0, i, i + 1));
    const Tensor part = slice(r.region_features.tokens, 1, i * tpr, (i + 1) * tpr);
    CHECK(std::equal(alone.data().begin(), alone.data().end(), part.data().begin()));
    CHECK(r.region_features.coords[i * tpr].region_row == i / 2);
    CHECK(r.region_features.coords[i * tpr].region_col == i % 2);
  }
}

TEST_CASE("stage-1 budget") {
  const XTModel m(small_config(48), 6);
  const std::uint64_t ws = m.region_working_set();
  REQUIRE(ws > 0);
  const Tensor x = images(1, 48, 7);
  NoGradGuard ng;
  CHECK_THROWS_AS(stream_forward(m, x, {0, 1, ws - 1, 0}), UnsatisfiableBudget);

  const StreamResult ref = stream_forward(m, x);
  MemoryLedger::global().reset();
  const std::uint64_t budget = ws * 5 / 2;
  const StreamResult r = stream_forward(m, x, {0, 1, budget, 0});
  const LedgerSnapshot s = MemoryLedger::global().snapshot();
  CHECK(r.region_batch == 2);
  CHECK(same(r.features.tokens, ref.features.tokens));
  CHECK(s.peak_by_phase[static_cast<std::size_t>(Phase::Region)] <= budget + ws);
}

TEST_CASE("chunked working set stays flat as the grid grows") {
  // Regions of 16 px, one region per chunk; the grid grows 2x2 -> 4x4 -> 8x8.
  std::vector<LedgerSnapshot> snaps;
  for (std::size_t side : {32, 64, 128}) {
    XTConfig c = small_config(side);
    c.context.context_length = 4;
    c.context.chunk_regions = 1;
    const XTModel m(c, 8);
    const Tensor img = Tensor::zeros({1, 1, side, side});
    NoGradGuard ng;
    MemoryLedger::global().reset();
    const StreamResult r = stream_forward(m, img, {1, 1, 0, 0});
    CHECK(r.chunks == r.regions);
    snaps.push_back(MemoryLedger::global().snapshot());
    const LedgerSnapshot& s = snaps.back();
    CHECK(s.peak >= s.live);
    CHECK(s.allocated - s.released == s.live);
    CHECK(s.peak <= s.peak_excl_outputs + s.peak_by_phase[static_cast<std::size_t>(Phase::Output)]);
  }
  for (const auto& s : snaps) {
    CHECK(static_cast<double>(s.peak_excl_outputs) <= 1.1 * static_cast<double>(snaps.front().peak_excl_outputs));
    CHECK(s.peak_by_phase[static_cast<std::size_t>(Phase::Cache)] ==
          snaps.front().peak_by_phase[static_cast<std::size_t>(Phase::Cache)]);
  }
  // The output accumulator alone grows with the image.
  CHECK(snaps.back().peak_by_phase[static_cast<std::size_t>(Phase::Output)] >
        8 * snaps.front().peak_by_phase[static_cast<std::size_t>(Phase::Output)]);
}

TEST_CASE("memory growth report") {
  const XTConfig c = small_config(16);
  const auto rows = memory_growth_report(c, {16, 32});
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].mode == "xt");
  CHECK(rows[1].mode == "naive");
  CHECK(rows[0].regions == 1);
  CHECK(rows[2].regions == 4);
  CHECK(rows[3].regions == 1);
  // A single-region image makes both pipelines the same computation.
  const double ratio = static_cast<double>(rows[0].peak_scalars) / static_cast<double>(rows[1].peak_scalars);
  CHECK(std::abs(ratio - 1.0) <= 0.05);

  MemoryBenchOptions capped;
  capped.cap_scalars = rows[1].peak_scalars;
  const auto oom = memory_growth_report(c, {16, 32}, capped);
  CHECK(oom[1].mode == "naive");
  CHECK(oom[3].mode == "naive_oom");
  CHECK(oom[2].peak_scalars == rows[2].peak_scalars);
  CHECK_THROWS_AS(memory_growth_report(c, {24}), ContractViolation);

  const std::string csv = memory_csv(rows);
  CHECK(csv.rfind("input_px,mode,peak_scalars,peak_excl_outputs,regions,chunks\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
}

TEST_CASE("classifier gradients flow through the stream") {
  XTConfig c = small_config(32);
  c.context.context_length = 4;  // chunked XL, memory threaded across chunks
  c.context.depth = 1;
  const XTModel m(c, 9);
  const Tensor x = images(2, 32, 10);
  const std::vector<int> labels{0, 1};
  auto loss = [&] { return cross_entropy(classify(m, stream_forward(m, x)), labels); };
  {
    NoGradGuard ng;
    CHECK(classify(m, stream_forward(m, x)).shape() == Shape{2, 2});
  }
  CHECK(testing::param_grad_check(loss, m.params().get("head/weight")) < 1e-5);
  CHECK(testing::param_grad_check(loss, m.params().get("context/layer0/attn/v/weight")) < 1e-5);
  CHECK(testing::param_grad_check(loss, m.params().get("region/merge1/weight")) < 1e-5);
}

TEST_CASE("padding mask changes pooling only") {
  XTConfig c = small_config(32);
  const XTModel plain(c, 11);
  c.mask_padding = true;
  const XTModel masked(c, 11);
  const Tensor x = images(1, 32, 12);
  NoGradGuard ng;
  // No padding at 32 / 16: both poolings agree.
  const Tensor a = classify(plain, stream_forward(plain, x));
  const Tensor b = classify(masked, stream_forward(masked, x));
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
}
