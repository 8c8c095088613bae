// xt: command-line driver for tokenization, task training, probes and benches.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "xt/errors.hpp"
#include "xt/image.hpp"
#include "xt/ops.hpp"
#include "xt/probes.hpp"
#include "xt/task.hpp"
#include "xt/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace xt;

namespace {

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out = "xt_out";
  std::string probe_stage = "context";
};

KeyValueConfig load_config(const Globals& g) {
  KeyValueConfig kv = task_preset();
  if (!g.config.empty()) {
    const KeyValueConfig file = KeyValueConfig::load(g.config);
    for (const auto& [k, v] : file.values()) kv.set(k, v);
  }
  return kv;
}

fs::path out_dir(const Globals& g) {
  fs::create_directories(g.out);
  return g.out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

void write_config(const fs::path& path, const KeyValueConfig& kv) {
  std::ostringstream os;
  for (const auto& [k, v] : kv.values()) os << k << '=' << v << '\n';
  write_text(path, os.str());
}

SyntheticDataset dataset_or_generate(const std::string& dir, std::uint64_t seed, std::size_t n,
                                     const XTConfig& cfg, const TaskSetup& task) {
  if (!dir.empty()) return SyntheticDataset::load(dir);
  return gen_synthetic_task(seed, n, cfg.pipeline.input_size, cfg.pipeline.region_size, task.offset_step);
}

void cmd_tokenize(const Globals& g, const std::string& image_path, std::size_t region) {
  const KeyValueConfig kv = load_config(g);
  if (region == 0) region = static_cast<std::size_t>(kv.get_int("region_size", 32));
  const Tensor img = load_image(image_path);
  const Tensor x = img.rank() == 3 ? img : reshape(img, {1, img.dim(0), img.dim(1)});
  const RegionGrid grid = partition_regions(x, region, region);
  const fs::path out = out_dir(g);
  save_tensor(out / "tiles.xtt", grid.tiles);
  std::ostringstream csv;
  csv << "region,row,col,valid_pixels,padded_pixels\n";
  const std::size_t tile = region * region;
  for (std::size_t r = 0; r < grid.regions(); ++r) {
    const std::size_t valid = grid.valid_pixels(r);
    csv << r << ',' << r / grid.cols << ',' << r % grid.cols << ',' << valid << ',' << tile - valid << '\n';
    const auto v = grid.tiles.data().subspan(r * grid.channels * tile, tile);
    write_pgm(out / ("region_" + std::to_string(r) + ".pgm"), v, region, region);
  }
  write_text(out / "regions.csv", csv.str());
  std::cout << grid.rows << "x" << grid.cols << " regions of " << region << " px from "
            << grid.image_height << "x" << grid.image_width << " image -> " << out.string() << "\n";
}

void cmd_train(const Globals& g, const std::string& data_dir) {
  KeyValueConfig kv = load_config(g);
  const XTConfig cfg = XTConfig::from_config(kv);
  const TaskSetup task = TaskSetup::from_config(kv);
  TrainConfig tc = TrainConfig::from_config(kv);
  tc.seed = g.seed;
  tc.threads = g.threads;
  const SyntheticDataset data = dataset_or_generate(data_dir, task.train_seed, task.n_train, cfg, task);
  XTModel model(cfg, g.seed);
  const fs::path out = out_dir(g);
  std::cout << "epoch,loss,acc\n";
  const TrainResult r = train(model, data, tc, [](const EpochStats& s) {
    std::cout << s.epoch << ',' << s.loss << ',' << s.acc << std::endl;
  });
  write_text(out / "loss.csv", curve_csv(r));
  model.params().save(out / "weights");
  write_config(out / "config.txt", kv);
}

void cmd_eval(const Globals& g, const std::string& weights, const std::string& data_dir) {
  const KeyValueConfig kv = load_config(g);
  const XTConfig cfg = XTConfig::from_config(kv);
  const TaskSetup task = TaskSetup::from_config(kv);
  XTModel model(cfg, g.seed);
  if (!weights.empty()) model.params().load(weights);
  const SyntheticDataset data = dataset_or_generate(data_dir, task.test_seed, task.n_test, cfg, task);
  const double acc = evaluate(model, data, 64, g.threads);
  std::ostringstream csv;
  csv.precision(17);
  csv << "n,accuracy\n" << data.size() << ',' << acc << '\n';
  write_text(out_dir(g) / "eval.csv", csv.str());
  std::cout << "accuracy " << acc << " on " << data.size() << " samples\n";
}

void cmd_erf(const Globals& g, const std::string& weights, const std::string& image_path,
             std::optional<std::size_t> row, std::optional<std::size_t> col) {
  const KeyValueConfig kv = load_config(g);
  const XTConfig cfg = XTConfig::from_config(kv);
  const TaskSetup task = TaskSetup::from_config(kv);
  XTModel model(cfg, g.seed);
  if (!weights.empty()) model.params().load(weights);
  Tensor img;
  if (!image_path.empty()) {
    const Tensor raw = load_image(image_path);
    img = raw.rank() == 3 ? reshape(raw, {1, raw.dim(0), raw.dim(1), raw.dim(2)})
                          : reshape(raw, {1, 1, raw.dim(0), raw.dim(1)});
  } else {
    img = gen_synthetic_task(task.test_seed, 1, cfg.pipeline.input_size, cfg.pipeline.region_size,
                             task.offset_step).images;
  }
  ErfOptions eo;
  eo.stage = parse_probe_stage(g.probe_stage);
  eo.row = row;
  eo.col = col;
  eo.seed = g.seed;
  const ErfMap m = erf_map(model, img, eo);
  const fs::path out = out_dir(g);
  write_erf_pgm(out / "erf.pgm", m);
  const std::size_t R = cfg.pipeline.region_size;
  const std::size_t regions = ((m.height + R - 1) / R) * ((m.width + R - 1) / R);
  std::ostringstream csv;
  csv.precision(17);
  csv << "region,mass\n";
  for (std::size_t r = 0; r < regions; ++r) csv << r << ',' << erf_mass_in_region(m, R, r) << '\n';
  write_text(out / "erf_regions.csv", csv.str());
  std::cout << "probe (" << m.probe_row << ", " << m.probe_col << ") stage " << g.probe_stage
            << ": " << erf_support_regions(m, R).size() << "/" << regions
            << " regions with nonzero response -> " << (out / "erf.pgm").string() << "\n";
}

void cmd_bench_mem(const Globals& g, const std::vector<std::size_t>& sizes, std::uint64_t cap,
                   std::size_t batch) {
  const XTConfig cfg = XTConfig::from_config(load_config(g));
  MemoryBenchOptions mo;
  mo.cap_scalars = cap;
  mo.batch_regions = batch;
  mo.seed = g.seed;
  mo.threads = g.threads;
  const std::string csv = memory_csv(memory_growth_report(cfg, sizes, mo));
  write_text(out_dir(g) / "memory.csv", csv);
  std::cout << csv;
}

void cmd_bench_throughput(const Globals& g, const std::vector<std::size_t>& sizes,
                          std::size_t runs, std::size_t warmup) {
  const XTConfig cfg = XTConfig::from_config(load_config(g));
  std::vector<ThroughputCase> cases;
  for (std::size_t s : sizes) cases.push_back({std::to_string(s) + "/" + std::to_string(cfg.pipeline.region_size), cfg, s});
  ThroughputOptions to;
  to.runs = runs;
  to.warmup = warmup;
  to.threads = g.threads;
  to.seed = g.seed;
  const std::string csv = throughput_csv(bench_throughput(cases, to));
  write_text(out_dir(g) / "throughput.csv", csv);
  std::cout << csv;
}

void cmd_ctxlen(const Globals& g, bool reference, std::uint64_t input, std::uint64_t region,
                std::uint64_t layers, std::uint64_t chunk) {
  std::vector<ContextLengthRow> rows;
  if (reference) {
    rows = reference_context_rows();
  } else {
    if (input == 0) input = region;
    rows.push_back(context_length_row("xT", input, region, layers, chunk, region));
  }
  const std::string csv = context_length_csv(rows);
  if (!g.out.empty()) write_text(out_dir(g) / "ctxlen.csv", csv);
  for (const auto& r : rows)
    std::cout << r.model << " input " << r.input_px << " region " << r.region_px << " layers "
              << r.xl_layers << " chunk " << r.chunk << ": " << r.context.pixels
              << " px (multiplier " << r.context.multiplier << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xT streaming large-image toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "key=value configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "seed for weights, data order and sampling");
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output directory");
  app.add_option("--probe-stage", g.probe_stage, "ERF probe layer")->check(CLI::IsMember({"region", "context"}));

  auto* tok = app.add_subcommand("tokenize", "cut an image into regions");
  std::string image;
  std::size_t region = 0;
  tok->add_option("--image", image, "PGM/PPM or .xtt image")->required();
  tok->add_option("--region", region, "region side (default: config region_size)");

  auto* tr = app.add_subcommand("train", "train on the marker task");
  std::string data;
  tr->add_option("--data", data, "dataset directory (default: generate)");

  auto* ev = app.add_subcommand("eval", "top-1 accuracy on the marker task");
  std::string weights;
  ev->add_option("--weights", weights, "checkpoint directory");
  ev->add_option("--data", data, "dataset directory (default: generate the test split)");

  auto* erf = app.add_subcommand("erf", "effective receptive field of one output token");
  std::optional<std::size_t> row, col;
  erf->add_option("--weights", weights, "checkpoint directory");
  erf->add_option("--image", image, "image (default: a generated test sample)");
  erf->add_option("--row", row, "probe row in the global feature map");
  erf->add_option("--col", col, "probe column in the global feature map");

  auto* mem = app.add_subcommand("bench-mem", "ledger peaks of streamed xT vs a single pass");
  std::vector<std::size_t> sizes{128, 256, 512};
  std::uint64_t cap = 0;
  std::size_t batch = 1;
  mem->add_option("--sizes", sizes, "input sides")->delimiter(',');
  mem->add_option("--cap", cap, "simulated memory cap in scalars (0: none)");
  mem->add_option("--batch-regions", batch, "regions per encoder batch");

  auto* thr = app.add_subcommand("bench-throughput", "regions/s of tape-free streaming");
  std::size_t runs = 5, warmup = 1;
  thr->add_option("--sizes", sizes, "input sides")->delimiter(',');
  thr->add_option("--runs", runs, "timed runs (>= 5)");
  thr->add_option("--warmup", warmup, "warmup runs (>= 1)");

  auto* ctx = app.add_subcommand("ctxlen", "effective context length in pixels");
  bool reference = false;
  std::uint64_t input = 0, cregion = 256, layers = 2, chunk = 1;
  ctx->add_flag("--reference", reference, "print the Swin-B / xT XL reference settings");
  ctx->add_option("--input", input, "input side (default: region)");
  ctx->add_option("--region", cregion, "region side R");
  ctx->add_option("--layers", layers, "XL layers N (0: no recurrence)");
  ctx->add_option("--chunk", chunk, "regions per chunk C");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*tok) cmd_tokenize(g, image, region);
    else if (*tr) cmd_train(g, data);
    else if (*ev) cmd_eval(g, weights, data);
    else if (*erf) cmd_erf(g, weights, image, row, col);
    else if (*mem) cmd_bench_mem(g, sizes, cap, batch);
    else if (*thr) cmd_bench_throughput(g, sizes, runs, warmup);
    else if (*ctx) cmd_ctxlen(g, reference, input, cregion, layers, chunk);
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const InvalidNumerics& e) {
    std::cerr << "numerics error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
