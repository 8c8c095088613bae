#include "xt/task.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "xt/errors.hpp"
#include "xt/ops.hpp"
#include "xt/optim.hpp"
#include "xt/parallel.hpp"
#include "xt/tensor_io.hpp"

namespace xt {

namespace {

Tensor take_rows(const Tensor& x, std::span<const std::size_t> rows) {
  Shape s = x.shape();
  const std::size_t row = x.numel() / s[0];
  std::vector<double> v(rows.size() * row);
  const auto src = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * row), row,
                v.begin() + static_cast<std::ptrdiff_t>(i * row));
  s[0] = rows.size();
  return Tensor(std::move(s), std::move(v));
}

std::vector<std::size_t> iota_n(std::size_t n, std::size_t from = 0) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), from);
  return v;
}

}  // namespace

std::vector<double> marker_pattern(MarkerShape s) {
  constexpr std::size_t n = kMarkerSide;
  std::vector<double> p(n * n, 0.0);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      bool on;
      if (s == MarkerShape::Cross) {
        on = (y >= 6 && y < 10) || (x >= 6 && x < 10);
      } else {
        on = y < 2 || y >= n - 2 || x < 2 || x >= n - 2;
      }
      p[y * n + x] = on ? 1.0 : 0.0;
    }
  return p;
}

SyntheticDataset gen_synthetic_task(std::uint64_t seed, std::size_t n, std::size_t input_size,
                                    std::size_t region_size, std::size_t offset_step) {
  require(offset_step >= 1, "gen_synthetic_task: offset step must be >= 1");
  require(region_size >= kMarkerSide, "gen_synthetic_task: region smaller than a marker");
  require(input_size >= 2 * region_size,
          "gen_synthetic_task: input size " + std::to_string(input_size) +
              " must be at least twice the region size " + std::to_string(region_size));
  require(input_size % region_size == 0, "gen_synthetic_task: input size must be a multiple of the region size");
  SyntheticDataset d;
  d.seed = seed;
  d.input_size = input_size;
  d.region_size = region_size;
  d.offset_step = offset_step;
  const std::size_t side = input_size / region_size, regions = side * side;

  Rng rng(seed);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.labels[i] = static_cast<int>(i % 2);
  std::shuffle(d.labels.begin(), d.labels.end(), rng);

  const std::size_t px = input_size * input_size;
  std::vector<double> img(n * px);
  std::normal_distribution<double> noise(0.0, kNoiseStddev);
  std::uniform_int_distribution<std::size_t> pick_region(0, regions - 1);
  std::uniform_int_distribution<std::size_t> pick_other(0, regions - 2);
  std::uniform_int_distribution<std::size_t> pick_offset(0, (region_size - kMarkerSide) / offset_step);
  std::bernoulli_distribution coin(0.5);
  const std::array<std::vector<double>, 2> stamps{marker_pattern(MarkerShape::Cross),
                                                  marker_pattern(MarkerShape::Square)};
  d.markers.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double* im = img.data() + i * px;
    for (std::size_t p = 0; p < px; ++p) im[p] = noise(rng);
    const std::size_t ra = pick_region(rng);
    std::size_t rb = pick_other(rng);
    if (rb >= ra) ++rb;
    const auto sa = coin(rng) ? MarkerShape::Square : MarkerShape::Cross;
    const auto sb = d.labels[i] == 1 ? sa : (sa == MarkerShape::Cross ? MarkerShape::Square : MarkerShape::Cross);
    const std::array<std::pair<std::size_t, MarkerShape>, 2> spec{{{ra, sa}, {rb, sb}}};
    for (std::size_t k = 0; k < 2; ++k) {
      MarkerPlacement& m = d.markers[i][k];
      m.region = spec[k].first;
      m.shape = spec[k].second;
      m.y = (m.region / side) * region_size + pick_offset(rng) * offset_step;
      m.x = (m.region % side) * region_size + pick_offset(rng) * offset_step;
      const auto& st = stamps[static_cast<std::size_t>(m.shape)];
      for (std::size_t y = 0; y < kMarkerSide; ++y)
        for (std::size_t x = 0; x < kMarkerSide; ++x)
          im[(m.y + y) * input_size + m.x + x] += st[y * kMarkerSide + x];
    }
  }
  d.images = Tensor({n, 1, input_size, input_size}, std::move(img));
  return d;
}

SyntheticDataset SyntheticDataset::subset(std::size_t begin, std::size_t end) const {
  require(begin <= end && end <= size(), "SyntheticDataset::subset: range out of bounds");
  SyntheticDataset s;
  s.seed = seed;
  s.input_size = input_size;
  s.region_size = region_size;
  s.offset_step = offset_step;
  const auto rows = iota_n(end - begin, begin);
  s.images = take_rows(images, rows);
  s.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                  labels.begin() + static_cast<std::ptrdiff_t>(end));
  s.markers.assign(markers.begin() + static_cast<std::ptrdiff_t>(begin),
                   markers.begin() + static_cast<std::ptrdiff_t>(end));
  return s;
}

void SyntheticDataset::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  save_tensor(dir / "images.xtt", images);
  std::vector<double> lab(labels.begin(), labels.end());
  save_tensor(dir / "labels.xtt", Tensor({size()}, std::move(lab)));
  std::vector<double> mk;
  mk.reserve(size() * 8);
  for (const auto& pair : markers)
    for (const auto& m : pair)
      for (double v : {double(m.region), double(m.y), double(m.x), double(static_cast<int>(m.shape))})
        mk.push_back(v);
  save_tensor(dir / "markers.xtt", Tensor({size(), 2, 4}, std::move(mk)));
  std::ofstream os(dir / "manifest.txt");
  if (!os) throw IoError("cannot write " + (dir / "manifest.txt").string());
  os << "task=marker_match\nseed=" << seed << "\nn=" << size() << "\ninput_size=" << input_size
     << "\nregion_size=" << region_size << "\noffset_step=" << offset_step << "\nmarker_side=" << kMarkerSide
     << "\nnoise_stddev=" << kNoiseStddev << "\n";
}

SyntheticDataset SyntheticDataset::load(const std::filesystem::path& dir) {
  const auto kv = KeyValueConfig::load(dir / "manifest.txt");
  SyntheticDataset d;
  d.seed = static_cast<std::uint64_t>(std::stoull(kv.get_string("seed", "0")));
  d.input_size = static_cast<std::size_t>(kv.get_int("input_size", 0));
  d.region_size = static_cast<std::size_t>(kv.get_int("region_size", 0));
  d.offset_step = static_cast<std::size_t>(kv.get_int("offset_step", 1));
  const auto n = static_cast<std::size_t>(kv.get_int("n", 0));
  d.images = load_tensor(dir / "images.xtt");
  const Tensor lab = load_tensor(dir / "labels.xtt");
  const Tensor mk = load_tensor(dir / "markers.xtt");
  if (d.images.rank() != 4 || d.images.dim(0) != n || d.images.dim(2) != d.input_size ||
      lab.numel() != n || mk.numel() != n * 8)
    throw IoError("dataset at " + dir.string() + " does not match its manifest");
  for (double v : lab.data()) d.labels.push_back(static_cast<int>(v));
  d.markers.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < 2; ++k) {
      const double* m = mk.data().data() + (i * 2 + k) * 4;
      d.markers[i][k] = {static_cast<std::size_t>(m[0]), static_cast<std::size_t>(m[1]),
                         static_cast<std::size_t>(m[2]), static_cast<MarkerShape>(static_cast<int>(m[3]))};
    }
  return d;
}

std::vector<std::vector<double>> region_crops(const SyntheticDataset& d, std::size_t region) {
  const std::size_t S = d.input_size, R = d.region_size, side = S / R;
  require(region < side * side, "region_crops: region index out of range");
  const std::size_t r0 = (region / side) * R, c0 = (region % side) * R;
  std::vector<std::vector<double>> out(d.size(), std::vector<double>(R * R));
  const auto px = d.images.data();
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t y = 0; y < R; ++y)
      std::copy_n(px.begin() + static_cast<std::ptrdiff_t>(i * S * S + (r0 + y) * S + c0), R,
                  out[i].begin() + static_cast<std::ptrdiff_t>(y * R));
  return out;
}

OracleReport single_region_oracle(const SyntheticDataset& train, const SyntheticDataset& test) {
  require(train.size() > 0 && test.size() > 0, "single_region_oracle: empty dataset");
  require(train.input_size == test.input_size && train.region_size == test.region_size,
          "single_region_oracle: datasets use different geometry");
  const std::size_t side = train.input_size / train.region_size;
  OracleReport rep;
  for (std::size_t r = 0; r < side * side; ++r) {
    const auto a = region_crops(train, r), b = region_crops(test, r);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t j = 0; j < a.size(); ++j) {
        double dist = 0.0;
        for (std::size_t p = 0; p < a[j].size(); ++p) {
          const double diff = a[j][p] - b[i][p];
          dist += diff * diff;
        }
        if (dist < best) {
          best = dist;
          arg = j;
        }
      }
      correct += train.labels[arg] == test.labels[i];
    }
    rep.per_region.push_back(static_cast<double>(correct) / static_cast<double>(b.size()));
  }
  rep.best = *std::max_element(rep.per_region.begin(), rep.per_region.end());
  return rep;
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& kv, const std::string& p) {
  TrainConfig c;
  c.epochs = static_cast<std::size_t>(kv.get_int(p + "epochs", static_cast<long long>(c.epochs)));
  c.batch_size = static_cast<std::size_t>(kv.get_int(p + "batch_size", static_cast<long long>(c.batch_size)));
  c.lr = kv.get_double(p + "lr", c.lr);
  c.weight_decay = kv.get_double(p + "weight_decay", c.weight_decay);
  if (c.batch_size == 0) throw ConfigError(p + "batch_size must be positive");
  if (c.lr < 0.0 || c.weight_decay < 0.0) throw ConfigError(p + "lr and weight_decay must be non-negative");
  return c;
}

KeyValueConfig task_preset() {
  return KeyValueConfig::parse(
      "input_size=64\n"
      "region_size=32\n"
      "classes=2\n"
      "encoder.patch_size=8\n"
      "encoder.dims=16,32\n"
      "encoder.depths=1,1\n"
      "encoder.heads=2,4\n"
      "encoder.window=4\n"
      "encoder.mlp_ratio=2\n"
      "context.kind=xl\n"
      "context.depth=2\n"
      "context.heads=4\n"
      "context.mlp_ratio=2\n"
      "context.state_dim=8\n"
      "context.max_grid=8\n"
      "context.hash_bits=2\n"
      "train.epochs=50\n"
      "train.batch_size=16\n"
      "train.lr=1e-3\n"
      "train.weight_decay=0\n"
      "task.n_train=2048\n"
      "task.n_test=512\n"
      "task.offset_step=16\n");
}

XTConfig task_model_config(ContextKind kind) {
  KeyValueConfig kv = task_preset();
  kv.set("context.kind", context_kind_name(kind));
  return XTConfig::from_config(kv);
}

TaskSetup TaskSetup::from_config(const KeyValueConfig& kv, const std::string& p) {
  TaskSetup t;
  t.n_train = static_cast<std::size_t>(kv.get_int(p + "n_train", static_cast<long long>(t.n_train)));
  t.n_test = static_cast<std::size_t>(kv.get_int(p + "n_test", static_cast<long long>(t.n_test)));
  t.offset_step = static_cast<std::size_t>(kv.get_int(p + "offset_step", static_cast<long long>(t.offset_step)));
  t.train_seed = static_cast<std::uint64_t>(kv.get_int(p + "train_seed", static_cast<long long>(t.train_seed)));
  t.test_seed = static_cast<std::uint64_t>(kv.get_int(p + "test_seed", static_cast<long long>(t.test_seed)));
  return t;
}

TrainResult train(XTModel& model, const SyntheticDataset& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  require(data.size() > 0, "train: dataset is empty");
  require(cfg.batch_size > 0, "train: batch size must be positive");
  AdamWHyper hp;
  hp.lr = cfg.lr;
  hp.weight_decay = cfg.weight_decay;
  AdamW opt(model.params(), hp);
  const std::size_t n = data.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t total = steps_per_epoch * cfg.epochs;
  Rng rng(cfg.seed);
  auto order = iota_n(n);
  TrainResult res;
  std::uint64_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = s * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + lo, hi - lo);
      std::vector<int> labels;
      for (std::size_t r : rows) labels.push_back(data.labels[r]);
      StreamOptions so;
      so.seed = cfg.seed * 7919 + step;
      const Tensor logits = classify(model, stream_forward(model, take_rows(data.images, rows), so));
      const Tensor loss = cross_entropy(logits, labels);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw TrainingError("training diverged: loss " + std::to_string(lv) + " at epoch " +
                             std::to_string(e) + " step " + std::to_string(step) +
                             " (lr " + std::to_string(cfg.lr) + ")");
      }
      backward(loss);
      opt.step(cosine_lr_scale(step, total));
      ++step;
      loss_sum += lv * static_cast<double>(rows.size());
      correct += static_cast<std::size_t>(std::lround(accuracy(logits, labels) * static_cast<double>(rows.size())));
    }
    EpochStats st{e, loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
    res.curve.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return res;
}

Tensor predict_logits(const XTModel& model, const Tensor& images, std::size_t batch_size, int threads) {
  require(batch_size > 0, "predict_logits: batch size must be positive");
  NoGradGuard ng;
  const std::size_t n = images.dim(0), batches = (n + batch_size - 1) / batch_size;
  std::vector<Tensor> out(batches);
  parallel_for(batches, threads, [&](std::size_t b) {
    NoGradGuard inner;
    const std::size_t lo = b * batch_size, hi = std::min(n, lo + batch_size);
    const auto rows = iota_n(hi - lo, lo);
    out[b] = classify(model, stream_forward(model, take_rows(images, rows)));
  });
  return out.size() == 1 ? out[0] : concat(out, 0);
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  require(logits.rank() == 2 && logits.dim(0) == labels.size(), "accuracy: logits/labels mismatch");
  const std::size_t k = logits.dim(1);
  const auto v = logits.data();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = v.subspan(i * k, k);
    const auto arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += arg == labels[i];
  }
  return labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
}

double evaluate(const XTModel& model, const SyntheticDataset& data, std::size_t batch_size, int threads) {
  if (data.size() == 0) return 0.0;
  return accuracy(predict_logits(model, data.images, batch_size, threads), data.labels);
}

std::string curve_csv(const TrainResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,loss,acc\n";
  for (const auto& e : r.curve) os << e.epoch << ',' << e.loss << ',' << e.acc << '\n';
  return os.str();
}

}  // namespace xt
