#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "xt/errors.hpp"
#include "xt/ops.hpp"
#include "xt/task.hpp"

using namespace xt;

namespace {

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

double batch_loss(const XTModel& m, const SyntheticDataset& d) {
  NoGradGuard ng;
  return cross_entropy(predict_logits(m, d.images), d.labels).item();
}

std::vector<Tensor> snapshot(const XTModel& m) {
  std::vector<Tensor> w;
  for (const auto& p : m.params().items()) w.push_back(p.tensor.clone());
  return w;
}

}  // namespace

TEST_CASE("marker patterns") {
  const auto cross = marker_pattern(MarkerShape::Cross), square = marker_pattern(MarkerShape::Square);
  REQUIRE(cross.size() == kMarkerSide * kMarkerSide);
  auto ink = [](const std::vector<double>& p) { return std::count(p.begin(), p.end(), 1.0); };
  CHECK(ink(cross) == ink(square));
  CHECK(ink(cross) + std::count(cross.begin(), cross.end(), 0.0) == 256);
  CHECK(cross != square);
}

TEST_CASE("synthetic task generation") {
  const SyntheticDataset a = gen_synthetic_task(7, 512, 64, 32), b = gen_synthetic_task(7, 512, 64, 32);
  CHECK(same(a.images, b.images));
  CHECK(a.labels == b.labels);
  CHECK_FALSE(same(a.images, gen_synthetic_task(8, 512, 64, 32).images));
  CHECK(a.images.shape() == Shape{512, 1, 64, 64});

  for (std::size_t n : {511, 512, 1}) {
    const SyntheticDataset d = gen_synthetic_task(3, n, 64, 32);
    const auto ones = std::count(d.labels.begin(), d.labels.end(), 1);
    CHECK(std::abs(static_cast<long>(n) - 2 * ones) <= 1);
  }

  SUBCASE("markers sit inside distinct regions and define the label") {
    const SyntheticDataset d = gen_synthetic_task(5, 200, 96, 32, 8);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto& m = d.markers[i];
      CHECK(m[0].region != m[1].region);
      CHECK(d.labels[i] == (m[0].shape == m[1].shape ? 1 : 0));
      for (const auto& p : m) {
        const std::size_t ry = (p.region / 3) * 32, rx = (p.region % 3) * 32;
        CHECK(p.y >= ry);
        CHECK(p.x >= rx);
        CHECK(p.y + kMarkerSide <= ry + 32);
        CHECK(p.x + kMarkerSide <= rx + 32);
        CHECK((p.y - ry) % 8 == 0);
        CHECK((p.x - rx) % 8 == 0);
      }
    }
  }
  SUBCASE("image is noise plus the two stamps") {
    const SyntheticDataset d = gen_synthetic_task(6, 64, 64, 32);
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto& m = d.markers[i];
      for (std::size_t y = 0; y < 64; ++y)
        for (std::size_t x = 0; x < 64; ++x) {
          double v = d.images.data()[(i * 64 + y) * 64 + x];
          for (const auto& p : m)
            if (y >= p.y && y < p.y + kMarkerSide && x >= p.x && x < p.x + kMarkerSide)
              v -= marker_pattern(p.shape)[(y - p.y) * kMarkerSide + (x - p.x)];
          sum += v;
          sq += v * v;
          ++count;
        }
    }
    const double mean = sum / count, sd = std::sqrt(sq / count - mean * mean);
    CHECK(std::abs(mean) < 0.005);
    CHECK(sd == doctest::Approx(kNoiseStddev).epsilon(0.02));
  }
  CHECK_THROWS_AS(gen_synthetic_task(1, 4, 48, 32), ContractViolation);
  CHECK_THROWS_AS(gen_synthetic_task(1, 4, 32, 32), ContractViolation);
  CHECK_THROWS_AS(gen_synthetic_task(1, 4, 16, 8), ContractViolation);
}

TEST_CASE("single-region oracle stays at chance") {
  const SyntheticDataset train_set = gen_synthetic_task(11, 512, 64, 32, 8);
  const SyntheticDataset test_set = gen_synthetic_task(12, 512, 64, 32, 8);
  const OracleReport r = single_region_oracle(train_set, test_set);
  REQUIRE(r.per_region.size() == 4);
  CHECK(r.best == *std::max_element(r.per_region.begin(), r.per_region.end()));
  CHECK(r.best <= 0.55);
}

TEST_CASE("dataset round trip") {
  const SyntheticDataset d = gen_synthetic_task(9, 10, 64, 32, 8);
  const auto dir = std::filesystem::temp_directory_path() / "xt_test_dataset";
  std::filesystem::remove_all(dir);
  d.save(dir);
  CHECK(std::filesystem::exists(dir / "manifest.txt"));
  const SyntheticDataset back = SyntheticDataset::load(dir);
  CHECK(same(back.images, d.images));
  CHECK(back.labels == d.labels);
  CHECK(back.seed == 9);
  CHECK(back.offset_step == 8);
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t k = 0; k < 2; ++k) {
      CHECK(back.markers[i][k].region == d.markers[i][k].region);
      CHECK(back.markers[i][k].y == d.markers[i][k].y);
      CHECK(back.markers[i][k].shape == d.markers[i][k].shape);
    }
  const SyntheticDataset s = d.subset(2, 5);
  CHECK(s.size() == 3);
  CHECK(s.labels[0] == d.labels[2]);
  CHECK_THROWS_AS(d.subset(4, 11), ContractViolation);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(SyntheticDataset::load(dir), IoError);
}

TEST_CASE("accuracy") {
  const std::vector<int> labels{0, 1, 1, 0, 1};
  CHECK(accuracy(Tensor({5, 2}, {1, 0, 0, 1, 0, 1, 1, 0, 0, 1}), labels) == 1.0);
  CHECK(accuracy(Tensor::zeros({5, 2}), labels) == doctest::Approx(0.4));
  const SyntheticDataset d = gen_synthetic_task(1, 101, 64, 32);
  const double constant = accuracy(Tensor::zeros({101, 2}), d.labels);
  CHECK(std::abs(constant - 0.5) <= 1.0 / 101 + 1e-12);
}

TEST_CASE("training") {
  const XTConfig cfg = task_model_config(ContextKind::XL);
  const SyntheticDataset data = gen_synthetic_task(21, 32, 64, 32, 8);

  SUBCASE("one step on a fixed batch lowers its loss") {
    XTModel m(cfg, 3);
    const SyntheticDataset batch = data.subset(0, 16);
    const double before = batch_loss(m, batch);
    TrainConfig tc;
    tc.epochs = 1;
    tc.lr = 1e-3;
    const TrainResult r = train(m, batch, tc);
    CHECK(r.curve.size() == 1);
    CHECK(batch_loss(m, batch) < before);
  }
  SUBCASE("zero learning rate leaves weights untouched") {
    XTModel m(cfg, 4);
    const auto w0 = snapshot(m);
    TrainConfig tc;
    tc.epochs = 2;
    tc.lr = 0.0;
    train(m, data, tc);
    const auto w1 = snapshot(m);
    for (std::size_t i = 0; i < w0.size(); ++i) CHECK(same(w0[i], w1[i]));
  }
  SUBCASE("same seed, same weights and curve") {
    TrainConfig tc;
    tc.epochs = 2;
    tc.seed = 5;
    XTModel a(cfg, 6), b(cfg, 6);
    const TrainResult ra = train(a, data, tc), rb = train(b, data, tc);
    CHECK(curve_csv(ra) == curve_csv(rb));
    const auto wa = snapshot(a), wb = snapshot(b);
    for (std::size_t i = 0; i < wa.size(); ++i) CHECK(same(wa[i], wb[i]));
  }
  SUBCASE("a non-finite loss stops training") {
    XTModel m(cfg, 7);
    Tensor bias = m.params().get("head/bias");
    bias.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig tc;
    tc.epochs = 1;
    CHECK_THROWS_AS(train(m, data, tc), TrainingError);
  }
  SUBCASE("curve csv") {
    TrainResult r;
    r.curve = {{0, 0.5, 0.25}, {1, 0.125, 1.0}};
    CHECK(curve_csv(r) == "epoch,loss,acc\n0,0.5,0.25\n1,0.125,1\n");
  }
}

TEST_CASE("the model overfits 32 samples") {
  XTModel m(task_model_config(ContextKind::XL), 8);
  const SyntheticDataset data = gen_synthetic_task(22, 32, 64, 32, 8);
  TrainConfig tc;
  tc.epochs = 200;
  tc.seed = 8;
  train(m, data, tc);
  CHECK(evaluate(m, data) == 1.0);
}

TEST_CASE("train config") {
  const auto kv = KeyValueConfig::parse("train.epochs=3\ntrain.lr=0.01\ntrain.batch_size=4\n");
  const TrainConfig c = TrainConfig::from_config(kv);
  CHECK(c.epochs == 3);
  CHECK(c.lr == 0.01);
  CHECK(c.batch_size == 4);
  CHECK_THROWS_AS(TrainConfig::from_config(KeyValueConfig::parse("train.batch_size=0\n")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_config(KeyValueConfig::parse("train.lr=-1\n")), ConfigError);
  const TaskSetup t = TaskSetup::from_config(task_preset());
  CHECK(t.n_train == 2048);
  CHECK(t.n_test == 512);
}
