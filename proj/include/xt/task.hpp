#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "xt/stream.hpp"

namespace xt {

enum class MarkerShape : std::uint8_t { Cross = 0, Square = 1 };

struct MarkerPlacement {
  std::size_t region = 0;  // row-major region index
  std::size_t y = 0, x = 0;  // top-left pixel, image coordinates
  MarkerShape shape = MarkerShape::Cross;
};

/// Two-marker match/mismatch images: label 1 iff both markers share a shape.
struct SyntheticDataset {
  std::uint64_t seed = 0;
  std::size_t input_size = 0;
  std::size_t region_size = 0;
  std::size_t offset_step = 1;
  Tensor images;  // [n, 1, input, input]
  std::vector<int> labels;
  std::vector<std::array<MarkerPlacement, 2>> markers;

  std::size_t size() const { return labels.size(); }
  // Rows [begin, end) as a new dataset.
  SyntheticDataset subset(std::size_t begin, std::size_t end) const;

  // Directory with images.xtt, labels.xtt, markers.xtt and manifest.txt.
  void save(const std::filesystem::path& dir) const;
  static SyntheticDataset load(const std::filesystem::path& dir);
};

inline constexpr std::size_t kMarkerSide = 16;
inline constexpr double kNoiseStddev = 0.1;

// 16x16 marker stamp (1 on the pattern, 0 elsewhere), row-major.
std::vector<double> marker_pattern(MarkerShape s);

// Marker corners land on multiples of `offset_step` inside their region.
SyntheticDataset gen_synthetic_task(std::uint64_t seed, std::size_t n, std::size_t input_size,
                                    std::size_t region_size, std::size_t offset_step = 1);

/// Pixels of region `region` of every image, flattened: [n, region^2].
std::vector<std::vector<double>> region_crops(const SyntheticDataset& d, std::size_t region);

struct OracleReport {
  std::vector<double> per_region;  // 1-NN test accuracy reading only that region
  double best = 0.0;
};

/// Brute-force nearest neighbour (squared L2, lowest index on ties) trained
/// on single-region crops of `train` and scored on the same region of `test`.
OracleReport single_region_oracle(const SyntheticDataset& train, const SyntheticDataset& test);

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;  // shuffling and sampling
  int threads = 1;

  // Keys under "train.": epochs, batch_size, lr, weight_decay.
  static TrainConfig from_config(const KeyValueConfig& kv, const std::string& prefix = "train.");
};

/// Desk-scale defaults for the marker task: 64 px images cut into 32 px
/// regions, a two-stage 8 px-patch region encoder and a two-layer context
/// encoder. Also carries task.* and train.* keys.
KeyValueConfig task_preset();

// task_preset() with context.kind overridden.
XTConfig task_model_config(ContextKind kind);

struct TaskSetup {
  std::size_t n_train = 2048;
  std::size_t n_test = 512;
  std::size_t offset_step = 16;
  std::uint64_t train_seed = 1;
  std::uint64_t test_seed = 2;

  // Keys under "task.": n_train, n_test, offset_step, train_seed, test_seed.
  static TaskSetup from_config(const KeyValueConfig& kv, const std::string& prefix = "task.");
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;  // mean over samples
  double acc = 0.0;   // running training accuracy
};

struct TrainResult {
  std::vector<EpochStats> curve;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// AdamW with a cosine schedule over all steps. Throws TrainingError as soon
/// as a batch loss is not finite.
TrainResult train(XTModel& model, const SyntheticDataset& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

// Model logits for images [n, C, S, S], evaluated without a tape.
Tensor predict_logits(const XTModel& model, const Tensor& images, std::size_t batch_size = 64,
                      int threads = 1);

double accuracy(const Tensor& logits, const std::vector<int>& labels);
double evaluate(const XTModel& model, const SyntheticDataset& data, std::size_t batch_size = 64,
                int threads = 1);

// Header epoch,loss,acc.
std::string curve_csv(const TrainResult& r);

}  // namespace xt
