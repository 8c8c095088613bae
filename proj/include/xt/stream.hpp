#pragma once

#include <cstdint>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "xt/config.hpp"
#include "xt/context.hpp"
#include "xt/region_encoder.hpp"
#include "xt/tokenizer.hpp"

namespace xt {

struct ChunkPlan {
  std::size_t capacity = 1;
  std::vector<std::vector<std::size_t>> chunks;  // row-major region indices

  std::size_t size() const { return chunks.size(); }
};

// ceil(regions / C) row-major chunks; all but the last hold exactly C regions.
ChunkPlan plan_chunks(std::size_t regions, std::size_t capacity);

/// Full two-stage model description.
struct XTConfig {
  PipelineSpec pipeline;
  RegionEncoderConfig encoder;
  ContextConfig context;
  bool mask_padding = false;  // exclude padded tokens from pooling
  std::size_t classes = 2;

  void validate() const;
  // Reads "input_size", "region_size", "mask_padding", "classes" and the
  // "encoder." / "context." groups. The encoder region size follows region_size.
  static XTConfig from_config(const KeyValueConfig& kv);
};

class XTModel {
 public:
  XTModel(XTConfig cfg, std::uint64_t seed);
  XTModel(const XTModel&) = delete;
  XTModel& operator=(const XTModel&) = delete;

  const XTConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const RegionEncoder& encoder() const { return encoder_; }
  const PositionalEmbedding2D& positional() const { return positional_; }
  const ContextEncoder& context() const { return context_; }
  const Linear& head() const { return head_; }

  /// Ledger-measured live scalars of encoding one region without a tape.
  std::uint64_t region_working_set() const;

 private:
  XTConfig cfg_;
  ParamStore params_;
  RegionEncoder encoder_;
  PositionalEmbedding2D positional_;
  ContextEncoder context_;
  Linear head_;
  mutable std::mutex ws_mu_;
  mutable std::optional<std::uint64_t> working_set_;
};

struct StreamOptions {
  std::size_t batch_regions = 0;    // regions per Stage-1 batch; 0 means all
  int threads = 1;                  // concurrent region encoders (tape-free runs only)
  std::uint64_t budget_scalars = 0; // Stage-1 activation budget; 0 means unlimited
  std::uint64_t seed = 0;           // sampling seed for approximate attention
};

struct StreamResult {
  FeatureSequence region_features;  // Stage 1, row-major, before positional embedding
  FeatureSequence features;         // Stage 2 output
  std::size_t regions = 0;          // per image
  std::size_t region_batch = 0;     // regions encoded together
  std::size_t chunks = 1;
};

/// partition -> batched region encoding -> row-major reassembly -> 2D
/// positional embedding -> context encoder (chunked when the sequence exceeds
/// the context length). images: [B, C, S, S]. Stage-1 features and
/// Stage-2 outputs are attributed to the Output ledger phase.
StreamResult stream_forward(const XTModel& model, const Tensor& images,
                            const StreamOptions& opts = {});

// Pooled classifier logits [B, classes] from a stream result.
Tensor classify(const XTModel& model, const StreamResult& r);

struct MemoryRow {
  std::size_t input_px = 0;
  std::string mode;  // xt | naive | naive_oom
  std::uint64_t peak_scalars = 0;
  std::uint64_t peak_excl_outputs = 0;
  std::size_t regions = 0;
  std::size_t chunks = 0;
};

struct MemoryBenchOptions {
  std::size_t batch_regions = 1;
  std::uint64_t cap_scalars = 0;  // naive runs beyond this are reported as naive_oom
  std::uint64_t seed = 0;
  int threads = 1;
};

/// For each input side, streams a zero image through xT and through the
/// naive baseline (the whole image as a single region, same context encoder
/// over the full sequence) and records ledger peaks.
std::vector<MemoryRow> memory_growth_report(const XTConfig& cfg,
                                            const std::vector<std::size_t>& sizes,
                                            const MemoryBenchOptions& opts = {});

// Header input_px,mode,peak_scalars,peak_excl_outputs,regions,chunks.
std::string memory_csv(const std::vector<MemoryRow>& rows);

}  // namespace xt
