#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "xt/memory_ledger.hpp"

namespace xt {

enum class DType : std::uint8_t { F64 = 0, F32 = 1 };

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Row-major value buffer. Registers itself with the memory ledger for its
/// whole lifetime.
struct Storage {
  explicit Storage(std::vector<double> v);
  ~Storage();
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;

  std::vector<double> values;
  Phase phase;
  std::uint64_t epoch;
};

struct TensorImpl {
  Shape shape;
  std::shared_ptr<Storage> storage;
  std::vector<double> grad;
  DType dtype = DType::F64;
  bool requires_grad = false;
};

/// Dense tensor handle. Copies share the underlying node; values are
/// immutable after construction except via mutable_data().
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, DType dtype = DType::F64);
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, DType dtype = DType::F64);
  static Tensor full(Shape shape, double value, DType dtype = DType::F64);
  static Tensor scalar(double value);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  // Normal(0, stddev) resampled outside +-2 stddev.
  static Tensor trunc_normal(Shape shape, Rng& rng, double stddev);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative indices count from the back.
  std::size_t dim(std::ptrdiff_t axis) const;
  std::size_t numel() const;
  DType dtype() const;

  std::span<const double> data() const;
  // In-place access, reserved for optimizer updates and weight loading.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;
  // Rounds values through float for F32; F64 conversion is exact.
  Tensor to(DType dtype) const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Re-attributes t's buffer to another ledger phase (e.g. to Output once a
// result joins an accumulator).
void retag_phase(const Tensor& t, Phase phase);

using BackwardFn = std::function<void(const TensorImpl& out,
                                      std::span<const std::shared_ptr<TensorImpl>> in)>;

struct TapeEntry {
  std::shared_ptr<TensorImpl> out;
  std::vector<std::shared_ptr<TensorImpl>> in;
  BackwardFn fn;
};

/// Ordered record of differentiable operations. Construction order is the
/// topological order; backward walks it in exact reverse.
class GradTape {
 public:
  void record(TapeEntry entry) { entries_.push_back(std::move(entry)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Zero-initializes every gradient touched by the tape, seeds root with the
  // cotangent, runs the reverse sweep and clears the tape.
  void backward(const Tensor& root, std::span<const double> cotangent);

 private:
  std::vector<TapeEntry> entries_;
};

/// Tape that receives operations created on the calling thread.
GradTape& active_tape();

class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* prev_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Backward from a one-element root (seed 1).
void backward(const Tensor& root);
// Backward from an arbitrary root with an explicit cotangent of equal shape.
void backward(const Tensor& root, const Tensor& cotangent);

namespace detail {

// Gradient accumulator of an op input, or nullptr if it does not require grad.
double* grad_sink(TensorImpl& t);

DType promote(std::initializer_list<const Tensor*> ts);

// Builds an op output and records it on the active tape when any input
// requires grad and grad mode is on.
Tensor make_result(Shape shape, std::vector<double>&& values, DType dtype,
                   std::vector<Tensor> inputs, BackwardFn fn);

// Shares storage with `src` under a new shape; differentiable.
Tensor make_view(const Tensor& src, Shape shape);

/// Makes stop_gradient replay recorded values so finite differences see the
/// severed branch as a constant.
class StopGradientReplay {
 public:
  enum class Mode { Record, Replay };
  explicit StopGradientReplay(Mode mode, std::vector<Tensor>* tape);
  ~StopGradientReplay();
  StopGradientReplay(const StopGradientReplay&) = delete;
  StopGradientReplay& operator=(const StopGradientReplay&) = delete;
};

// Hook consulted by stop_gradient; returns the replacement value if replaying.
Tensor stop_gradient_hook(const Tensor& detached);

}  // namespace detail

}  // namespace xt
