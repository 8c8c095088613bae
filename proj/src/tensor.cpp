#include "xt/tensor.hpp"

#include <cmath>
#include <sstream>

#include "xt/errors.hpp"

namespace xt {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Storage::Storage(std::vector<double> v)
    : values(std::move(v)), phase(current_phase()),
      epoch(MemoryLedger::global().on_alloc(values.size(), phase)) {}

Storage::~Storage() { MemoryLedger::global().on_release(values.size(), phase, epoch); }

namespace {

void round_f32(std::vector<double>& v) {
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<double> values, DType dtype) {
  if (shape_numel(shape) != values.size()) {
    throw ContractViolation("tensor: shape " + shape_str(shape) + " does not match " +
                            std::to_string(values.size()) + " values");
  }
  if (dtype == DType::F32) round_f32(values);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->storage = std::make_shared<Storage>(std::move(values));
  impl->dtype = dtype;
  return impl;
}

thread_local GradTape t_default_tape;
thread_local GradTape* t_tape = &t_default_tape;
thread_local bool t_grad_enabled = true;

struct ReplayState {
  detail::StopGradientReplay::Mode mode;
  std::vector<Tensor>* tape = nullptr;
  std::size_t cursor = 0;
};
thread_local ReplayState* t_replay = nullptr;

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> values, DType dtype)
    : impl_(new_impl(std::move(shape), std::move(values), dtype)) {}

Tensor Tensor::zeros(Shape shape, DType dtype) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), dtype);
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), dtype);
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::trunc_normal(Shape shape, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    double z;
    do {
      z = dist(rng);
    } while (std::abs(z) > 2.0);
    x = z * stddev;
  }
  return Tensor(std::move(shape), std::move(v));
}

const Shape& Tensor::shape() const {
  require(defined(), "tensor: undefined");
  return impl_->shape;
}

std::size_t Tensor::dim(std::ptrdiff_t axis) const {
  const auto r = static_cast<std::ptrdiff_t>(rank());
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, "tensor: axis out of range");
  return shape()[static_cast<std::size_t>(axis)];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const { return impl_->dtype; }

std::span<const double> Tensor::data() const {
  require(defined(), "tensor: undefined");
  return impl_->storage->values;
}

std::span<double> Tensor::mutable_data() {
  require(defined(), "tensor: undefined");
  return impl_->storage->values;
}

double Tensor::item() const {
  require(numel() == 1, "item: tensor has " + std::to_string(numel()) + " elements");
  return data()[0];
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  require(defined(), "tensor: undefined");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return defined() && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require(defined(), "tensor: undefined");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (defined()) impl_->grad.assign(numel(), 0.0);
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->storage = impl_->storage;
  impl->dtype = impl_->dtype;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  std::vector<double> v(data().begin(), data().end());
  return Tensor(shape(), std::move(v), dtype());
}

Tensor Tensor::to(DType dtype) const {
  std::vector<double> v(data().begin(), data().end());
  return Tensor(shape(), std::move(v), dtype);
}

void retag_phase(const Tensor& t, Phase phase) {
  require(t.defined(), "retag_phase: undefined tensor");
  Storage& st = *t.impl()->storage;
  if (st.phase == phase) return;
  MemoryLedger::global().on_retag(st.values.size(), st.phase, phase, st.epoch);
  st.phase = phase;
}

void GradTape::backward(const Tensor& root, std::span<const double> cotangent) {
  require(root.defined(), "backward: undefined root");
  require(cotangent.size() == root.numel(), "backward: cotangent size mismatch");
  for (auto& e : entries_) {
    e.out->grad.assign(shape_numel(e.out->shape), 0.0);
    for (auto& in : e.in) {
      if (in->requires_grad) in->grad.assign(shape_numel(in->shape), 0.0);
    }
  }
  auto& rg = root.impl()->grad;
  rg.assign(cotangent.begin(), cotangent.end());
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->fn(*it->out, it->in);
  }
  entries_.clear();
}

GradTape& active_tape() { return *t_tape; }

TapeScope::TapeScope(GradTape& tape) : prev_(t_tape) { t_tape = &tape; }
TapeScope::~TapeScope() { t_tape = prev_; }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

void backward(const Tensor& root) {
  require(root.numel() == 1, "backward: root must have one element, got shape " +
                                 shape_str(root.shape()));
  const double one = 1.0;
  active_tape().backward(root, std::span<const double>(&one, 1));
}

void backward(const Tensor& root, const Tensor& cotangent) {
  require(root.shape() == cotangent.shape(), "backward: cotangent shape mismatch");
  active_tape().backward(root, cotangent.data());
}

namespace detail {

double* grad_sink(TensorImpl& t) {
  if (!t.requires_grad) return nullptr;
  if (t.grad.empty()) t.grad.assign(shape_numel(t.shape), 0.0);
  return t.grad.data();
}

DType promote(std::initializer_list<const Tensor*> ts) {
  for (const auto* t : ts) {
    if (t->dtype() == DType::F32) return DType::F32;
  }
  return DType::F64;
}

Tensor make_result(Shape shape, std::vector<double>&& values, DType dtype,
                   std::vector<Tensor> inputs, BackwardFn fn) {
  Tensor out(new_impl(std::move(shape), std::move(values), dtype));
  if (!t_grad_enabled) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  out.impl()->requires_grad = true;
  TapeEntry e;
  e.out = out.impl();
  e.in.reserve(inputs.size());
  for (auto& t : inputs) e.in.push_back(t.impl());
  e.fn = std::move(fn);
  t_tape->record(std::move(e));
  return out;
}

Tensor make_view(const Tensor& src, Shape shape) {
  require(shape_numel(shape) == src.numel(), "reshape: element count mismatch " +
                                                 shape_str(src.shape()) + " -> " +
                                                 shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->storage = src.impl()->storage;
  impl->dtype = src.dtype();
  Tensor out(std::move(impl));
  if (!t_grad_enabled || !src.requires_grad()) return out;
  out.impl()->requires_grad = true;
  TapeEntry e;
  e.out = out.impl();
  e.in.push_back(src.impl());
  e.fn = [](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
    if (double* g = grad_sink(*in[0])) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
  };
  t_tape->record(std::move(e));
  return out;
}

StopGradientReplay::StopGradientReplay(Mode mode, std::vector<Tensor>* tape) {
  require(t_replay == nullptr, "stop-gradient replay scopes do not nest");
  t_replay = new ReplayState{mode, tape, 0};
  if (mode == Mode::Record) tape->clear();
}

StopGradientReplay::~StopGradientReplay() {
  delete t_replay;
  t_replay = nullptr;
}

Tensor stop_gradient_hook(const Tensor& detached) {
  if (t_replay == nullptr) return detached;
  if (t_replay->mode == StopGradientReplay::Mode::Record) {
    t_replay->tape->push_back(detached);
    return detached;
  }
  require(t_replay->cursor < t_replay->tape->size(),
          "stop-gradient replay: function is not deterministic in structure");
  const Tensor& rec = (*t_replay->tape)[t_replay->cursor++];
  require(rec.shape() == detached.shape(), "stop-gradient replay: shape changed");
  return rec;
}

}  // namespace detail

}  // namespace xt
