#include "xt/memory_ledger.hpp"

#include <algorithm>
#include <string>

#include "xt/errors.hpp"

namespace xt {

namespace {
thread_local Phase t_phase = Phase::Other;
}

std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::Other: return "other";
    case Phase::Region: return "region";
    case Phase::Context: return "context";
    case Phase::Cache: return "cache";
    case Phase::Output: return "output";
    default: return "?";
  }
}

MemoryLedger& MemoryLedger::global() {
  static MemoryLedger ledger;
  return ledger;
}

void MemoryLedger::reset() {
  std::lock_guard lock(mu_);
  ++epoch_;
  s_ = LedgerSnapshot{};
  cap_ = 0;
}

void MemoryLedger::set_cap(std::uint64_t scalars) {
  std::lock_guard lock(mu_);
  cap_ = scalars;
}

std::size_t MemoryLedger::open_probe() {
  std::lock_guard lock(mu_);
  std::size_t id = 0;
  while (id < probes_.size() && probes_[id].open) ++id;
  if (id == probes_.size()) probes_.emplace_back();
  probes_[id] = Probe{s_.live, s_.live, true};
  return id;
}

std::uint64_t MemoryLedger::close_probe(std::size_t id) {
  std::lock_guard lock(mu_);
  Probe& p = probes_.at(id);
  p.open = false;
  return p.peak > p.base ? p.peak - p.base : 0;
}

LedgerSnapshot MemoryLedger::snapshot() const {
  std::lock_guard lock(mu_);
  return s_;
}

std::uint64_t MemoryLedger::on_alloc(std::size_t scalars, Phase phase) {
  const auto idx = static_cast<std::size_t>(phase);
  std::lock_guard lock(mu_);
  if (cap_ != 0 && s_.live + scalars > cap_)
    throw SimulatedOom("allocation of " + std::to_string(scalars) + " scalars exceeds the cap of " +
                       std::to_string(cap_) + " live scalars");
  s_.allocated += scalars;
  s_.live += scalars;
  s_.live_by_phase[idx] += scalars;
  s_.peak = std::max(s_.peak, s_.live);
  s_.peak_by_phase[idx] = std::max(s_.peak_by_phase[idx], s_.live_by_phase[idx]);
  const auto out = s_.live_by_phase[static_cast<std::size_t>(Phase::Output)];
  s_.peak_excl_outputs = std::max(s_.peak_excl_outputs, s_.live - out);
  for (auto& p : probes_)
    if (p.open) p.peak = std::max(p.peak, s_.live);
  return epoch_;
}

void MemoryLedger::on_release(std::size_t scalars, Phase phase, std::uint64_t epoch) {
  std::lock_guard lock(mu_);
  if (epoch != epoch_) return;
  s_.released += scalars;
  s_.live -= scalars;
  s_.live_by_phase[static_cast<std::size_t>(phase)] -= scalars;
}

void MemoryLedger::on_retag(std::size_t scalars, Phase from, Phase to, std::uint64_t epoch) {
  std::lock_guard lock(mu_);
  if (epoch != epoch_) return;
  s_.live_by_phase[static_cast<std::size_t>(from)] -= scalars;
  auto& dst = s_.live_by_phase[static_cast<std::size_t>(to)];
  dst += scalars;
  s_.peak_by_phase[static_cast<std::size_t>(to)] = std::max(s_.peak_by_phase[static_cast<std::size_t>(to)], dst);
}

LedgerProbe::LedgerProbe() : id_(MemoryLedger::global().open_probe()) {}
LedgerProbe::~LedgerProbe() { close(); }

std::uint64_t LedgerProbe::close() {
  if (!closed_) {
    peak_ = MemoryLedger::global().close_probe(id_);
    closed_ = true;
  }
  return peak_;
}

Phase current_phase() { return t_phase; }

PhaseScope::PhaseScope(Phase p) : prev_(t_phase) { t_phase = p; }
PhaseScope::~PhaseScope() { t_phase = prev_; }

}  // namespace xt
