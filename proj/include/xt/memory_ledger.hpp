#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <string_view>
#include <vector>

namespace xt {

/// Tag attached to every tensor buffer at allocation time.
enum class Phase : std::uint8_t { Other = 0, Region, Context, Cache, Output, Count };

constexpr std::size_t kPhaseCount = static_cast<std::size_t>(Phase::Count);

std::string_view phase_name(Phase p);

struct LedgerSnapshot {
  std::uint64_t live = 0;
  std::uint64_t peak = 0;
  // Peak of (live - live[Output]); the working set excluding accumulated outputs.
  std::uint64_t peak_excl_outputs = 0;
  std::uint64_t allocated = 0;
  std::uint64_t released = 0;
  std::array<std::uint64_t, kPhaseCount> live_by_phase{};
  std::array<std::uint64_t, kPhaseCount> peak_by_phase{};
};

/// Counts live tensor scalars registered through the storage allocation hook.
///
/// Only buffers allocated after the most recent reset() are counted; releasing
/// an older buffer is ignored, so long-lived weights never show up in a
/// measurement window. All methods are thread-safe.
class MemoryLedger {
 public:
  static MemoryLedger& global();

  void reset();
  LedgerSnapshot snapshot() const;

  // Allocation hook; returns the epoch the buffer was registered under.
  // Throws SimulatedOom when a cap is set and the allocation would exceed it.
  std::uint64_t on_alloc(std::size_t scalars, Phase phase);
  void on_release(std::size_t scalars, Phase phase, std::uint64_t epoch);
  // Moves a live buffer's count from one phase to another.
  void on_retag(std::size_t scalars, Phase from, Phase to, std::uint64_t epoch);

  // Live-scalar cap for the current epoch; 0 disables it.
  void set_cap(std::uint64_t scalars);

  // Probe windows: track max(live) - live_at_open while open.
  std::size_t open_probe();
  std::uint64_t close_probe(std::size_t id);

 private:
  struct Probe {
    std::uint64_t base = 0, peak = 0;
    bool open = false;
  };
  mutable std::mutex mu_;
  std::uint64_t epoch_ = 0;
  std::uint64_t cap_ = 0;
  LedgerSnapshot s_;
  std::vector<Probe> probes_;
};

/// RAII probe window: peak() is the largest rise of the live count above its
/// value when the probe opened.
class LedgerProbe {
 public:
  LedgerProbe();
  ~LedgerProbe();
  LedgerProbe(const LedgerProbe&) = delete;
  LedgerProbe& operator=(const LedgerProbe&) = delete;
  std::uint64_t close();

 private:
  std::size_t id_;
  bool closed_ = false;
  std::uint64_t peak_ = 0;
};

/// Phase applied to allocations made on the calling thread.
Phase current_phase();

class PhaseScope {
 public:
  explicit PhaseScope(Phase p);
  ~PhaseScope();
  PhaseScope(const PhaseScope&) = delete;
  PhaseScope& operator=(const PhaseScope&) = delete;

 private:
  Phase prev_;
};

}  // namespace xt
