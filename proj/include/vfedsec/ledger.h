#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string_view>
#include <vector>

namespace vfedsec {

// Cost categories. Everything except kBaselinePayload is secure-layer
// overhead.
enum class CostTag : uint8_t {
  kBaselinePayload = 0,
  kMaskCompute,
  kKeygen,
  kSealIds,
  kPubkeyExchange,
  kUnmask,
  kQuantize,
};
inline constexpr size_t kCostTagCount = 7;

std::string_view CostTagName(CostTag t);
inline bool IsOverhead(CostTag t) { return t != CostTag::kBaselinePayload; }

struct PartyCounters {
  std::array<uint64_t, kCostTagCount> bytes_sent{};
  std::array<uint64_t, kCostTagCount> bytes_recv{};
  std::array<double, kCostTagCount> seconds{};

  uint64_t Bytes(CostTag t) const {
    return bytes_sent[size_t(t)] + bytes_recv[size_t(t)];
  }
  uint64_t OverheadBytes() const;
  uint64_t TotalBytes() const;
  double OverheadSeconds() const;
  double TotalSeconds() const;
};

// Byte and CPU-time counters per participant id. Counters only grow.
class OverheadLedger {
 public:
  void AddBytes(uint32_t from, uint32_t to, CostTag tag, uint64_t n);
  void AddSeconds(uint32_t party, CostTag tag, double s);

  // Appends a copy of the current counters.
  void Snapshot() { snapshots_.push_back(parties_); }

  const std::map<uint32_t, PartyCounters>& parties() const { return parties_; }
  const std::vector<std::map<uint32_t, PartyCounters>>& snapshots() const {
    return snapshots_;
  }
  PartyCounters Party(uint32_t id) const;

 private:
  std::map<uint32_t, PartyCounters> parties_;
  std::vector<std::map<uint32_t, PartyCounters>> snapshots_;
};

// Process CPU time in seconds.
double CpuSeconds();

// Cost of an empty timed region, measured once per process.
double TimerFloor();

// Adds the CPU time of its lifetime, less the timer floor, to one counter.
// A null ledger disables timing.
class ScopedCost {
 public:
  ScopedCost(OverheadLedger* ledger, uint32_t party, CostTag tag);
  ~ScopedCost();
  ScopedCost(const ScopedCost&) = delete;
  ScopedCost& operator=(const ScopedCost&) = delete;

 private:
  OverheadLedger* ledger_;
  uint32_t party_;
  CostTag tag_;
  double start_ = 0;
};

}  // namespace vfedsec
