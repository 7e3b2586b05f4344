#include "vfedsec/ledger.h"

#include <time.h>

#include <algorithm>
#include <vector>

namespace vfedsec {

std::string_view CostTagName(CostTag t) {
  switch (t) {
    case CostTag::kBaselinePayload: return "baseline_payload";
    case CostTag::kMaskCompute: return "mask_compute";
    case CostTag::kKeygen: return "keygen";
    case CostTag::kSealIds: return "seal_ids";
    case CostTag::kPubkeyExchange: return "pubkey_exchange";
    case CostTag::kUnmask: return "unmask";
    case CostTag::kQuantize: return "quantize";
  }
  return "unknown";
}

uint64_t PartyCounters::OverheadBytes() const {
  uint64_t s = 0;
  for (size_t i = 1; i < kCostTagCount; ++i) s += bytes_sent[i] + bytes_recv[i];
  return s;
}

uint64_t PartyCounters::TotalBytes() const {
  return OverheadBytes() + Bytes(CostTag::kBaselinePayload);
}

double PartyCounters::OverheadSeconds() const {
  double s = 0;
  for (size_t i = 1; i < kCostTagCount; ++i) s += seconds[i];
  return s;
}

double PartyCounters::TotalSeconds() const {
  return OverheadSeconds() + seconds[0];
}

void OverheadLedger::AddBytes(uint32_t from, uint32_t to, CostTag tag,
                              uint64_t n) {
  parties_[from].bytes_sent[size_t(tag)] += n;
  parties_[to].bytes_recv[size_t(tag)] += n;
}

void OverheadLedger::AddSeconds(uint32_t party, CostTag tag, double s) {
  parties_[party].seconds[size_t(tag)] += s;
}

PartyCounters OverheadLedger::Party(uint32_t id) const {
  auto it = parties_.find(id);
  return it == parties_.end() ? PartyCounters{} : it->second;
}

double CpuSeconds() {
  timespec ts{};
  clock_gettime(CLOCK_PROCESS_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

double TimerFloor() {
  static const double floor = [] {
    std::vector<double> d(201);
    for (auto& x : d) {
      const double a = CpuSeconds();
      x = CpuSeconds() - a;
    }
    std::nth_element(d.begin(), d.begin() + 100, d.end());
    return d[100];
  }();
  return floor;
}

ScopedCost::ScopedCost(OverheadLedger* ledger, uint32_t party, CostTag tag)
    : ledger_(ledger), party_(party), tag_(tag) {
  if (ledger_) {
    TimerFloor();
    start_ = CpuSeconds();
  }
}

ScopedCost::~ScopedCost() {
  if (!ledger_) return;
  const double dt = CpuSeconds() - start_ - TimerFloor();
  ledger_->AddSeconds(party_, tag_, std::max(0.0, dt));
}

}  // namespace vfedsec
