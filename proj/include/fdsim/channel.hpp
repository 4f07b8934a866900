#pragma once

// Deterministic uplink/downlink budget model. Payloads at or below the
// per-round byte budget are delivered at payload/rate latency; anything
// larger consumes the whole round with no delivery.

#include <cstdint>
#include <string>

namespace fdsim {

enum class Direction { kUp, kDown };

struct LinkBudget {
  std::uint64_t uplink_bytes_per_round = 0;
  std::uint64_t downlink_bytes_per_round = 0;
  double uplink_rate = 0.0;    // bytes per second
  double downlink_rate = 0.0;  // bytes per second
};

void validate(const LinkBudget& budget);

struct TransmitOutcome {
  bool delivered = false;
  double latency_seconds = 0.0;
};

TransmitOutcome transmit(const LinkBudget& budget, Direction direction,
                         std::uint64_t payload_bytes);

// up = down = 64 KiB per one-second round.
LinkBudget symmetric_preset();
// up = 1 KiB, down = 64 KiB per one-second round.
LinkBudget asymmetric_preset();

LinkBudget preset_by_name(const std::string& name);

}  // namespace fdsim
