#include "fdsim/channel.hpp"

#include "fdsim/errors.hpp"

namespace fdsim {

void validate(const LinkBudget& budget) {
  if (budget.uplink_bytes_per_round == 0 || budget.downlink_bytes_per_round == 0)
    throw ValidationError("link budgets must be positive");
  if (budget.uplink_rate <= 0.0 || budget.downlink_rate <= 0.0)
    throw ValidationError("link rates must be positive");
}

TransmitOutcome transmit(const LinkBudget& budget, Direction direction,
                         std::uint64_t payload_bytes) {
  validate(budget);
  const std::uint64_t cap = direction == Direction::kUp
                                ? budget.uplink_bytes_per_round
                                : budget.downlink_bytes_per_round;
  const double rate =
      direction == Direction::kUp ? budget.uplink_rate : budget.downlink_rate;
  if (payload_bytes <= cap)
    return {true, static_cast<double>(payload_bytes) / rate};
  // Failed transmissions burn the whole round.
  return {false, static_cast<double>(cap) / rate};
}

LinkBudget symmetric_preset() {
  return {64 * 1024, 64 * 1024, 64.0 * 1024, 64.0 * 1024};
}

LinkBudget asymmetric_preset() {
  return {1024, 64 * 1024, 1024.0, 64.0 * 1024};
}

LinkBudget preset_by_name(const std::string& name) {
  if (name == "symmetric") return symmetric_preset();
  if (name == "asymmetric") return asymmetric_preset();
  throw ValidationError("unknown channel preset: " + name);
}

}  // namespace fdsim
