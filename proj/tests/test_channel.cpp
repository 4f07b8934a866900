#include "doctest.h"
#include "fdsim/channel.hpp"
#include "fdsim/errors.hpp"

using namespace fdsim;

TEST_CASE("zero payloads deliver instantly") {
  const auto outcome = transmit(symmetric_preset(), Direction::kUp, 0);
  CHECK(outcome.delivered);
  CHECK(outcome.latency_seconds == 0.0);
}

TEST_CASE("a payload exactly at the budget is delivered") {
  const LinkBudget budget = asymmetric_preset();
  const auto outcome = transmit(budget, Direction::kUp, budget.uplink_bytes_per_round);
  CHECK(outcome.delivered);
  CHECK(outcome.latency_seconds == doctest::Approx(1.0));
  const auto over =
      transmit(budget, Direction::kUp, budget.uplink_bytes_per_round + 1);
  CHECK_FALSE(over.delivered);
  CHECK(over.latency_seconds == doctest::Approx(1.0));  // the round is burned
}

TEST_CASE("the asymmetric preset drops FL uploads but passes FD uploads") {
  const LinkBudget budget = asymmetric_preset();
  // 12,544-parameter reference model at f32 vs a 10x10 f32 logit table.
  CHECK_FALSE(transmit(budget, Direction::kUp, 12544u * 4).delivered);
  CHECK(transmit(budget, Direction::kUp, 10u * 10 * 4).delivered);
  // The downlink is wide enough for the model.
  CHECK(transmit(budget, Direction::kDown, 12544u * 4).delivered);
}

TEST_CASE("delivery is monotone in the payload size") {
  const LinkBudget budget = asymmetric_preset();
  bool previous = true;
  for (std::uint64_t payload = 0; payload <= 3000; payload += 100) {
    const bool delivered = transmit(budget, Direction::kUp, payload).delivered;
    if (!previous) CHECK_FALSE(delivered);
    previous = delivered;
  }
}

TEST_CASE("presets resolve by name and reject unknowns") {
  CHECK(preset_by_name("symmetric").uplink_bytes_per_round ==
        preset_by_name("symmetric").downlink_bytes_per_round);
  const auto asym = preset_by_name("asymmetric");
  CHECK(asym.uplink_bytes_per_round < asym.downlink_bytes_per_round);
  CHECK_THROWS_AS((void)preset_by_name("fast"), ValidationError);
}

TEST_CASE("invalid budgets are rejected") {
  LinkBudget budget;
  CHECK_THROWS_AS(validate(budget), ValidationError);
  budget = symmetric_preset();
  budget.uplink_rate = 0.0;
  CHECK_THROWS_AS(validate(budget), ValidationError);
}
