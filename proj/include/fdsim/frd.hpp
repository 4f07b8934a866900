#pragma once

// Federated reinforcement distillation: a CartPole environment, A2C agents,
// raw and proxy experience memories, and the PD / FRD / FRL exchange
// protocols with communication accounting.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "fdsim/nn.hpp"
#include "fdsim/rng.hpp"

namespace fdsim {

using State = std::array<double, 4>;  // position, velocity, angle, angular velocity

struct CartPoleParams {
  double gravity = 9.8;
  double cart_mass = 1.0;
  double pole_mass = 0.1;
  double half_length = 0.5;
  double force_mag = 10.0;
  double tau = 0.02;
  double x_threshold = 2.4;
  double theta_threshold = 12.0 * 3.14159265358979323846 / 180.0;
  int max_steps = 500;
};

class CartPoleEnv {
 public:
  explicit CartPoleEnv(CartPoleParams params = {});

  // Uniform(-0.05, 0.05) start, per the usual convention.
  State reset(SplitRng& rng);

  struct StepResult {
    State state{};
    double reward = 0.0;
    bool done = false;
  };
  // Semi-implicit Euler step of the standard dynamics; +1 reward per step.
  StepResult step(int action);

  const State& state() const { return state_; }
  bool done() const { return done_; }
  int steps() const { return steps_; }
  const CartPoleParams& params() const { return params_; }

 private:
  CartPoleParams params_;
  State state_{};
  bool done_ = true;
  int steps_ = 0;
};

// Even subdivision of each state dimension into `subspaces` half-open bins,
// clamped at the range edges.
struct ClusterConfig {
  int subspaces = 30;
  std::array<std::pair<double, double>, 4> ranges;

  // position +/-2.4, velocity +/-3, angle +/-24 degrees, angular velocity +/-3.5
  static ClusterConfig standard(int subspaces);
  bool operator==(const ClusterConfig& other) const = default;
};

struct ClusterResult {
  std::int64_t id = 0;
  State representative{};  // per-dimension bin midpoints
};

ClusterResult cluster_state(const ClusterConfig& config, const State& state);
std::int64_t cluster_count(const ClusterConfig& config);  // subspaces^4

struct RawExperienceMemory {
  struct Record {
    State state{};
    std::vector<double> policy;
  };
  std::vector<Record> records;
};

struct ProxyExperienceMemory {
  struct Entry {
    std::vector<double> policy_sum;
    std::int64_t visits = 0;
  };
  ClusterConfig config;
  std::map<std::int64_t, Entry> entries;

  std::vector<double> average_policy(std::int64_t id) const;
};

ProxyExperienceMemory build_proxy_memory(const RawExperienceMemory& raw,
                                         const ClusterConfig& config);

// Per-cluster average of the local average policies (unweighted by default;
// `visit_weighted` weights by visit counts instead).
ProxyExperienceMemory merge_global(const std::vector<ProxyExperienceMemory>& memories,
                                   bool visit_weighted = false);

struct A2cAgent {
  Mlp actor;   // state -> action logits
  Mlp critic;  // state -> scalar value
  double discount = 0.99;
};

// r + discount * V(s') * (1 - done) - V(s)
double advantage(const A2cAgent& agent, const State& s, double reward,
                 const State& s_next, bool done);

struct TrajectoryStep {
  State state{};
  int action = 0;
  double reward = 0.0;
  State next_state{};
  bool done = false;
};

// One batched update from a finished episode: the actor ascends
// advantage-weighted log-likelihood, the critic descends the squared TD
// error against frozen bootstrap targets. Gradients are averaged over steps.
void a2c_update(A2cAgent& agent, const std::vector<TrajectoryStep>& trajectory,
                double eta_actor, double eta_critic);

// Cross entropy between the stored target policies and the actor's policy,
// evaluated on raw states (PD) or proxy representatives (FRD). Returns the
// loss and its gradient w.r.t. the actor weights.
std::pair<double, std::vector<double>> distill_loss(const A2cAgent& agent,
                                                    const RawExperienceMemory& memory);
std::pair<double, std::vector<double>> distill_loss(
    const A2cAgent& agent, const ProxyExperienceMemory& memory);

enum class DrlScheme { kPd, kFrd, kFrl };

DrlScheme drl_scheme_from_string(const std::string& name);

struct DrlOptions {
  int agents = 2;
  int episodes = 500;          // total per agent
  int exchange_interval = 25;  // episodes between exchanges
  int subspaces = 30;          // S (FRD clustering)
  double eta_actor = 0.02;
  double eta_critic = 0.05;
  double discount = 0.99;
  int distill_steps = 40;
  double distill_eta = 0.05;
  double mission_score = 490.0;
  int mission_window = 10;
  int rolling_window = 100;
  int float_width = 4;
  std::uint64_t seed = 0;
  std::vector<int> actor_hidden = {32};
  std::vector<int> critic_hidden = {32};
};

struct ExchangeReport {
  int exchange = 0;
  int episodes_completed = 0;
  std::vector<double> rolling_score;        // per agent
  std::vector<std::uint64_t> uplink_bytes;  // per agent
  std::vector<std::uint64_t> downlink_bytes;
  bool mission_complete = false;
};

struct DrlRunResult {
  std::vector<ExchangeReport> exchanges;
  std::vector<std::vector<double>> episode_scores;  // per agent
  bool mission_complete = false;
};

DrlRunResult run_drl(DrlScheme scheme, const DrlOptions& options);

// Payload accounting shared with the acceptance checks. PD records carry the
// raw state plus the policy; FRD entries carry the policy plus one slot for
// the cluster id; FRL moves the actor parameter vector.
std::uint64_t pd_record_bytes(int action_count, int float_width);
std::uint64_t frd_entry_bytes(int action_count, int float_width);

}  // namespace fdsim
