#include "fdsim/frd.hpp"

#include <algorithm>
#include <cmath>
#include <future>

#include "fdsim/errors.hpp"

namespace fdsim {

CartPoleEnv::CartPoleEnv(CartPoleParams params) : params_(params) {}

State CartPoleEnv::reset(SplitRng& rng) {
  for (double& v : state_) v = rng.uniform(-0.05, 0.05);
  done_ = false;
  steps_ = 0;
  return state_;
}

CartPoleEnv::StepResult CartPoleEnv::step(int action) {
  if (done_) throw ValidationError("cannot step a finished episode");
  if (action != 0 && action != 1) throw ValidationError("action must be 0 or 1");

  const double force = action == 1 ? params_.force_mag : -params_.force_mag;
  double x = state_[0], x_dot = state_[1], theta = state_[2], theta_dot = state_[3];
  const double cos_t = std::cos(theta);
  const double sin_t = std::sin(theta);
  const double total_mass = params_.cart_mass + params_.pole_mass;
  const double pole_mass_length = params_.pole_mass * params_.half_length;

  const double temp =
      (force + pole_mass_length * theta_dot * theta_dot * sin_t) / total_mass;
  const double theta_acc =
      (params_.gravity * sin_t - cos_t * temp) /
      (params_.half_length *
       (4.0 / 3.0 - params_.pole_mass * cos_t * cos_t / total_mass));
  const double x_acc = temp - pole_mass_length * theta_acc * cos_t / total_mass;

  // Semi-implicit Euler: velocities first, positions with the new velocities.
  x_dot += params_.tau * x_acc;
  x += params_.tau * x_dot;
  theta_dot += params_.tau * theta_acc;
  theta += params_.tau * theta_dot;

  state_ = {x, x_dot, theta, theta_dot};
  ++steps_;
  done_ = std::abs(x) > params_.x_threshold ||
          std::abs(theta) > params_.theta_threshold || steps_ >= params_.max_steps;
  return {state_, 1.0, done_};
}

ClusterConfig ClusterConfig::standard(int subspaces) {
  if (subspaces <= 0) throw ValidationError("subspace count must be positive");
  ClusterConfig cfg;
  cfg.subspaces = subspaces;
  const double angle = 2.0 * 12.0 * 3.14159265358979323846 / 180.0;
  cfg.ranges = {{{-2.4, 2.4}, {-3.0, 3.0}, {-angle, angle}, {-3.5, 3.5}}};
  return cfg;
}

ClusterResult cluster_state(const ClusterConfig& config, const State& state) {
  const int s = config.subspaces;
  ClusterResult out;
  for (int d = 0; d < 4; ++d) {
    const auto [lo, hi] = config.ranges[d];
    const double width = (hi - lo) / s;
    const double v = std::clamp(state[d], lo, hi);
    // Half-open bins: a boundary value belongs to the upper bin.
    int bin = static_cast<int>(std::floor((v - lo) / width));
    bin = std::clamp(bin, 0, s - 1);
    out.id = out.id * s + bin;
    out.representative[d] = lo + (bin + 0.5) * width;
  }
  return out;
}

std::int64_t cluster_count(const ClusterConfig& config) {
  const std::int64_t s = config.subspaces;
  return s * s * s * s;
}

std::vector<double> ProxyExperienceMemory::average_policy(std::int64_t id) const {
  const Entry& entry = entries.at(id);
  std::vector<double> avg = entry.policy_sum;
  for (double& v : avg) v /= static_cast<double>(entry.visits);
  return avg;
}

ProxyExperienceMemory build_proxy_memory(const RawExperienceMemory& raw,
                                         const ClusterConfig& config) {
  ProxyExperienceMemory memory;
  memory.config = config;
  for (const auto& record : raw.records) {
    const std::int64_t id = cluster_state(config, record.state).id;
    auto [it, inserted] = memory.entries.try_emplace(id);
    if (inserted) it->second.policy_sum.assign(record.policy.size(), 0.0);
    if (it->second.policy_sum.size() != record.policy.size())
      throw ValidationError("proxy memory policies have mismatched dimensions");
    for (std::size_t i = 0; i < record.policy.size(); ++i)
      it->second.policy_sum[i] += record.policy[i];
    ++it->second.visits;
  }
  return memory;
}

ProxyExperienceMemory merge_global(const std::vector<ProxyExperienceMemory>& memories,
                                   bool visit_weighted) {
  if (memories.empty()) throw ValidationError("cannot merge zero proxy memories");
  for (const auto& m : memories)
    if (!(m.config == memories.front().config))
      throw ValidationError("proxy memories have mismatched cluster configs");

  ProxyExperienceMemory merged;
  merged.config = memories.front().config;
  for (const auto& memory : memories) {
    for (const auto& [id, entry] : memory.entries) {
      auto [it, inserted] = merged.entries.try_emplace(id);
      if (inserted) it->second.policy_sum.assign(entry.policy_sum.size(), 0.0);
      if (visit_weighted) {
        for (std::size_t i = 0; i < entry.policy_sum.size(); ++i)
          it->second.policy_sum[i] += entry.policy_sum[i];
        it->second.visits += entry.visits;
      } else {
        // Unweighted mean of the local average policies: sum the averages and
        // count contributing agents.
        for (std::size_t i = 0; i < entry.policy_sum.size(); ++i)
          it->second.policy_sum[i] +=
              entry.policy_sum[i] / static_cast<double>(entry.visits);
        it->second.visits += 1;
      }
    }
  }
  return merged;
}

double advantage(const A2cAgent& agent, const State& s, double reward,
                 const State& s_next, bool done) {
  const double value = agent.critic.forward(s).prediction[0];
  const double next_value = done ? 0.0 : agent.critic.forward(s_next).prediction[0];
  return reward + agent.discount * next_value * (done ? 0.0 : 1.0) - value;
}

void a2c_update(A2cAgent& agent, const std::vector<TrajectoryStep>& trajectory,
                double eta_actor, double eta_critic) {
  if (trajectory.empty()) throw ValidationError("cannot update from an empty trajectory");
  std::vector<double> actor_grad(agent.actor.param_count(), 0.0);
  std::vector<double> critic_grad(agent.critic.param_count(), 0.0);
  const int actions = agent.actor.output_dim();

  for (const auto& step : trajectory) {
    const double value = agent.critic.forward(step.state).prediction[0];
    const double next_value =
        step.done ? 0.0 : agent.critic.forward(step.next_state).prediction[0];
    const double target = step.reward + agent.discount * next_value;
    const double adv = target - value;

    // Actor: d/dlogits of -adv * log pi(a|s) = adv * (softmax - onehot(a)).
    std::vector<double> logits = agent.actor.forward(step.state).prediction;
    std::vector<double> policy = softmax(logits);
    std::vector<double> head(actions);
    for (int a = 0; a < actions; ++a)
      head[a] = adv * (policy[a] - (a == step.action ? 1.0 : 0.0));
    const std::vector<double> ag =
        backward_from_gradients(agent.actor, step.state, head, {});
    for (std::size_t i = 0; i < actor_grad.size(); ++i) actor_grad[i] += ag[i];

    // Critic: d/dV of (V - target)^2 with the bootstrap target frozen.
    const std::vector<double> ch = {2.0 * (value - target)};
    const std::vector<double> cg =
        backward_from_gradients(agent.critic, step.state, ch, {});
    for (std::size_t i = 0; i < critic_grad.size(); ++i) critic_grad[i] += cg[i];
  }

  const double inv = 1.0 / static_cast<double>(trajectory.size());
  for (double& g : actor_grad) g *= inv;
  for (double& g : critic_grad) g *= inv;
  sgd_step(agent.actor, actor_grad, eta_actor);
  sgd_step(agent.critic, critic_grad, eta_critic);
}

namespace {

std::pair<double, std::vector<double>> distill_on_pairs(
    const A2cAgent& agent,
    const std::vector<std::pair<State, std::vector<double>>>& pairs) {
  if (pairs.empty()) throw ValidationError("cannot distill from an empty memory");
  double total = 0.0;
  std::vector<double> grad(agent.actor.param_count(), 0.0);
  const LossKind ce = LossKind::cross_entropy();
  for (const auto& [state, target] : pairs) {
    const std::vector<double> logits = agent.actor.forward(state).prediction;
    total += loss(ce, logits, target);
    const std::vector<double> head = loss_gradient(ce, logits, target);
    const std::vector<double> g = backward_from_gradients(agent.actor, state, head, {});
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
  }
  return {total, std::move(grad)};
}

}  // namespace

std::pair<double, std::vector<double>> distill_loss(const A2cAgent& agent,
                                                    const RawExperienceMemory& memory) {
  std::vector<std::pair<State, std::vector<double>>> pairs;
  pairs.reserve(memory.records.size());
  for (const auto& r : memory.records) pairs.emplace_back(r.state, r.policy);
  return distill_on_pairs(agent, pairs);
}

std::pair<double, std::vector<double>> distill_loss(
    const A2cAgent& agent, const ProxyExperienceMemory& memory) {
  std::vector<std::pair<State, std::vector<double>>> pairs;
  pairs.reserve(memory.entries.size());
  for (const auto& [id, entry] : memory.entries) {
    ClusterResult repr{};
    // Decode the mixed-radix id back into bin midpoints.
    std::int64_t rest = id;
    const int s = memory.config.subspaces;
    std::array<int, 4> bins{};
    for (int d = 3; d >= 0; --d) {
      bins[d] = static_cast<int>(rest % s);
      rest /= s;
    }
    State state{};
    for (int d = 0; d < 4; ++d) {
      const auto [lo, hi] = memory.config.ranges[d];
      const double width = (hi - lo) / s;
      state[d] = lo + (bins[d] + 0.5) * width;
    }
    (void)repr;
    pairs.emplace_back(state, memory.average_policy(id));
  }
  return distill_on_pairs(agent, pairs);
}

DrlScheme drl_scheme_from_string(const std::string& name) {
  if (name == "pd") return DrlScheme::kPd;
  if (name == "frd") return DrlScheme::kFrd;
  if (name == "frl") return DrlScheme::kFrl;
  throw ValidationError("unknown DRL scheme: " + name);
}

std::uint64_t pd_record_bytes(int action_count, int float_width) {
  return static_cast<std::uint64_t>(4 + action_count) * float_width;
}

std::uint64_t frd_entry_bytes(int action_count, int float_width) {
  return static_cast<std::uint64_t>(action_count + 1) * float_width;
}

namespace {

struct AgentBlockResult {
  std::vector<double> scores;
  RawExperienceMemory memory;
};

int sample_action(const std::vector<double>& policy, SplitRng& rng) {
  const double u = rng.uniform();
  double cumulative = 0.0;
  for (std::size_t a = 0; a < policy.size(); ++a) {
    cumulative += policy[a];
    if (u < cumulative) return static_cast<int>(a);
  }
  return static_cast<int>(policy.size()) - 1;
}

AgentBlockResult run_episode_block(A2cAgent& agent, int agent_index,
                                   int first_episode, int last_episode,
                                   bool record_memory, const DrlOptions& options) {
  AgentBlockResult result;
  SplitRng master(options.seed);
  for (int episode = first_episode; episode < last_episode; ++episode) {
    SplitRng env_rng = master.child("env", agent_index, episode);
    SplitRng act_rng = master.child("act", agent_index, episode);
    CartPoleEnv env;
    State state = env.reset(env_rng);
    std::vector<TrajectoryStep> trajectory;
    double score = 0.0;
    while (!env.done()) {
      const std::vector<double> policy =
          softmax(agent.actor.forward(state).prediction);
      const int action = sample_action(policy, act_rng);
      if (record_memory) result.memory.records.push_back({state, policy});
      const auto step = env.step(action);
      trajectory.push_back({state, action, step.reward, step.state, step.done});
      score += step.reward;
      state = step.state;
    }
    a2c_update(agent, trajectory, options.eta_actor, options.eta_critic);
    result.scores.push_back(score);
  }
  return result;
}

double rolling_mean(const std::vector<double>& scores, int window) {
  if (scores.empty()) return 0.0;
  const std::size_t take = std::min<std::size_t>(window, scores.size());
  double sum = 0.0;
  for (std::size_t i = scores.size() - take; i < scores.size(); ++i) sum += scores[i];
  return sum / static_cast<double>(take);
}

}  // namespace

DrlRunResult run_drl(DrlScheme scheme, const DrlOptions& options) {
  if (options.agents < 1) throw ValidationError("need at least one agent");
  if (options.exchange_interval <= 0)
    throw ValidationError("exchange interval must be positive");
  if (options.episodes < 0) throw ValidationError("episode count must be non-negative");
  if (options.float_width != 4 && options.float_width != 8)
    throw ValidationError("float width must be 4 or 8");

  SplitRng master(options.seed);
  std::vector<A2cAgent> agents;
  for (int c = 0; c < options.agents; ++c) {
    std::vector<int> actor_dims = {4};
    actor_dims.insert(actor_dims.end(), options.actor_hidden.begin(),
                      options.actor_hidden.end());
    actor_dims.push_back(2);
    std::vector<int> critic_dims = {4};
    critic_dims.insert(critic_dims.end(), options.critic_hidden.begin(),
                       options.critic_hidden.end());
    critic_dims.push_back(1);
    std::vector<Activation> actor_acts(actor_dims.size() - 2, Activation::kTanh);
    std::vector<Activation> critic_acts(critic_dims.size() - 2, Activation::kTanh);
    agents.push_back(
        {Mlp(actor_dims, actor_acts, master.child("actor", c).next_u64()),
         Mlp(critic_dims, critic_acts, master.child("critic", c).next_u64()),
         options.discount});
  }

  const ClusterConfig cluster_config = ClusterConfig::standard(options.subspaces);
  const bool record_memory = scheme != DrlScheme::kFrl;
  const int action_count = 2;

  DrlRunResult result;
  result.episode_scores.assign(options.agents, {});

  int exchange_index = 0;
  for (int block_start = 0; block_start < options.episodes;
       block_start += options.exchange_interval) {
    const int block_end =
        std::min(block_start + options.exchange_interval, options.episodes);

    std::vector<AgentBlockResult> blocks(options.agents);
    {
      std::vector<std::future<AgentBlockResult>> jobs;
      for (int c = 0; c < options.agents; ++c) {
        jobs.push_back(std::async(std::launch::async, [&, c] {
          return run_episode_block(agents[c], c, block_start, block_end,
                                   record_memory, options);
        }));
      }
      for (int c = 0; c < options.agents; ++c) blocks[c] = jobs[c].get();
    }
    for (int c = 0; c < options.agents; ++c)
      result.episode_scores[c].insert(result.episode_scores[c].end(),
                                      blocks[c].scores.begin(),
                                      blocks[c].scores.end());

    ExchangeReport report;
    report.exchange = ++exchange_index;
    report.episodes_completed = block_end;
    report.rolling_score.resize(options.agents);
    report.uplink_bytes.assign(options.agents, 0);
    report.downlink_bytes.assign(options.agents, 0);

    if (scheme == DrlScheme::kPd) {
      RawExperienceMemory global;
      for (int c = 0; c < options.agents; ++c) {
        report.uplink_bytes[c] = blocks[c].memory.records.size() *
                                 pd_record_bytes(action_count, options.float_width);
        global.records.insert(global.records.end(), blocks[c].memory.records.begin(),
                              blocks[c].memory.records.end());
      }
      const std::uint64_t down =
          global.records.size() * pd_record_bytes(action_count, options.float_width);
      for (int c = 0; c < options.agents; ++c) {
        report.downlink_bytes[c] = down;
        if (!global.records.empty()) {
          const double scale =
              options.distill_eta / static_cast<double>(global.records.size());
          for (int it = 0; it < options.distill_steps; ++it) {
            auto [value, grad] = distill_loss(agents[c], global);
            (void)value;
            sgd_step(agents[c].actor, grad, scale);
          }
        }
      }
    } else if (scheme == DrlScheme::kFrd) {
      std::vector<ProxyExperienceMemory> proxies;
      for (int c = 0; c < options.agents; ++c) {
        proxies.push_back(build_proxy_memory(blocks[c].memory, cluster_config));
        report.uplink_bytes[c] = proxies.back().entries.size() *
                                 frd_entry_bytes(action_count, options.float_width);
      }
      const ProxyExperienceMemory global = merge_global(proxies);
      const std::uint64_t down =
          global.entries.size() * frd_entry_bytes(action_count, options.float_width);
      for (int c = 0; c < options.agents; ++c) {
        report.downlink_bytes[c] = down;
        if (!global.entries.empty()) {
          const double scale =
              options.distill_eta / static_cast<double>(global.entries.size());
          for (int it = 0; it < options.distill_steps; ++it) {
            auto [value, grad] = distill_loss(agents[c], global);
            (void)value;
            sgd_step(agents[c].actor, grad, scale);
          }
        }
      }
    } else {  // FRL: average the actor parameters only.
      std::vector<Mlp> actors;
      for (const auto& agent : agents) actors.push_back(agent.actor);
      const Mlp global = fedavg(actors);
      const std::uint64_t bytes = global.param_count() * options.float_width;
      for (int c = 0; c < options.agents; ++c) {
        report.uplink_bytes[c] = bytes;
        report.downlink_bytes[c] = bytes;
        agents[c].actor = global;
      }
    }

    bool mission = false;
    for (int c = 0; c < options.agents; ++c) {
      report.rolling_score[c] =
          rolling_mean(result.episode_scores[c], options.rolling_window);
      const auto& scores = result.episode_scores[c];
      if (static_cast<int>(scores.size()) >= options.mission_window &&
          rolling_mean(scores, options.mission_window) >= options.mission_score)
        mission = true;
    }
    report.mission_complete = mission;
    result.exchanges.push_back(std::move(report));
    if (mission) {
      result.mission_complete = true;
      break;
    }
  }
  return result;
}

}  // namespace fdsim
