#pragma once

// Federated distillation round orchestration: per-worker local training with
// the distillation regularizer, per-label logit accumulation, server-side
// leave-one-out ensembling, the FedAvg baseline, and payload accounting.

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "fdsim/channel.hpp"
#include "fdsim/data.hpp"
#include "fdsim/nn.hpp"
#include "fdsim/rng.hpp"

namespace fdsim {

// Per-label accumulated logit vectors and visit counts for one worker/round.
struct LogitTable {
  std::vector<std::vector<double>> sums;  // label_count x logit_dim
  std::vector<std::int64_t> counts;       // per label
  int round = 0;

  LogitTable() = default;
  LogitTable(int label_count, int logit_dim);

  int label_count() const { return static_cast<int>(counts.size()); }
  int logit_dim() const {
    return sums.empty() ? 0 : static_cast<int>(sums[0].size());
  }
  void accumulate(int label, std::span<const double> logit);
  // F-bar for one label: sums/count, or nullopt when the label was not seen.
  std::optional<std::vector<double>> average(int label) const;
};

// Per-worker distillation targets F-hat; nullopt where no target is defined.
using LabelTargets = std::vector<std::optional<std::vector<double>>>;

struct GlobalLogitView {
  std::vector<LabelTargets> per_worker_targets;
  int round = 0;
};

struct WorkerRoundStats {
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  std::uint64_t uplink_bytes = 0;
  std::uint64_t downlink_bytes = 0;
  bool uplink_delivered = true;
  bool downlink_delivered = true;
};

struct RoundReport {
  int round = 0;
  std::vector<WorkerRoundStats> workers;
};

struct TrainOptions {
  int steps = 25;   // k batches per round
  int batch = 20;   // samples per batch (per-sample updates inside)
  double eta = 0.05;
  double lambda = 1.0;
  LossKind supervised = LossKind::cross_entropy();
  LossKind distill = LossKind::cross_entropy();
  LogitSource logit_source = LogitSource::kOutput;
};

struct RunOptions {
  int rounds = 30;
  int float_width = 4;  // payload accounting: 4 or 8 bytes per float
  std::uint64_t seed = 0;
  std::optional<LinkBudget> channel;
  TrainOptions train;
};

// Algorithm-1 local phase: per-sample SGD with the combined gradient, logit
// accumulation after each step, averaged table at the end. Returns the mean
// supervised loss over the processed samples. `lambda_effective` overrides
// train.lambda (the round-1 bootstrap forces it to zero).
double local_train_phase(Mlp& model, const LabeledDataset& shard,
                         const LabelTargets& targets, const TrainOptions& train,
                         double lambda_effective, SplitRng batch_rng,
                         LogitTable* table);

// Leave-one-out ensembling. A worker's target for a label is the mean of the
// other contributing workers' averages; labels nobody else visited stay
// undefined. Workers that failed to upload contribute an all-zero table.
GlobalLogitView global_ensemble(const std::vector<LogitTable>& tables);

// Fraction of test samples whose argmax prediction matches the label.
double evaluate_accuracy(const Mlp& model, const LabeledDataset& test);

std::vector<RoundReport> run_fd(std::vector<Mlp>& workers,
                                const std::vector<LabeledDataset>& shards,
                                const LabeledDataset& test, const RunOptions& options);

std::vector<RoundReport> run_fl(std::vector<Mlp>& workers,
                                const std::vector<LabeledDataset>& shards,
                                const LabeledDataset& test, const RunOptions& options);

enum class Scheme { kFd, kFl };

// (uplink, downlink) bytes per worker per round. FD moves |Y| x d_logit
// floats each way; FL moves the full parameter vector.
std::pair<std::uint64_t, std::uint64_t> payload_bytes(Scheme scheme, const Mlp& model,
                                                      int label_count, int logit_dim,
                                                      int float_width);

}  // namespace fdsim
