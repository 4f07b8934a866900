#include "fdsim/fd.hpp"

#include <algorithm>
#include <future>

#include "fdsim/errors.hpp"

namespace fdsim {

LogitTable::LogitTable(int label_count, int logit_dim)
    : sums(label_count, std::vector<double>(logit_dim, 0.0)),
      counts(label_count, 0) {}

void LogitTable::accumulate(int label, std::span<const double> logit) {
  if (label < 0 || label >= label_count())
    throw ValidationError("logit table label out of range");
  if (static_cast<int>(logit.size()) != logit_dim())
    throw ValidationError("logit dimension does not match table");
  auto& row = sums[label];
  for (std::size_t i = 0; i < logit.size(); ++i) row[i] += logit[i];
  ++counts[label];
}

std::optional<std::vector<double>> LogitTable::average(int label) const {
  if (label < 0 || label >= label_count())
    throw ValidationError("logit table label out of range");
  if (counts[label] == 0) return std::nullopt;
  std::vector<double> avg = sums[label];
  const double inv = 1.0 / static_cast<double>(counts[label]);
  for (double& v : avg) v *= inv;
  return avg;
}

double local_train_phase(Mlp& model, const LabeledDataset& shard,
                         const LabelTargets& targets, const TrainOptions& train,
                         double lambda_effective, SplitRng batch_rng,
                         LogitTable* table) {
  if (shard.samples.empty()) throw ValidationError("cannot train on an empty shard");
  if (static_cast<int>(targets.size()) != shard.label_count &&
      !targets.empty())
    throw ValidationError("target table size does not match label count");
  const int label_count = shard.label_count;
  const auto kinds = std::make_pair(train.supervised, train.distill);

  double loss_sum = 0.0;
  long processed = 0;
  for (int step = 0; step < train.steps; ++step) {
    for (int b = 0; b < train.batch; ++b) {
      const std::size_t idx =
          static_cast<std::size_t>(batch_rng.next_below(shard.samples.size()));
      const auto& x = shard.samples[idx];
      const int y = shard.labels[idx];
      const std::vector<double> target = one_hot(y, label_count);

      std::optional<LogitVector> teacher;
      double lam = 0.0;
      if (lambda_effective > 0.0 && !targets.empty() && targets[y].has_value()) {
        teacher = targets[y];
        lam = lambda_effective;
      }

      loss_sum += loss(train.supervised, model.forward(x).prediction, target);
      ++processed;

      const std::vector<double> grad =
          backward(model, x, target, teacher, lam, kinds, train.logit_source);
      sgd_step(model, grad, train.eta);

      // Algorithm-1 line order: the gradient step precedes accumulation, so
      // the stored logit is the model's output after the update.
      if (table != nullptr) {
        ForwardResult fwd = model.forward(x);
        table->accumulate(y, train.logit_source == LogitSource::kOutput
                                 ? fwd.prediction
                                 : fwd.hidden_logits);
      }
    }
  }
  return processed > 0 ? loss_sum / static_cast<double>(processed) : 0.0;
}

GlobalLogitView global_ensemble(const std::vector<LogitTable>& tables) {
  if (tables.size() < 2)
    throw ValidationError("global ensembling needs at least two workers");
  const int label_count = tables.front().label_count();
  const int dim = tables.front().logit_dim();
  for (const auto& t : tables)
    if (t.label_count() != label_count || t.logit_dim() != dim)
      throw ValidationError("logit tables have mismatched dimensions");

  GlobalLogitView view;
  view.round = tables.front().round;
  view.per_worker_targets.assign(tables.size(), LabelTargets(label_count));

  for (int label = 0; label < label_count; ++label) {
    std::vector<std::optional<std::vector<double>>> averages(tables.size());
    std::vector<double> total(dim, 0.0);
    int contributors = 0;
    for (std::size_t c = 0; c < tables.size(); ++c) {
      averages[c] = tables[c].average(label);
      if (averages[c]) {
        ++contributors;
        for (int i = 0; i < dim; ++i) total[i] += (*averages[c])[i];
      }
    }
    for (std::size_t c = 0; c < tables.size(); ++c) {
      const int others = contributors - (averages[c] ? 1 : 0);
      if (others < 1) continue;  // nobody else visited this label
      std::vector<double> target(dim);
      for (int i = 0; i < dim; ++i) {
        double sum = total[i];
        if (averages[c]) sum -= (*averages[c])[i];
        target[i] = sum / static_cast<double>(others);
      }
      view.per_worker_targets[c][label] = std::move(target);
    }
  }
  return view;
}

double evaluate_accuracy(const Mlp& model, const LabeledDataset& test) {
  if (test.samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < test.samples.size(); ++i) {
    const std::vector<double> pred = model.forward(test.samples[i]).prediction;
    const std::size_t argmax =
        std::max_element(pred.begin(), pred.end()) - pred.begin();
    hits += static_cast<int>(argmax) == test.labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(test.samples.size());
}

std::pair<std::uint64_t, std::uint64_t> payload_bytes(Scheme scheme, const Mlp& model,
                                                      int label_count, int logit_dim,
                                                      int float_width) {
  if (float_width != 4 && float_width != 8)
    throw ValidationError("float width must be 4 or 8");
  if (scheme == Scheme::kFd) {
    const std::uint64_t bytes = static_cast<std::uint64_t>(label_count) *
                                static_cast<std::uint64_t>(logit_dim) * float_width;
    return {bytes, bytes};
  }
  const std::uint64_t bytes =
      static_cast<std::uint64_t>(model.param_count()) * float_width;
  return {bytes, bytes};
}

namespace {

void check_run_inputs(const std::vector<Mlp>& workers,
                      const std::vector<LabeledDataset>& shards,
                      const RunOptions& options) {
  if (workers.size() < 2) throw ValidationError("distributed runs need C >= 2 workers");
  if (shards.size() != workers.size())
    throw ValidationError("shard count does not match worker count");
  if (options.rounds < 0) throw ValidationError("round count must be non-negative");
  if (options.float_width != 4 && options.float_width != 8)
    throw ValidationError("float width must be 4 or 8");
}

}  // namespace

std::vector<RoundReport> run_fd(std::vector<Mlp>& workers,
                                const std::vector<LabeledDataset>& shards,
                                const LabeledDataset& test,
                                const RunOptions& options) {
  check_run_inputs(workers, shards, options);
  const int label_count = shards.front().label_count;
  const int logit_dim = workers.front().logit_dim(options.train.logit_source);
  const auto [up_bytes, down_bytes] =
      payload_bytes(Scheme::kFd, workers.front(), label_count, logit_dim,
                    options.float_width);

  std::vector<LabelTargets> targets(workers.size(), LabelTargets(label_count));
  SplitRng master(options.seed);
  std::vector<RoundReport> reports;

  for (int round = 1; round <= options.rounds; ++round) {
    const double lambda_eff = round == 1 ? 0.0 : options.train.lambda;
    // The batch stream is shared across workers so identically initialized
    // workers on identical shards stay in lockstep.
    SplitRng batch_rng = master.child("fd-batch", 0, round);

    std::vector<LogitTable> tables(workers.size(),
                                   LogitTable(label_count, logit_dim));
    std::vector<double> losses(workers.size(), 0.0);
    {
      std::vector<std::future<double>> jobs;
      jobs.reserve(workers.size());
      for (std::size_t c = 0; c < workers.size(); ++c) {
        tables[c].round = round;
        jobs.push_back(std::async(std::launch::async, [&, c] {
          return local_train_phase(workers[c], shards[c], targets[c],
                                   options.train, lambda_eff, batch_rng,
                                   &tables[c]);
        }));
      }
      for (std::size_t c = 0; c < workers.size(); ++c) losses[c] = jobs[c].get();
    }

    RoundReport report;
    report.round = round;
    report.workers.resize(workers.size());

    // Uplink: a dropped table is replaced by an empty one, which simply
    // removes the worker from every label's contributor set.
    std::vector<LogitTable> delivered = tables;
    for (std::size_t c = 0; c < workers.size(); ++c) {
      auto& stats = report.workers[c];
      stats.train_loss = losses[c];
      stats.uplink_bytes = up_bytes;
      stats.downlink_bytes = down_bytes;
      if (options.channel) {
        stats.uplink_delivered =
            transmit(*options.channel, Direction::kUp, up_bytes).delivered;
        if (!stats.uplink_delivered)
          delivered[c] = LogitTable(label_count, logit_dim);
      }
    }

    GlobalLogitView view = global_ensemble(delivered);
    for (std::size_t c = 0; c < workers.size(); ++c) {
      auto& stats = report.workers[c];
      if (options.channel)
        stats.downlink_delivered =
            transmit(*options.channel, Direction::kDown, down_bytes).delivered;
      if (stats.downlink_delivered) {
        // Labels nobody else visited keep the previous round's target.
        for (int label = 0; label < label_count; ++label)
          if (view.per_worker_targets[c][label])
            targets[c][label] = view.per_worker_targets[c][label];
      }
      stats.test_accuracy = evaluate_accuracy(workers[c], test);
    }
    reports.push_back(std::move(report));
  }
  return reports;
}

std::vector<RoundReport> run_fl(std::vector<Mlp>& workers,
                                const std::vector<LabeledDataset>& shards,
                                const LabeledDataset& test,
                                const RunOptions& options) {
  check_run_inputs(workers, shards, options);
  for (const Mlp& m : workers)
    if (!m.same_architecture(workers.front()))
      throw ValidationError("FL requires homogeneous worker architectures");
  const auto [up_bytes, down_bytes] =
      payload_bytes(Scheme::kFl, workers.front(), shards.front().label_count,
                    workers.front().logit_dim(options.train.logit_source),
                    options.float_width);

  SplitRng master(options.seed);
  std::vector<RoundReport> reports;
  const LabelTargets no_targets;

  for (int round = 1; round <= options.rounds; ++round) {
    SplitRng batch_rng = master.child("fl-batch", 0, round);
    std::vector<double> losses(workers.size(), 0.0);
    {
      std::vector<std::future<double>> jobs;
      jobs.reserve(workers.size());
      for (std::size_t c = 0; c < workers.size(); ++c) {
        jobs.push_back(std::async(std::launch::async, [&, c] {
          return local_train_phase(workers[c], shards[c], no_targets,
                                   options.train, 0.0, batch_rng, nullptr);
        }));
      }
      for (std::size_t c = 0; c < workers.size(); ++c) losses[c] = jobs[c].get();
    }

    RoundReport report;
    report.round = round;
    report.workers.resize(workers.size());

    std::vector<Mlp> received;
    for (std::size_t c = 0; c < workers.size(); ++c) {
      auto& stats = report.workers[c];
      stats.train_loss = losses[c];
      stats.uplink_bytes = up_bytes;
      stats.downlink_bytes = down_bytes;
      if (options.channel)
        stats.uplink_delivered =
            transmit(*options.channel, Direction::kUp, up_bytes).delivered;
      if (stats.uplink_delivered) received.push_back(workers[c]);
    }

    if (!received.empty()) {
      const Mlp global = fedavg(received);
      for (std::size_t c = 0; c < workers.size(); ++c) {
        auto& stats = report.workers[c];
        if (options.channel)
          stats.downlink_delivered =
              transmit(*options.channel, Direction::kDown, down_bytes).delivered;
        if (stats.downlink_delivered) workers[c] = global;
      }
    } else {
      for (auto& stats : report.workers) stats.downlink_delivered = false;
    }

    for (std::size_t c = 0; c < workers.size(); ++c)
      report.workers[c].test_accuracy = evaluate_accuracy(workers[c], test);
    reports.push_back(std::move(report));
  }
  return reports;
}

}  // namespace fdsim
