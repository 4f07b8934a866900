#include "fdsim/mix2fld.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <map>

#include "fdsim/errors.hpp"

namespace fdsim {

namespace {

// Gaussian elimination with partial pivoting. Returns false when a pivot
// falls below the scaled threshold (rank-deficient system).
bool solve_square(std::vector<std::vector<double>> m, std::vector<double> rhs,
                  std::vector<double>& solution) {
  const std::size_t n = m.size();
  double scale = 0.0;
  for (const auto& row : m)
    for (double v : row) scale = std::max(scale, std::abs(v));
  const double threshold = std::max(scale, 1.0) * 1e-12;

  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(m[r][col]) > std::abs(m[pivot][col])) pivot = r;
    if (std::abs(m[pivot][col]) < threshold) return false;
    std::swap(m[col], m[pivot]);
    std::swap(rhs[col], rhs[pivot]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double factor = m[r][col] / m[col][col];
      for (std::size_t c = col; c < n; ++c) m[r][c] -= factor * m[col][c];
      rhs[r] -= factor * rhs[col];
    }
  }
  solution.assign(n, 0.0);
  for (std::size_t row = n; row-- > 0;) {
    double sum = rhs[row];
    for (std::size_t c = row + 1; c < n; ++c) sum -= m[row][c] * solution[c];
    solution[row] = sum / m[row][row];
  }
  return true;
}

struct SeedPattern {
  int low_label = -1;   // smaller label index of the support
  int high_label = -1;  // larger label index
  double gamma = 0.0;   // mass on gamma_label
  int gamma_label = -1; // which support label carries the smaller mass
  bool valid = false;
};

SeedPattern recover_pattern(const MixedSample& seed) {
  SeedPattern p;
  int first = -1, second = -1;
  for (std::size_t i = 0; i < seed.soft_label.size(); ++i) {
    if (std::abs(seed.soft_label[i]) <= 1e-9) continue;
    if (first < 0) first = static_cast<int>(i);
    else if (second < 0) second = static_cast<int>(i);
    else return p;  // support larger than two labels
  }
  if (second < 0) return p;
  const double v1 = seed.soft_label[first];
  const double v2 = seed.soft_label[second];
  if (std::abs(v1 + v2 - 1.0) > 1e-9) return p;
  if (std::abs(v1 - v2) <= 1e-9) return p;  // gamma = 0.5, no orientation
  p.low_label = first;
  p.high_label = second;
  p.gamma_label = v1 < v2 ? first : second;
  p.gamma = std::min(v1, v2);
  p.valid = true;
  return p;
}

}  // namespace

MixedSample mixup(std::span<const double> x_i, std::span<const double> y_i,
                  std::span<const double> x_j, std::span<const double> y_j,
                  double gamma, int origin_worker) {
  if (!(gamma > 0.0 && gamma <= 0.5))
    throw ValidationError("mixing ratio must lie in (0, 0.5]");
  if (x_i.size() != x_j.size()) throw ValidationError("mixup covariate dims differ");
  if (y_i.size() != y_j.size()) throw ValidationError("mixup label dims differ");
  MixedSample out;
  out.covariate.resize(x_i.size());
  for (std::size_t k = 0; k < x_i.size(); ++k)
    out.covariate[k] = gamma * x_i[k] + (1.0 - gamma) * x_j[k];
  out.soft_label.resize(y_i.size());
  for (std::size_t k = 0; k < y_i.size(); ++k)
    out.soft_label[k] = gamma * y_i[k] + (1.0 - gamma) * y_j[k];
  out.gamma = gamma;
  out.origin_worker = origin_worker;
  return out;
}

double solve_inverse_ratio(double gamma, int target_label_position) {
  if (!(gamma > 0.0 && gamma < 0.5)) {
    if (gamma == 0.5)
      throw ValidationError(
          "gamma = 0.5 is singular: both soft labels coincide and the "
          "mixture system is rank-deficient");
    throw ValidationError("inverse ratio requires gamma in (0, 0.5)");
  }
  if (target_label_position == 0) return gamma / (2.0 * gamma - 1.0);
  if (target_label_position == 1) return (gamma - 1.0) / (2.0 * gamma - 1.0);
  throw ValidationError("target label position must be 0 or 1");
}

InverseMixedSample inverse_mixup(const std::vector<MixedSample>& seeds,
                                 int target_label) {
  if (seeds.size() < 2) throw ValidationError("inverse mixup needs at least two seeds");
  const std::size_t d_y = seeds.front().soft_label.size();
  const std::size_t d_x = seeds.front().covariate.size();
  std::set<int> origins;
  for (const auto& s : seeds) {
    if (s.soft_label.size() != d_y || s.covariate.size() != d_x)
      throw ValidationError("inverse mixup seeds have mismatched dimensions");
    origins.insert(s.origin_worker);
  }
  if (origins.size() < 2)
    throw ValidationError(
        "privacy rule violated: inverse mixup needs seeds from at least two "
        "distinct workers");
  if (target_label < 0 || target_label >= static_cast<int>(d_y))
    throw ValidationError("target label out of range");

  // Solve the label system A c = e_target, columns of A being the soft
  // labels: normal equations when the system is square or overdetermined,
  // the minimum-norm counterpart when there are more seeds than labels.
  const std::size_t n_s = seeds.size();
  std::vector<double> coeff;
  bool solved = false;
  if (n_s <= d_y) {
    std::vector<std::vector<double>> gram(n_s, std::vector<double>(n_s, 0.0));
    std::vector<double> rhs(n_s, 0.0);
    for (std::size_t p = 0; p < n_s; ++p) {
      for (std::size_t q = 0; q < n_s; ++q)
        for (std::size_t k = 0; k < d_y; ++k)
          gram[p][q] += seeds[p].soft_label[k] * seeds[q].soft_label[k];
      rhs[p] = seeds[p].soft_label[target_label];
    }
    solved = solve_square(std::move(gram), std::move(rhs), coeff);
  } else {
    // c = A^T z with (A A^T) z = e_target.
    std::vector<std::vector<double>> outer(d_y, std::vector<double>(d_y, 0.0));
    std::vector<double> rhs(d_y, 0.0);
    rhs[target_label] = 1.0;
    for (std::size_t i = 0; i < d_y; ++i)
      for (std::size_t j = 0; j < d_y; ++j)
        for (std::size_t p = 0; p < n_s; ++p)
          outer[i][j] += seeds[p].soft_label[i] * seeds[p].soft_label[j];
    std::vector<double> z;
    solved = solve_square(std::move(outer), std::move(rhs), z);
    if (solved) {
      coeff.assign(n_s, 0.0);
      for (std::size_t p = 0; p < n_s; ++p)
        for (std::size_t i = 0; i < d_y; ++i)
          coeff[p] += seeds[p].soft_label[i] * z[i];
    }
  }
  if (!solved)
    throw ValidationError(
        "singular mixture: the seed soft labels cannot reproduce a one-hot "
        "label (rank-deficient system)");

  // The solution must actually reconstruct the hard label.
  for (std::size_t k = 0; k < d_y; ++k) {
    double value = 0.0;
    for (std::size_t p = 0; p < n_s; ++p)
      value += coeff[p] * seeds[p].soft_label[k];
    const double want = k == static_cast<std::size_t>(target_label) ? 1.0 : 0.0;
    if (std::abs(value - want) > 1e-9)
      throw ValidationError(
          "singular mixture: no seed combination reproduces the target label");
  }

  InverseMixedSample out;
  out.hard_label = target_label;
  out.covariate.assign(d_x, 0.0);
  for (std::size_t p = 0; p < n_s; ++p) {
    for (std::size_t k = 0; k < d_x; ++k)
      out.covariate[k] += coeff[p] * seeds[p].covariate[k];
    out.contributing_workers.insert(seeds[p].origin_worker);
  }
  return out;
}

void output_to_model(Mlp& global_model, const std::vector<InverseMixedSample>& seeds,
                     const LabelTargets& global_targets, int iters, double eta,
                     double lambda, const std::pair<LossKind, LossKind>& kinds,
                     LogitSource source) {
  if (seeds.empty()) throw ValidationError("output-to-model needs seed samples");
  if (iters < 0) throw ValidationError("iteration count must be non-negative");
  const int label_count = static_cast<int>(global_targets.size());
  for (const auto& s : seeds) {
    if (s.hard_label < 0 || s.hard_label >= label_count)
      throw ValidationError("seed label out of target-table range");
    if (lambda > 0.0 && !global_targets[s.hard_label].has_value())
      throw ValidationError("missing global target for seed label " +
                            std::to_string(s.hard_label));
  }
  for (int k = 0; k < iters; ++k) {
    const auto& seed = seeds[static_cast<std::size_t>(k) % seeds.size()];
    const std::vector<double> target = one_hot(seed.hard_label, label_count);
    std::optional<LogitVector> teacher;
    if (lambda > 0.0) teacher = global_targets[seed.hard_label];
    const std::vector<double> grad = backward(global_model, seed.covariate, target,
                                              teacher, lambda, kinds, source);
    sgd_step(global_model, grad, eta);
  }
}

void output_to_model_soft(Mlp& global_model, const std::vector<MixedSample>& seeds,
                          const LabelTargets& global_targets, int iters, double eta,
                          double lambda, const std::pair<LossKind, LossKind>& kinds,
                          LogitSource source) {
  if (seeds.empty()) throw ValidationError("output-to-model needs seed samples");
  const int logit_dim = global_model.logit_dim(source);
  for (int k = 0; k < iters; ++k) {
    const auto& seed = seeds[static_cast<std::size_t>(k) % seeds.size()];
    // Distillation target: soft-label-weighted mixture of per-label targets.
    // Suppressed when any supporting label has no target yet.
    std::optional<LogitVector> teacher;
    double lam = 0.0;
    if (lambda > 0.0) {
      std::vector<double> mixturetarget(logit_dim, 0.0);
      bool complete = true;
      for (std::size_t l = 0; l < seed.soft_label.size(); ++l) {
        if (std::abs(seed.soft_label[l]) <= 1e-12) continue;
        if (!global_targets[l].has_value()) {
          complete = false;
          break;
        }
        for (int i = 0; i < logit_dim; ++i)
          mixturetarget[i] += seed.soft_label[l] * (*global_targets[l])[i];
      }
      if (complete) {
        teacher = std::move(mixturetarget);
        lam = lambda;
      }
    }
    const std::vector<double> grad = backward(global_model, seed.covariate,
                                              seed.soft_label, teacher, lam, kinds,
                                              source);
    sgd_step(global_model, grad, eta);
  }
}

double dp_epsilon(const DpParams& p) {
  if (p.n <= 0 || p.n_mix <= 0 || p.d_x <= 0 || p.d_y <= 0)
    throw ValidationError("dp parameters must be positive");
  if (p.sigma_x2 <= 0.0 || p.sigma_y2 <= 0.0)
    throw ValidationError("dp noise variances must be positive");
  if (!(p.delta > 0.0 && p.delta < 1.0))
    throw ValidationError("delta must lie in (0, 1)");

  const double d2 = static_cast<double>(p.d_x) / p.sigma_x2 +
                    static_cast<double>(p.d_y) / p.sigma_y2;
  const double n = static_cast<double>(p.n);
  const double n_mix = static_cast<double>(p.n_mix);
  const double log_term = std::log(1.0 / p.delta);

  const double first = 2.0 * n_mix * d2 / (8.0 * n) *
                       (1.0 + std::sqrt(4.0 * n * log_term / (d2 * n_mix)));
  const double second = std::sqrt(d2 * n_mix * log_term / (4.0 * n));
  return first + second;
}

double sample_privacy(const MixedSample& mixed, std::span<const double> x_i,
                      std::span<const double> x_j) {
  if (x_i.size() != x_j.size() || mixed.covariate.size() != x_i.size())
    throw ValidationError("sample privacy inputs have mismatched dimensions");
  bool identical = true;
  for (std::size_t k = 0; k < x_i.size(); ++k)
    if (x_i[k] != x_j[k]) {
      identical = false;
      break;
    }
  if (identical)
    throw ValidationError("sample privacy undefined: the raw samples coincide");

  double di = 0.0, dj = 0.0;
  for (std::size_t k = 0; k < x_i.size(); ++k) {
    const double a = mixed.covariate[k] - x_i[k];
    const double b = mixed.covariate[k] - x_j[k];
    di += a * a;
    dj += b * b;
  }
  const double dist = std::sqrt(std::min(di, dj));
  if (dist == 0.0)
    throw ValidationError("sample privacy undefined: zero distance to a raw sample");
  return std::log(dist);
}

std::vector<MixedSample> generate_mixup_seeds(const LabeledDataset& shard,
                                              int worker_index, int label_count,
                                              int n_mix, double gamma,
                                              std::uint64_t run_seed) {
  if (n_mix < 0) throw ValidationError("n_mix must be non-negative");
  std::vector<std::vector<std::size_t>> by_label(label_count);
  for (std::size_t i = 0; i < shard.labels.size(); ++i)
    by_label[shard.labels[i]].push_back(i);
  std::vector<int> present;
  for (int l = 0; l < label_count; ++l)
    if (!by_label[l].empty()) present.push_back(l);
  if (present.size() < 2)
    throw ValidationError("mixup needs at least two labels present in the shard");

  // The label-pair sequence is shared by all workers; odd workers reverse the
  // orientation so the server can pair mirrored soft labels across devices.
  SplitRng pair_rng = SplitRng(run_seed).child("mixup-pairs");
  SplitRng pick_rng = SplitRng(run_seed).child("mixup-picks", worker_index);

  std::vector<MixedSample> seeds;
  seeds.reserve(n_mix);
  for (int k = 0; k < n_mix; ++k) {
    int first = static_cast<int>(pair_rng.next_below(label_count));
    int second = static_cast<int>(pair_rng.next_below(label_count - 1));
    if (second >= first) ++second;
    if (worker_index % 2 == 1) std::swap(first, second);
    if (by_label[first].empty() || by_label[second].empty()) {
      // Fall back to labels this shard actually has; the mirror may not
      // materialize and the server will drop the unmatched seed.
      first = present[pick_rng.next_below(present.size())];
      do {
        second = present[pick_rng.next_below(present.size())];
      } while (second == first);
    }
    const std::size_t i = by_label[first][pick_rng.next_below(by_label[first].size())];
    const std::size_t j =
        by_label[second][pick_rng.next_below(by_label[second].size())];
    seeds.push_back(mixup(shard.samples[i], one_hot(shard.labels[i], label_count),
                          shard.samples[j], one_hot(shard.labels[j], label_count),
                          gamma, worker_index));
  }
  return seeds;
}

std::vector<InverseMixedSample> pair_and_invert(const std::vector<MixedSample>& seeds,
                                                int label_count, int n_inv, int n_s) {
  if (n_s < 2 || n_s % 2 != 0)
    throw ValidationError("n_s must be an even number of seeds, >= 2");
  if (n_inv < 0) throw ValidationError("n_inv must be non-negative");

  struct MirrorPair {
    const MixedSample* low_oriented;   // gamma mass on the lower label
    const MixedSample* high_oriented;  // gamma mass on the higher label
    int low_label, high_label;
  };

  // Group seeds by unordered support pair and orientation.
  std::map<std::pair<int, int>,
           std::pair<std::vector<const MixedSample*>, std::vector<const MixedSample*>>>
      groups;
  for (const auto& seed : seeds) {
    SeedPattern p = recover_pattern(seed);
    if (!p.valid || p.high_label >= label_count) continue;
    auto& group = groups[{p.low_label, p.high_label}];
    (p.gamma_label == p.low_label ? group.first : group.second).push_back(&seed);
  }

  std::vector<MirrorPair> pairs;
  for (const auto& [key, group] : groups) {
    for (const MixedSample* a : group.first) {
      for (const MixedSample* b : group.second) {
        if (a->origin_worker == b->origin_worker) continue;
        if (std::abs(a->gamma - b->gamma) > 1e-9) continue;
        pairs.push_back({a, b, key.first, key.second});
      }
    }
  }

  std::vector<InverseMixedSample> out;
  const int half = n_s / 2;
  if (static_cast<int>(pairs.size()) < half) return out;
  for (std::size_t start = 0; start + half <= pairs.size(); ++start) {
    std::vector<MixedSample> bundle;
    for (int k = 0; k < half; ++k) {
      bundle.push_back(*pairs[start + k].low_oriented);
      bundle.push_back(*pairs[start + k].high_oriented);
    }
    for (int target : {pairs[start].low_label, pairs[start].high_label}) {
      if (static_cast<int>(out.size()) >= n_inv) return out;
      out.push_back(inverse_mixup(bundle, target));
    }
  }
  return out;
}

std::vector<RoundReport> run_mix2fld(std::vector<Mlp>& workers,
                                     const std::vector<LabeledDataset>& shards,
                                     const LabeledDataset& test,
                                     const Mix2FldOptions& options) {
  if (workers.size() < 2) throw ValidationError("mix2fld needs C >= 2 workers");
  if (shards.size() != workers.size())
    throw ValidationError("shard count does not match worker count");
  if (!(options.gamma > 0.0 && options.gamma <= 0.5))
    throw ValidationError("gamma must lie in (0, 0.5]");
  if (options.variant == MixVariant::kMix2Fld && options.gamma == 0.5)
    throw ValidationError("mix2fld needs gamma < 0.5 (0.5 is singular for inversion)");
  for (const Mlp& m : workers)
    if (!m.same_architecture(workers.front()))
      throw ValidationError("mix2fld requires homogeneous worker architectures");

  const int label_count = shards.front().label_count;
  const int logit_dim = workers.front().logit_dim(options.train.logit_source);
  const int d_x = shards.front().dim();
  const std::uint64_t logit_bytes = static_cast<std::uint64_t>(label_count) *
                                    logit_dim * options.float_width;
  const std::uint64_t model_bytes =
      workers.front().param_count() * options.float_width;
  const std::uint64_t seed_bytes = static_cast<std::uint64_t>(options.n_mix) *
                                   (d_x + label_count) * options.float_width;

  SplitRng master(options.seed);
  Mlp global_model(workers.front().layer_dims(), workers.front().hidden_activations(),
                   master.child("global-model").next_u64());
  LabelTargets server_targets(label_count);
  std::vector<InverseMixedSample> inverse_seeds;
  std::vector<MixedSample> soft_seeds;
  const auto kinds = std::make_pair(options.train.supervised, options.train.distill);
  const LabelTargets no_targets;

  std::vector<RoundReport> reports;
  for (int round = 1; round <= options.rounds; ++round) {
    SplitRng batch_rng = master.child("mixfld-batch", 0, round);
    std::vector<LogitTable> tables(workers.size(), LogitTable(label_count, logit_dim));
    std::vector<double> losses(workers.size(), 0.0);
    {
      std::vector<std::future<double>> jobs;
      for (std::size_t c = 0; c < workers.size(); ++c) {
        tables[c].round = round;
        jobs.push_back(std::async(std::launch::async, [&, c] {
          // Workers never receive logit targets (the downlink carries model
          // weights), so local training runs without the regularizer.
          return local_train_phase(workers[c], shards[c], no_targets, options.train,
                                   0.0, batch_rng, &tables[c]);
        }));
      }
      for (std::size_t c = 0; c < workers.size(); ++c) losses[c] = jobs[c].get();
    }

    RoundReport report;
    report.round = round;
    report.workers.resize(workers.size());

    std::vector<bool> delivered_up(workers.size(), true);
    std::vector<MixedSample> received_seeds;
    for (std::size_t c = 0; c < workers.size(); ++c) {
      auto& stats = report.workers[c];
      stats.train_loss = losses[c];
      stats.uplink_bytes = logit_bytes + (round == 1 ? seed_bytes : 0);
      stats.downlink_bytes = model_bytes;
      if (options.channel) {
        stats.uplink_delivered =
            transmit(*options.channel, Direction::kUp, stats.uplink_bytes).delivered;
        delivered_up[c] = stats.uplink_delivered;
      }
      if (round == 1 && delivered_up[c]) {
        std::vector<MixedSample> mine = generate_mixup_seeds(
            shards[c], static_cast<int>(c), label_count, options.n_mix,
            options.gamma, options.seed);
        received_seeds.insert(received_seeds.end(), mine.begin(), mine.end());
      }
    }

    if (round == 1) {
      if (options.variant == MixVariant::kMix2Fld)
        inverse_seeds = pair_and_invert(received_seeds, label_count, options.n_inv,
                                        options.n_s);
      else
        soft_seeds = received_seeds;
    }

    // Global average logit per label over the delivered tables (plain mean;
    // the server model is not a worker, so there is nothing to leave out).
    for (int label = 0; label < label_count; ++label) {
      std::vector<double> sum(logit_dim, 0.0);
      int contributors = 0;
      for (std::size_t c = 0; c < workers.size(); ++c) {
        if (!delivered_up[c]) continue;
        auto avg = tables[c].average(label);
        if (!avg) continue;
        ++contributors;
        for (int i = 0; i < logit_dim; ++i) sum[i] += (*avg)[i];
      }
      if (contributors > 0) {
        for (double& v : sum) v /= contributors;
        server_targets[label] = std::move(sum);
      }
    }

    if (options.variant == MixVariant::kMix2Fld) {
      std::vector<InverseMixedSample> usable;
      for (const auto& s : inverse_seeds)
        if (server_targets[s.hard_label].has_value()) usable.push_back(s);
      if (!usable.empty())
        output_to_model(global_model, usable, server_targets, options.server_iters,
                        options.train.eta, options.train.lambda, kinds,
                        options.train.logit_source);
    } else if (!soft_seeds.empty()) {
      output_to_model_soft(global_model, soft_seeds, server_targets,
                           options.server_iters, options.train.eta,
                           options.train.lambda, kinds, options.train.logit_source);
    }

    for (std::size_t c = 0; c < workers.size(); ++c) {
      auto& stats = report.workers[c];
      if (options.channel)
        stats.downlink_delivered =
            transmit(*options.channel, Direction::kDown, model_bytes).delivered;
      if (stats.downlink_delivered) workers[c] = global_model;
      stats.test_accuracy = evaluate_accuracy(workers[c], test);
    }
    reports.push_back(std::move(report));
  }
  return reports;
}

}  // namespace fdsim
