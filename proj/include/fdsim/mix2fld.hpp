#pragma once

// The Mix2FLD pipeline: mixup seed generation, inverse-mixup with the n_s
// coefficient solve, server-side output-to-model conversion, round
// orchestration under a channel, differential-privacy accounting, and the
// sample-privacy metric.

#include <cstdint>
#include <set>
#include <vector>

#include "fdsim/channel.hpp"
#include "fdsim/data.hpp"
#include "fdsim/fd.hpp"
#include "fdsim/nn.hpp"

namespace fdsim {

struct MixedSample {
  std::vector<double> covariate;   // gamma*x_i + (1-gamma)*x_j
  std::vector<double> soft_label;  // gamma*y_i + (1-gamma)*y_j
  double gamma = 0.0;
  int origin_worker = -1;
};

struct InverseMixedSample {
  std::vector<double> covariate;
  int hard_label = -1;
  std::set<int> contributing_workers;  // always >= 2 distinct ids
};

struct DpParams {
  std::int64_t n = 0;      // local dataset size
  std::int64_t n_mix = 0;  // mixed samples per worker
  std::int64_t d_x = 0;
  std::int64_t d_y = 0;
  double sigma_x2 = 1.0;
  double sigma_y2 = 1.0;
  double delta = 1e-5;
};

MixedSample mixup(std::span<const double> x_i, std::span<const double> y_i,
                  std::span<const double> x_j, std::span<const double> y_j,
                  double gamma, int origin_worker = -1);

// Inverse mixing ratio for a symmetric two-seed pair with soft labels
// {gamma, 1-gamma} and {1-gamma, gamma}. target_label_position 0 recovers
// {1,0}, position 1 recovers {0,1}. gamma = 0.5 is singular.
double solve_inverse_ratio(double gamma, int target_label_position);

// General n_s-seed inverse mixup: solves for coefficients reproducing the
// one-hot target label, then combines the covariates. Seeds must span at
// least two distinct workers.
InverseMixedSample inverse_mixup(const std::vector<MixedSample>& seeds,
                                 int target_label);

// Server-side knowledge transfer: `iters` SGD steps of the supervised loss on
// the seed samples plus the lambda-weighted distillation term against the
// per-label global targets, cycling through the seeds in order.
void output_to_model(Mlp& global_model, const std::vector<InverseMixedSample>& seeds,
                     const LabelTargets& global_targets, int iters, double eta,
                     double lambda, const std::pair<LossKind, LossKind>& kinds,
                     LogitSource source = LogitSource::kOutput);

// MixFLD variant: trains directly on mixed samples; the supervised target is
// the soft label and the distillation target is the soft-label-weighted
// mixture of the per-label global targets.
void output_to_model_soft(Mlp& global_model, const std::vector<MixedSample>& seeds,
                          const LabelTargets& global_targets, int iters, double eta,
                          double lambda, const std::pair<LossKind, LossKind>& kinds,
                          LogitSource source = LogitSource::kOutput);

// (epsilon, delta) accounting for mixup seed collection:
//   eps = (2 n_mix D)/(8n) (1 + sqrt(4n ln(1/delta)/(D n_mix)))
//         + sqrt(D n_mix ln(1/delta)/(4n)),   D = d_x/sigma_x^2 + d_y/sigma_y^2.
double dp_epsilon(const DpParams& params);

// log of the smaller Euclidean distance between the mixed sample and its two
// raw constituents.
double sample_privacy(const MixedSample& mixed, std::span<const double> x_i,
                      std::span<const double> x_j);

enum class MixVariant { kMix2Fld, kMixFld };

struct Mix2FldOptions {
  int rounds = 10;
  double gamma = 0.4;
  int n_mix = 5;      // mixed seed samples per worker, round 1 only
  int n_inv = 10;     // inversely mixed samples generated at the server
  int n_s = 2;        // seeds per inverse combination (even, >= 2)
  int server_iters = 200;  // K_s
  int float_width = 4;
  std::uint64_t seed = 0;
  std::optional<LinkBudget> channel;
  MixVariant variant = MixVariant::kMix2Fld;
  TrainOptions train;
};

// Round-1 mixup seed collection and inverse mixup, then every round: FD-style
// logit upload, server output-to-model conversion, FL-style model broadcast.
std::vector<RoundReport> run_mix2fld(std::vector<Mlp>& workers,
                                     const std::vector<LabeledDataset>& shards,
                                     const LabeledDataset& test,
                                     const Mix2FldOptions& options);

// Exposed for tests: per-worker seed generation and the server-side pairing
// of mirror-labeled seeds into inverse samples.
std::vector<MixedSample> generate_mixup_seeds(const LabeledDataset& shard,
                                              int worker_index, int label_count,
                                              int n_mix, double gamma,
                                              std::uint64_t run_seed);
std::vector<InverseMixedSample> pair_and_invert(const std::vector<MixedSample>& seeds,
                                                int label_count, int n_inv, int n_s);

}  // namespace fdsim
