#pragma once

// Experiment configuration, dispatch, deterministic seeding, and metrics
// emission for every scheme; the CLI is a thin wrapper over this.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fdsim/channel.hpp"
#include "fdsim/data.hpp"
#include "fdsim/fd.hpp"
#include "fdsim/frd.hpp"
#include "fdsim/mix2fld.hpp"
#include "fdsim/nn.hpp"

namespace fdsim {

enum class ExperimentScheme {
  kFd,
  kFl,
  kCdAnalytic,
  kKdAnalytic,
  kMixFld,
  kMix2Fld,
  kPd,
  kFrd,
  kFrl,
};

ExperimentScheme scheme_from_string(const std::string& name);
std::string to_string(ExperimentScheme scheme);

struct DatasetSpec {
  std::string type = "synth";  // synth | idx
  int classes = 10;
  int per_class = 125;
  int dim = 8;
  std::uint64_t seed = 7;
  std::string images_path;
  std::string labels_path;
};

struct ShardSpec {
  int workers = 2;
  ShardPlan plan;
};

struct ModelSpec {
  std::vector<int> layer_dims = {8, 128, 64, 10};
  std::vector<Activation> activations = {Activation::kTanh, Activation::kTanh};
  LogitSource logit_source = LogitSource::kOutput;
};

struct AnalyticSpec {
  double a = 1.0;
  double lambda = 1.0;
  int workers = 2;
  int rounds = 50;
  int samples = 10;
  double oracle_step = 1e-3;
  long oracle_iters = 100000;
};

struct MixupSpec {
  double gamma = 0.4;
  int n_mix = 5;
  int n_inv = 10;
  int n_s = 2;
  int server_iters = 200;
};

struct ExperimentConfig {
  ExperimentScheme scheme = ExperimentScheme::kFd;
  std::uint64_t seed = 1;
  std::string output = "experiment";
  double holdout_fraction = 0.2;
  DatasetSpec dataset;
  ShardSpec shard;
  ModelSpec model;
  TrainOptions train;
  int rounds = 30;
  int float_width = 4;
  std::optional<LinkBudget> channel;
  AnalyticSpec analytic;
  MixupSpec mixup;
  DrlOptions drl;
};

// Parses and validates; throws ValidationError naming the offending field.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

struct ExperimentResult {
  std::string metrics_path;
  std::string manifest_path;
};

// Dispatches to the scheme's runner, writes the metrics CSV and a JSON
// manifest (config echo, version, wall time, dataset hash).
ExperimentResult run_experiment(const ExperimentConfig& config,
                                const std::string& output_dir);

struct CompareSummary {
  // round -> (accuracy delta a-b, cumulative bytes a, cumulative bytes b)
  std::vector<int> rounds;
  std::vector<double> accuracy_delta;
  std::vector<double> cumulative_bytes_a;
  std::vector<double> cumulative_bytes_b;
  // accuracy threshold -> ratio of total communication cost a/b at the first
  // round each side reaches it; absent when either side never reaches it.
  std::map<double, std::optional<double>> cost_ratio_at;
};

CompareSummary compare(const std::string& csv_a, const std::string& csv_b);
std::string format_compare(const CompareSummary& summary);

// 17-significant-digit float formatting used by every CSV writer.
std::string format_double(double value);

extern const char* kVersion;

}  // namespace fdsim
