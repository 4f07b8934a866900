#include "fdsim/harness.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fdsim/errors.hpp"
#include "fdsim/ntk.hpp"
#include "fdsim/rng.hpp"
#include "json.hpp"

namespace fdsim {

const char* kVersion = "fdsim-0.1.0";

using nlohmann::json;

ExperimentScheme scheme_from_string(const std::string& name) {
  if (name == "fd") return ExperimentScheme::kFd;
  if (name == "fl") return ExperimentScheme::kFl;
  if (name == "cd_analytic") return ExperimentScheme::kCdAnalytic;
  if (name == "kd_analytic") return ExperimentScheme::kKdAnalytic;
  if (name == "mixfld") return ExperimentScheme::kMixFld;
  if (name == "mix2fld") return ExperimentScheme::kMix2Fld;
  if (name == "pd") return ExperimentScheme::kPd;
  if (name == "frd") return ExperimentScheme::kFrd;
  if (name == "frl") return ExperimentScheme::kFrl;
  throw ValidationError("scheme: unknown value '" + name + "'");
}

std::string to_string(ExperimentScheme scheme) {
  switch (scheme) {
    case ExperimentScheme::kFd: return "fd";
    case ExperimentScheme::kFl: return "fl";
    case ExperimentScheme::kCdAnalytic: return "cd_analytic";
    case ExperimentScheme::kKdAnalytic: return "kd_analytic";
    case ExperimentScheme::kMixFld: return "mixfld";
    case ExperimentScheme::kMix2Fld: return "mix2fld";
    case ExperimentScheme::kPd: return "pd";
    case ExperimentScheme::kFrd: return "frd";
    case ExperimentScheme::kFrl: return "frl";
  }
  return "fd";
}

std::string format_double(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& message) {
  throw ValidationError(path + ": " + message);
}

template <typename T>
T get_field(const json& j, const std::string& section, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(section + "." + key, "has the wrong type");
  }
}

LossKind loss_kind_from(const std::string& name, double temperature,
                        const std::string& path) {
  if (temperature <= 0.0) fail(path, "temperature must be positive");
  if (name == "mse") return LossKind::mse();
  if (name == "cross_entropy") return LossKind::cross_entropy(temperature);
  fail(path, "unknown loss kind '" + name + "'");
}

json channel_to_json(const LinkBudget& budget) {
  return json{{"uplink_bytes", budget.uplink_bytes_per_round},
              {"downlink_bytes", budget.downlink_bytes_per_round},
              {"uplink_rate", budget.uplink_rate},
              {"downlink_rate", budget.downlink_rate}};
}

json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["scheme"] = to_string(cfg.scheme);
  j["seed"] = cfg.seed;
  j["output"] = cfg.output;
  j["holdout_fraction"] = cfg.holdout_fraction;
  j["dataset"] = {{"type", cfg.dataset.type},     {"classes", cfg.dataset.classes},
                  {"per_class", cfg.dataset.per_class}, {"dim", cfg.dataset.dim},
                  {"seed", cfg.dataset.seed},     {"images", cfg.dataset.images_path},
                  {"labels", cfg.dataset.labels_path}};
  json shard_json = {{"workers", cfg.shard.workers},
                     {"mode", cfg.shard.plan.mode == ShardPlan::Mode::kIid ? "iid"
                                                                           : "non_iid"},
                     {"seed", cfg.shard.plan.seed}};
  if (cfg.shard.plan.per_worker_counts)
    shard_json["per_worker_counts"] = *cfg.shard.plan.per_worker_counts;
  j["shard"] = shard_json;
  std::vector<std::string> acts;
  for (Activation a : cfg.model.activations) acts.push_back(to_string(a));
  j["model"] = {{"layer_dims", cfg.model.layer_dims},
                {"activations", acts},
                {"logit_source", cfg.model.logit_source == LogitSource::kOutput
                                     ? "output"
                                     : "last_hidden"}};
  j["hyper"] = {
      {"eta", cfg.train.eta},
      {"lambda", cfg.train.lambda},
      {"steps", cfg.train.steps},
      {"batch", cfg.train.batch},
      {"rounds", cfg.rounds},
      {"float_width", cfg.float_width},
      {"supervised_loss",
       cfg.train.supervised.tag == LossKind::Tag::kMse ? "mse" : "cross_entropy"},
      {"distill_loss",
       cfg.train.distill.tag == LossKind::Tag::kMse ? "mse" : "cross_entropy"},
      {"temperature", cfg.train.distill.temperature}};
  if (cfg.channel) j["channel"] = channel_to_json(*cfg.channel);
  j["mixup"] = {{"gamma", cfg.mixup.gamma},
                {"n_mix", cfg.mixup.n_mix},
                {"n_inv", cfg.mixup.n_inv},
                {"n_s", cfg.mixup.n_s},
                {"server_iters", cfg.mixup.server_iters}};
  j["analytic"] = {{"a", cfg.analytic.a},
                   {"lambda", cfg.analytic.lambda},
                   {"workers", cfg.analytic.workers},
                   {"rounds", cfg.analytic.rounds},
                   {"samples", cfg.analytic.samples},
                   {"oracle_step", cfg.analytic.oracle_step},
                   {"oracle_iters", cfg.analytic.oracle_iters}};
  j["frd"] = {{"agents", cfg.drl.agents},
              {"episodes", cfg.drl.episodes},
              {"interval", cfg.drl.exchange_interval},
              {"subspaces", cfg.drl.subspaces},
              {"eta_actor", cfg.drl.eta_actor},
              {"eta_critic", cfg.drl.eta_critic},
              {"discount", cfg.drl.discount},
              {"distill_steps", cfg.drl.distill_steps},
              {"distill_eta", cfg.drl.distill_eta},
              {"mission_score", cfg.drl.mission_score},
              {"mission_window", cfg.drl.mission_window},
              {"rolling_window", cfg.drl.rolling_window}};
  return j;
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json j = json::parse(json_text, nullptr, false);
  if (j.is_discarded()) throw ValidationError("config: not valid JSON");
  if (!j.is_object()) throw ValidationError("config: top level must be an object");

  ExperimentConfig cfg;
  if (!j.contains("scheme")) fail("scheme", "is required");
  cfg.scheme = scheme_from_string(get_field<std::string>(j, "config", "scheme", "fd"));
  cfg.seed = get_field<std::uint64_t>(j, "config", "seed", cfg.seed);
  cfg.output = get_field<std::string>(j, "config", "output", cfg.output);
  cfg.holdout_fraction =
      get_field<double>(j, "config", "holdout_fraction", cfg.holdout_fraction);
  if (cfg.holdout_fraction < 0.0 || cfg.holdout_fraction >= 1.0)
    fail("holdout_fraction", "must lie in [0, 1)");

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    cfg.dataset.type = get_field<std::string>(d, "dataset", "type", cfg.dataset.type);
    if (cfg.dataset.type != "synth" && cfg.dataset.type != "idx")
      fail("dataset.type", "must be 'synth' or 'idx'");
    cfg.dataset.classes = get_field<int>(d, "dataset", "classes", cfg.dataset.classes);
    cfg.dataset.per_class =
        get_field<int>(d, "dataset", "per_class", cfg.dataset.per_class);
    cfg.dataset.dim = get_field<int>(d, "dataset", "dim", cfg.dataset.dim);
    cfg.dataset.seed = get_field<std::uint64_t>(d, "dataset", "seed", cfg.dataset.seed);
    cfg.dataset.images_path = get_field<std::string>(d, "dataset", "images", "");
    cfg.dataset.labels_path = get_field<std::string>(d, "dataset", "labels", "");
    if (cfg.dataset.type == "synth" &&
        (cfg.dataset.classes <= 0 || cfg.dataset.per_class <= 0 || cfg.dataset.dim <= 0))
      fail("dataset", "classes, per_class, and dim must be positive");
    if (cfg.dataset.type == "idx" &&
        (cfg.dataset.images_path.empty() || cfg.dataset.labels_path.empty()))
      fail("dataset", "idx datasets need images and labels paths");
  }

  if (j.contains("shard")) {
    const json& s = j.at("shard");
    cfg.shard.workers = get_field<int>(s, "shard", "workers", cfg.shard.workers);
    if (cfg.shard.workers <= 0) fail("shard.workers", "must be positive");
    const std::string mode = get_field<std::string>(s, "shard", "mode", "iid");
    if (mode == "iid") cfg.shard.plan.mode = ShardPlan::Mode::kIid;
    else if (mode == "non_iid") cfg.shard.plan.mode = ShardPlan::Mode::kNonIid;
    else fail("shard.mode", "must be 'iid' or 'non_iid'");
    cfg.shard.plan.seed =
        get_field<std::uint64_t>(s, "shard", "seed", cfg.shard.plan.seed);
    if (s.contains("per_worker_counts")) {
      try {
        cfg.shard.plan.per_worker_counts =
            s.at("per_worker_counts").get<std::vector<std::vector<int>>>();
      } catch (const json::exception&) {
        fail("shard.per_worker_counts", "must be an array of integer arrays");
      }
    }
  }

  if (j.contains("model")) {
    const json& m = j.at("model");
    cfg.model.layer_dims =
        get_field<std::vector<int>>(m, "model", "layer_dims", cfg.model.layer_dims);
    if (cfg.model.layer_dims.size() < 2) fail("model.layer_dims", "needs >= 2 layers");
    for (int d : cfg.model.layer_dims)
      if (d <= 0) fail("model.layer_dims", "entries must be positive");
    if (m.contains("activations")) {
      cfg.model.activations.clear();
      for (const auto& name :
           get_field<std::vector<std::string>>(m, "model", "activations", {}))
        cfg.model.activations.push_back(activation_from_string(name));
    } else {
      cfg.model.activations.assign(cfg.model.layer_dims.size() - 2, Activation::kTanh);
    }
    if (cfg.model.activations.size() != cfg.model.layer_dims.size() - 2)
      fail("model.activations", "needs one entry per hidden layer");
    cfg.model.logit_source = logit_source_from_string(
        get_field<std::string>(m, "model", "logit_source", "output"));
  }

  if (j.contains("hyper")) {
    const json& h = j.at("hyper");
    cfg.train.eta = get_field<double>(h, "hyper", "eta", cfg.train.eta);
    if (cfg.train.eta <= 0.0) fail("hyper.eta", "must be positive");
    cfg.train.lambda = get_field<double>(h, "hyper", "lambda", cfg.train.lambda);
    if (cfg.train.lambda < 0.0) fail("hyper.lambda", "must be non-negative");
    cfg.train.steps = get_field<int>(h, "hyper", "steps", cfg.train.steps);
    if (cfg.train.steps < 0) fail("hyper.steps", "must be non-negative");
    cfg.train.batch = get_field<int>(h, "hyper", "batch", cfg.train.batch);
    if (cfg.train.batch <= 0) fail("hyper.batch", "must be positive");
    cfg.rounds = get_field<int>(h, "hyper", "rounds", cfg.rounds);
    if (cfg.rounds < 0) fail("hyper.rounds", "must be non-negative");
    cfg.float_width = get_field<int>(h, "hyper", "float_width", cfg.float_width);
    if (cfg.float_width != 4 && cfg.float_width != 8)
      fail("hyper.float_width", "must be 4 or 8");
    const double temperature = get_field<double>(h, "hyper", "temperature", 1.0);
    cfg.train.supervised = loss_kind_from(
        get_field<std::string>(h, "hyper", "supervised_loss", "cross_entropy"), 1.0,
        "hyper.supervised_loss");
    cfg.train.distill = loss_kind_from(
        get_field<std::string>(h, "hyper", "distill_loss", "cross_entropy"),
        temperature, "hyper.distill_loss");
  }
  cfg.train.logit_source = cfg.model.logit_source;

  if (j.contains("channel") && !j.at("channel").is_null()) {
    const json& c = j.at("channel");
    if (c.contains("preset")) {
      cfg.channel = preset_by_name(get_field<std::string>(c, "channel", "preset", ""));
    } else {
      LinkBudget budget;
      budget.uplink_bytes_per_round =
          get_field<std::uint64_t>(c, "channel", "uplink_bytes", 0);
      budget.downlink_bytes_per_round =
          get_field<std::uint64_t>(c, "channel", "downlink_bytes", 0);
      budget.uplink_rate = get_field<double>(
          c, "channel", "uplink_rate",
          static_cast<double>(budget.uplink_bytes_per_round));
      budget.downlink_rate = get_field<double>(
          c, "channel", "downlink_rate",
          static_cast<double>(budget.downlink_bytes_per_round));
      try {
        validate(budget);
      } catch (const ValidationError& e) {
        fail("channel", e.what());
      }
      cfg.channel = budget;
    }
  }

  if (j.contains("mixup")) {
    const json& m = j.at("mixup");
    cfg.mixup.gamma = get_field<double>(m, "mixup", "gamma", cfg.mixup.gamma);
    if (!(cfg.mixup.gamma > 0.0 && cfg.mixup.gamma <= 0.5))
      fail("mixup.gamma", "must lie in (0, 0.5]");
    cfg.mixup.n_mix = get_field<int>(m, "mixup", "n_mix", cfg.mixup.n_mix);
    if (cfg.mixup.n_mix < 0) fail("mixup.n_mix", "must be non-negative");
    cfg.mixup.n_inv = get_field<int>(m, "mixup", "n_inv", cfg.mixup.n_inv);
    if (cfg.mixup.n_inv < 0) fail("mixup.n_inv", "must be non-negative");
    cfg.mixup.n_s = get_field<int>(m, "mixup", "n_s", cfg.mixup.n_s);
    if (cfg.mixup.n_s < 2 || cfg.mixup.n_s % 2 != 0)
      fail("mixup.n_s", "must be an even integer >= 2");
    cfg.mixup.server_iters =
        get_field<int>(m, "mixup", "server_iters", cfg.mixup.server_iters);
    if (cfg.mixup.server_iters < 0) fail("mixup.server_iters", "must be non-negative");
  }

  if (j.contains("analytic")) {
    const json& a = j.at("analytic");
    cfg.analytic.a = get_field<double>(a, "analytic", "a", cfg.analytic.a);
    cfg.analytic.lambda = get_field<double>(a, "analytic", "lambda", cfg.analytic.lambda);
    if (cfg.analytic.a <= 0.0) fail("analytic.a", "must be positive");
    if (cfg.analytic.lambda <= 0.0) fail("analytic.lambda", "must be positive");
    cfg.analytic.workers = get_field<int>(a, "analytic", "workers", cfg.analytic.workers);
    if (cfg.analytic.workers < 2) fail("analytic.workers", "must be >= 2");
    cfg.analytic.rounds = get_field<int>(a, "analytic", "rounds", cfg.analytic.rounds);
    if (cfg.analytic.rounds < 0) fail("analytic.rounds", "must be non-negative");
    cfg.analytic.samples = get_field<int>(a, "analytic", "samples", cfg.analytic.samples);
    if (cfg.analytic.samples <= 0) fail("analytic.samples", "must be positive");
    cfg.analytic.oracle_step =
        get_field<double>(a, "analytic", "oracle_step", cfg.analytic.oracle_step);
    if (cfg.analytic.oracle_step <= 0.0) fail("analytic.oracle_step", "must be positive");
    cfg.analytic.oracle_iters =
        get_field<long>(a, "analytic", "oracle_iters", cfg.analytic.oracle_iters);
    if (cfg.analytic.oracle_iters < 0) fail("analytic.oracle_iters", "must be >= 0");
  }

  if (j.contains("frd")) {
    const json& f = j.at("frd");
    cfg.drl.agents = get_field<int>(f, "frd", "agents", cfg.drl.agents);
    if (cfg.drl.agents < 1) fail("frd.agents", "must be >= 1");
    cfg.drl.episodes = get_field<int>(f, "frd", "episodes", cfg.drl.episodes);
    if (cfg.drl.episodes < 0) fail("frd.episodes", "must be non-negative");
    cfg.drl.exchange_interval =
        get_field<int>(f, "frd", "interval", cfg.drl.exchange_interval);
    if (cfg.drl.exchange_interval <= 0) fail("frd.interval", "must be positive");
    cfg.drl.subspaces = get_field<int>(f, "frd", "subspaces", cfg.drl.subspaces);
    if (cfg.drl.subspaces <= 0) fail("frd.subspaces", "must be positive");
    cfg.drl.eta_actor = get_field<double>(f, "frd", "eta_actor", cfg.drl.eta_actor);
    cfg.drl.eta_critic = get_field<double>(f, "frd", "eta_critic", cfg.drl.eta_critic);
    cfg.drl.discount = get_field<double>(f, "frd", "discount", cfg.drl.discount);
    if (!(cfg.drl.discount > 0.0 && cfg.drl.discount <= 1.0))
      fail("frd.discount", "must lie in (0, 1]");
    cfg.drl.distill_steps =
        get_field<int>(f, "frd", "distill_steps", cfg.drl.distill_steps);
    cfg.drl.distill_eta =
        get_field<double>(f, "frd", "distill_eta", cfg.drl.distill_eta);
    cfg.drl.mission_score =
        get_field<double>(f, "frd", "mission_score", cfg.drl.mission_score);
    cfg.drl.mission_window =
        get_field<int>(f, "frd", "mission_window", cfg.drl.mission_window);
    cfg.drl.rolling_window =
        get_field<int>(f, "frd", "rolling_window", cfg.drl.rolling_window);
  }
  cfg.drl.seed = cfg.seed;
  cfg.drl.float_width = cfg.float_width;
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

namespace {

LabeledDataset build_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset.type == "synth")
    return synth_classification(cfg.dataset.classes, cfg.dataset.per_class,
                                cfg.dataset.dim, cfg.dataset.seed);
  return load_idx(cfg.dataset.images_path, cfg.dataset.labels_path);
}

std::vector<Mlp> build_workers(const ExperimentConfig& cfg, int count) {
  SplitRng master(cfg.seed);
  std::vector<Mlp> workers;
  workers.reserve(count);
  for (int c = 0; c < count; ++c)
    workers.emplace_back(cfg.model.layer_dims, cfg.model.activations,
                         master.child("model", c).next_u64());
  return workers;
}

void write_round_csv(const std::string& path, const std::vector<RoundReport>& reports) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open metrics file: " + path);
  out << "round,worker,loss,accuracy,uplink_bytes,downlink_bytes\n";
  for (const auto& report : reports)
    for (std::size_t c = 0; c < report.workers.size(); ++c) {
      const auto& w = report.workers[c];
      out << report.round << ',' << c << ',' << format_double(w.train_loss) << ','
          << format_double(w.test_accuracy) << ',' << w.uplink_bytes << ','
          << w.downlink_bytes << '\n';
    }
}

void write_drl_csv(const std::string& path, const DrlRunResult& result) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open metrics file: " + path);
  out << "exchange,agent,rolling_score,uplink_bytes,downlink_bytes\n";
  for (const auto& exchange : result.exchanges)
    for (std::size_t c = 0; c < exchange.rolling_score.size(); ++c)
      out << exchange.exchange << ',' << c << ','
          << format_double(exchange.rolling_score[c]) << ','
          << exchange.uplink_bytes[c] << ',' << exchange.downlink_bytes[c] << '\n';
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const std::string& output_dir) {
  const auto started = std::chrono::steady_clock::now();
  std::filesystem::create_directories(output_dir);
  const std::string metrics_path = output_dir + "/" + cfg.output + ".csv";
  const std::string manifest_path = output_dir + "/" + cfg.output + "_manifest.json";

  json manifest;
  manifest["version"] = kVersion;
  manifest["config"] = config_to_json(cfg);

  switch (cfg.scheme) {
    case ExperimentScheme::kFd:
    case ExperimentScheme::kFl: {
      LabeledDataset full = build_dataset(cfg);
      manifest["dataset_hash"] = format_double(0);  // replaced below
      manifest["dataset_hash"] = std::to_string(dataset_hash(full));
      auto [train_set, test_set] =
          split_holdout(full, cfg.holdout_fraction, cfg.seed);
      std::vector<LabeledDataset> shards =
          shard(train_set, cfg.shard.workers, cfg.shard.plan);
      std::vector<Mlp> workers = build_workers(cfg, cfg.shard.workers);
      RunOptions options;
      options.rounds = cfg.rounds;
      options.float_width = cfg.float_width;
      options.seed = cfg.seed;
      options.channel = cfg.channel;
      options.train = cfg.train;
      const auto reports = cfg.scheme == ExperimentScheme::kFd
                               ? run_fd(workers, shards, test_set, options)
                               : run_fl(workers, shards, test_set, options);
      write_round_csv(metrics_path, reports);
      break;
    }
    case ExperimentScheme::kMixFld:
    case ExperimentScheme::kMix2Fld: {
      LabeledDataset full = build_dataset(cfg);
      manifest["dataset_hash"] = std::to_string(dataset_hash(full));
      auto [train_set, test_set] =
          split_holdout(full, cfg.holdout_fraction, cfg.seed);
      std::vector<LabeledDataset> shards =
          shard(train_set, cfg.shard.workers, cfg.shard.plan);
      std::vector<Mlp> workers = build_workers(cfg, cfg.shard.workers);
      Mix2FldOptions options;
      options.rounds = cfg.rounds;
      options.gamma = cfg.mixup.gamma;
      options.n_mix = cfg.mixup.n_mix;
      options.n_inv = cfg.mixup.n_inv;
      options.n_s = cfg.mixup.n_s;
      options.server_iters = cfg.mixup.server_iters;
      options.float_width = cfg.float_width;
      options.seed = cfg.seed;
      options.channel = cfg.channel;
      options.variant = cfg.scheme == ExperimentScheme::kMix2Fld
                            ? MixVariant::kMix2Fld
                            : MixVariant::kMixFld;
      options.train = cfg.train;
      write_round_csv(metrics_path, run_mix2fld(workers, shards, test_set, options));
      break;
    }
    case ExperimentScheme::kCdAnalytic: {
      SplitRng rng = SplitRng(cfg.seed).child("cd-analytic");
      KernelRegimeSystem sys;
      sys.a = cfg.analytic.a;
      sys.lambda = cfg.analytic.lambda;
      sys.workers = cfg.analytic.workers;
      sys.truth.resize(cfg.analytic.samples);
      for (double& v : sys.truth) v = rng.uniform(-1.0, 1.0);
      std::vector<std::vector<double>> f0(cfg.analytic.workers);
      for (int c = 0; c < cfg.analytic.workers; ++c) {
        SplitRng wrng = SplitRng(cfg.seed).child("cd-init", c);
        f0[c].resize(cfg.analytic.samples);
        for (double& v : f0[c]) v = wrng.uniform(-1.0, 1.0);
      }
      sys.initial_outputs = std::move(f0);
      const auto history = cd_residual_history(sys, cfg.analytic.rounds);
      std::ofstream out(metrics_path, std::ios::binary);
      if (!out) throw std::runtime_error("cannot open metrics file: " + metrics_path);
      out << "round,worker,residual\n";
      for (std::size_t r = 0; r < history.size(); ++r)
        for (std::size_t c = 0; c < history[r].size(); ++c)
          out << r << ',' << c << ',' << format_double(history[r][c]) << '\n';
      break;
    }
    case ExperimentScheme::kKdAnalytic: {
      SplitRng rng = SplitRng(cfg.seed).child("kd-analytic");
      KernelRegimeSystem sys;
      sys.a = cfg.analytic.a;
      sys.lambda = cfg.analytic.lambda;
      sys.truth.resize(cfg.analytic.samples);
      for (double& v : sys.truth) v = rng.uniform(-1.0, 1.0);
      std::vector<double> teacher(cfg.analytic.samples);
      for (double& v : teacher) v = rng.uniform(-1.0, 1.0);
      sys.teacher_pred = std::move(teacher);
      const std::vector<double> fixed = kd_fixed_point(sys);
      // Ten checkpoints along the oracle trajectory.
      std::ofstream out(metrics_path, std::ios::binary);
      if (!out) throw std::runtime_error("cannot open metrics file: " + metrics_path);
      out << "iteration,fixed_point_gap\n";
      const long chunk = std::max(1L, cfg.analytic.oracle_iters / 10);
      std::vector<double> current(sys.truth.size(), 0.0);
      long done = 0;
      while (done < cfg.analytic.oracle_iters) {
        const long todo = std::min(chunk, cfg.analytic.oracle_iters - done);
        current = gradient_flow_oracle(sys, cfg.analytic.oracle_step, todo, current);
        done += todo;
        double gap = 0.0;
        for (std::size_t i = 0; i < fixed.size(); ++i)
          gap = std::max(gap, std::abs(current[i] - fixed[i]));
        out << done << ',' << format_double(gap) << '\n';
      }
      break;
    }
    case ExperimentScheme::kPd:
    case ExperimentScheme::kFrd:
    case ExperimentScheme::kFrl: {
      DrlScheme scheme = cfg.scheme == ExperimentScheme::kPd  ? DrlScheme::kPd
                         : cfg.scheme == ExperimentScheme::kFrd ? DrlScheme::kFrd
                                                                : DrlScheme::kFrl;
      write_drl_csv(metrics_path, run_drl(scheme, cfg.drl));
      break;
    }
  }

  const auto elapsed = std::chrono::duration<double>(
                           std::chrono::steady_clock::now() - started)
                           .count();
  manifest["wall_time_seconds"] = elapsed;
  manifest["metrics"] = metrics_path;
  std::ofstream mout(manifest_path, std::ios::binary);
  if (!mout) throw std::runtime_error("cannot open manifest: " + manifest_path);
  mout << manifest.dump(2) << '\n';
  return {metrics_path, manifest_path};
}

namespace {

struct RoundAggregate {
  double accuracy_sum = 0.0;
  int workers = 0;
  double bytes = 0.0;
};

std::map<int, RoundAggregate> read_round_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open report: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("empty report: " + path);
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  auto column = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw ValidationError("report " + path + " lacks column '" + name + "'");
  };
  const int col_round = column("round");
  const int col_accuracy = column("accuracy");
  const int col_up = column("uplink_bytes");
  const int col_down = column("downlink_bytes");

  std::map<int, RoundAggregate> rounds;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size())
      throw ValidationError("report " + path + " has a ragged row");
    RoundAggregate& agg = rounds[std::stoi(cells[col_round])];
    agg.accuracy_sum += std::stod(cells[col_accuracy]);
    agg.workers += 1;
    agg.bytes += std::stod(cells[col_up]) + std::stod(cells[col_down]);
  }
  return rounds;
}

}  // namespace

CompareSummary compare(const std::string& csv_a, const std::string& csv_b) {
  const auto rounds_a = read_round_csv(csv_a);
  const auto rounds_b = read_round_csv(csv_b);

  CompareSummary summary;
  double cum_a = 0.0, cum_b = 0.0;
  std::vector<std::pair<int, double>> acc_a, acc_b;  // (round, mean accuracy)
  std::vector<double> cums_a, cums_b;
  auto it_a = rounds_a.begin();
  auto it_b = rounds_b.begin();
  while (it_a != rounds_a.end() && it_b != rounds_b.end()) {
    if (it_a->first != it_b->first)
      throw ValidationError("reports have mismatched round indices");
    const double mean_a = it_a->second.accuracy_sum / it_a->second.workers;
    const double mean_b = it_b->second.accuracy_sum / it_b->second.workers;
    cum_a += it_a->second.bytes;
    cum_b += it_b->second.bytes;
    summary.rounds.push_back(it_a->first);
    summary.accuracy_delta.push_back(mean_a - mean_b);
    summary.cumulative_bytes_a.push_back(cum_a);
    summary.cumulative_bytes_b.push_back(cum_b);
    acc_a.emplace_back(it_a->first, mean_a);
    acc_b.emplace_back(it_b->first, mean_b);
    cums_a.push_back(cum_a);
    cums_b.push_back(cum_b);
    ++it_a;
    ++it_b;
  }
  if (it_a != rounds_a.end() || it_b != rounds_b.end())
    throw ValidationError("reports cover different numbers of rounds");

  for (double threshold : {0.5, 0.6, 0.7, 0.8, 0.9}) {
    std::optional<double> ratio;
    std::optional<std::size_t> hit_a, hit_b;
    for (std::size_t i = 0; i < acc_a.size(); ++i) {
      if (!hit_a && acc_a[i].second >= threshold) hit_a = i;
      if (!hit_b && acc_b[i].second >= threshold) hit_b = i;
    }
    if (hit_a && hit_b && cums_b[*hit_b] > 0.0)
      ratio = cums_a[*hit_a] / cums_b[*hit_b];
    summary.cost_ratio_at[threshold] = ratio;
  }
  return summary;
}

std::string format_compare(const CompareSummary& summary) {
  std::ostringstream out;
  out << "round,accuracy_delta,cumulative_bytes_a,cumulative_bytes_b\n";
  for (std::size_t i = 0; i < summary.rounds.size(); ++i)
    out << summary.rounds[i] << ',' << format_double(summary.accuracy_delta[i]) << ','
        << format_double(summary.cumulative_bytes_a[i]) << ','
        << format_double(summary.cumulative_bytes_b[i]) << '\n';
  out << "\ncommunication cost ratio (a/b) at matched accuracy:\n";
  for (const auto& [threshold, ratio] : summary.cost_ratio_at) {
    out << "  accuracy >= " << threshold << ": ";
    if (ratio) out << format_double(*ratio) << '\n';
    else out << "undefined (threshold never reached)\n";
  }
  return out.str();
}

}  // namespace fdsim
