#include "fdsim/data.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

#include "fdsim/errors.hpp"
#include "fdsim/rng.hpp"

namespace fdsim {

namespace {

std::uint32_t read_u32_be(std::ifstream& in, const std::string& path,
                          const char* what) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (!in)
    throw ValidationError("truncated IDX file (" + std::string(what) + "): " + path);
  return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
         (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

std::vector<std::vector<std::size_t>> indices_by_label(const LabeledDataset& ds) {
  std::vector<std::vector<std::size_t>> by_label(ds.label_count);
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    by_label[ds.labels[i]].push_back(i);
  return by_label;
}

void append_sample(LabeledDataset& out, const LabeledDataset& src, std::size_t i) {
  out.samples.push_back(src.samples[i]);
  out.labels.push_back(src.labels[i]);
}

}  // namespace

void validate(const LabeledDataset& ds) {
  if (ds.samples.size() != ds.labels.size())
    throw ValidationError("dataset sample/label counts differ");
  if (ds.label_count <= 0) throw ValidationError("label count must be positive");
  const int d = ds.dim();
  for (const auto& s : ds.samples)
    if (static_cast<int>(s.size()) != d)
      throw ValidationError("dataset has mixed sample dimensions");
  for (int label : ds.labels)
    if (label < 0 || label >= ds.label_count)
      throw ValidationError("label out of range: " + std::to_string(label));
}

LabeledDataset synth_classification(int classes, int per_class, int dim,
                                    std::uint64_t seed) {
  if (classes <= 0 || per_class <= 0 || dim <= 0)
    throw ValidationError("synth_classification arguments must be positive");
  SplitRng rng = SplitRng(seed).child("synth");

  std::vector<std::vector<double>> means(classes, std::vector<double>(dim));
  for (auto& mean : means)
    for (double& v : mean) v = rng.normal();

  constexpr double kSpread = 0.3;
  LabeledDataset ds;
  ds.label_count = classes;
  ds.samples.reserve(static_cast<std::size_t>(classes) * per_class);
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      std::vector<double> x(dim);
      for (int j = 0; j < dim; ++j) x[j] = means[c][j] + kSpread * rng.normal();
      ds.samples.push_back(std::move(x));
      ds.labels.push_back(c);
    }
  }
  return ds;
}

LabeledDataset load_idx(const std::string& images_path,
                        const std::string& labels_path) {
  std::ifstream images(images_path, std::ios::binary);
  if (!images) throw ValidationError("cannot open IDX images: " + images_path);
  std::ifstream labels(labels_path, std::ios::binary);
  if (!labels) throw ValidationError("cannot open IDX labels: " + labels_path);

  const std::uint32_t image_magic = read_u32_be(images, images_path, "image magic");
  if (image_magic != 0x00000803u)
    throw ValidationError("bad IDX image magic in " + images_path);
  const std::uint32_t count = read_u32_be(images, images_path, "image count");
  const std::uint32_t rows = read_u32_be(images, images_path, "rows");
  const std::uint32_t cols = read_u32_be(images, images_path, "cols");

  const std::uint32_t label_magic = read_u32_be(labels, labels_path, "label magic");
  if (label_magic != 0x00000801u)
    throw ValidationError("bad IDX label magic in " + labels_path);
  const std::uint32_t label_count = read_u32_be(labels, labels_path, "label count");
  if (label_count != count)
    throw ValidationError("IDX image/label count mismatch: " + std::to_string(count) +
                          " images vs " + std::to_string(label_count) + " labels");

  const std::size_t dim = static_cast<std::size_t>(rows) * cols;
  std::vector<unsigned char> pixel_buf(dim);
  LabeledDataset ds;
  ds.samples.reserve(count);
  ds.labels.reserve(count);
  int max_label = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    images.read(reinterpret_cast<char*>(pixel_buf.data()),
                static_cast<std::streamsize>(dim));
    if (!images)
      throw ValidationError("truncated IDX image payload: " + images_path);
    std::vector<double> x(dim);
    for (std::size_t j = 0; j < dim; ++j) x[j] = pixel_buf[j] / 255.0;
    ds.samples.push_back(std::move(x));

    char raw = 0;
    labels.read(&raw, 1);
    if (!labels)
      throw ValidationError("truncated IDX label payload: " + labels_path);
    const int label = static_cast<unsigned char>(raw);
    max_label = std::max(max_label, label);
    ds.labels.push_back(label);
  }
  ds.label_count = max_label + 1;
  validate(ds);
  return ds;
}

std::vector<LabeledDataset> shard(const LabeledDataset& ds, int workers,
                                  const ShardPlan& plan) {
  validate(ds);
  if (workers <= 0) throw ValidationError("worker count must be positive");

  auto by_label = indices_by_label(ds);
  SplitRng base(plan.seed);
  for (int label = 0; label < ds.label_count; ++label) {
    SplitRng rng = base.child("shard-pool", label);
    rng.shuffle(by_label[label]);
  }

  std::vector<LabeledDataset> shards(workers);
  for (auto& s : shards) s.label_count = ds.label_count;

  if (plan.mode == ShardPlan::Mode::kIid) {
    for (int label = 0; label < ds.label_count; ++label) {
      const auto& pool = by_label[label];
      const std::size_t base_count = pool.size() / workers;
      const std::size_t remainder = pool.size() % workers;
      std::size_t cursor = 0;
      for (int w = 0; w < workers; ++w) {
        const std::size_t take = base_count + (static_cast<std::size_t>(w) < remainder);
        for (std::size_t k = 0; k < take; ++k)
          append_sample(shards[w], ds, pool[cursor++]);
      }
    }
    return shards;
  }

  // Non-IID: resolve the per-worker count matrix.
  std::vector<std::vector<int>> counts;
  if (plan.per_worker_counts) {
    counts = *plan.per_worker_counts;
    if (static_cast<int>(counts.size()) != workers)
      throw ValidationError("per_worker_counts rows (" +
                            std::to_string(counts.size()) +
                            ") do not match worker count");
    for (const auto& row : counts) {
      if (static_cast<int>(row.size()) != ds.label_count)
        throw ValidationError("per_worker_counts columns do not match label count");
      for (int v : row)
        if (v < 0) throw ValidationError("per_worker_counts entries must be >= 0");
    }
  } else {
    if (ds.label_count != 10)
      throw ValidationError(
          "default non-IID recipe needs 10 labels; pass per_worker_counts for " +
          std::to_string(ds.label_count) + " labels");
    counts.assign(workers, std::vector<int>(10, 62));
    for (int w = 0; w < workers; ++w) {
      SplitRng rng = base.child("non-iid-labels", w);
      const int first = static_cast<int>(rng.next_below(10));
      int second = static_cast<int>(rng.next_below(9));
      if (second >= first) ++second;
      counts[w][first] = 2;
      counts[w][second] = 2;
    }
  }

  // Feasibility before any allocation.
  for (int label = 0; label < ds.label_count; ++label) {
    long need = 0;
    for (int w = 0; w < workers; ++w) need += counts[w][label];
    const long have = static_cast<long>(by_label[label].size());
    if (need > have)
      throw ValidationError("shard plan infeasible for label " +
                            std::to_string(label) + ": needs " +
                            std::to_string(need) + " samples, dataset has " +
                            std::to_string(have));
  }

  std::vector<std::size_t> cursors(ds.label_count, 0);
  for (int w = 0; w < workers; ++w)
    for (int label = 0; label < ds.label_count; ++label)
      for (int k = 0; k < counts[w][label]; ++k)
        append_sample(shards[w], ds, by_label[label][cursors[label]++]);
  return shards;
}

std::pair<LabeledDataset, LabeledDataset> split_holdout(const LabeledDataset& ds,
                                                        double holdout_fraction,
                                                        std::uint64_t seed) {
  validate(ds);
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
    throw ValidationError("holdout fraction must be in [0, 1)");
  auto by_label = indices_by_label(ds);
  SplitRng base(seed);

  LabeledDataset train, test;
  train.label_count = test.label_count = ds.label_count;
  for (int label = 0; label < ds.label_count; ++label) {
    SplitRng rng = base.child("holdout", label);
    auto& pool = by_label[label];
    rng.shuffle(pool);
    const std::size_t holdout =
        static_cast<std::size_t>(holdout_fraction * static_cast<double>(pool.size()));
    for (std::size_t k = 0; k < pool.size(); ++k)
      append_sample(k < holdout ? test : train, ds, pool[k]);
  }
  return {std::move(train), std::move(test)};
}

void export_csv(const LabeledDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open CSV for writing: " + path);
  char buf[64];
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    for (double v : ds.samples[i]) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out << buf << ',';
    }
    out << ds.labels[i] << '\n';
  }
}

std::uint64_t dataset_hash(const LabeledDataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_bytes = [&h](const void* data, std::size_t size) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    mix_bytes(ds.samples[i].data(), ds.samples[i].size() * sizeof(double));
    mix_bytes(&ds.labels[i], sizeof(int));
  }
  mix_bytes(&ds.label_count, sizeof(int));
  return h;
}

}  // namespace fdsim
