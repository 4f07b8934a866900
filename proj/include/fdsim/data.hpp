#pragma once

// Dataset generation, IDX ingestion, and federated sharding.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fdsim {

struct LabeledDataset {
  std::vector<std::vector<double>> samples;
  std::vector<int> labels;
  int label_count = 0;

  std::size_t size() const { return samples.size(); }
  int dim() const { return samples.empty() ? 0 : static_cast<int>(samples[0].size()); }
};

void validate(const LabeledDataset& ds);

struct ShardPlan {
  enum class Mode { kIid, kNonIid };
  Mode mode = Mode::kIid;
  std::uint64_t seed = 0;
  // Non-IID: explicit per-worker label counts, counts[worker][label]. When
  // absent, the default 10-label recipe is used: two seed-selected labels get
  // 2 samples each, the remaining eight get 62 each (500 per worker).
  std::optional<std::vector<std::vector<int>>> per_worker_counts;
};

// One Gaussian cluster per class: means drawn once from the seed (standard
// normal), spread 0.3 around them. Samples are laid out class-major.
LabeledDataset synth_classification(int classes, int per_class, int dim,
                                    std::uint64_t seed);

// IDX files, big-endian headers: magic 0x00000803 (images), 0x00000801
// (labels). Pixels scaled to [0, 1].
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path);

// Disjoint shards; IID splits every label uniformly, non-IID follows the plan.
std::vector<LabeledDataset> shard(const LabeledDataset& ds, int workers,
                                  const ShardPlan& plan);

// Deterministic stratified split: `holdout_fraction` of each label goes to
// the second dataset (the test split).
std::pair<LabeledDataset, LabeledDataset> split_holdout(const LabeledDataset& ds,
                                                        double holdout_fraction,
                                                        std::uint64_t seed);

// One row per sample, label last.
void export_csv(const LabeledDataset& ds, const std::string& path);

// FNV-1a over the sample bytes and labels; manifests record it so paired
// experiments can prove they saw the same data.
std::uint64_t dataset_hash(const LabeledDataset& ds);

}  // namespace fdsim
