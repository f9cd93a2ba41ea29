#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fingerlab/textgen.hpp"

namespace fingerlab {

// Hashed character n-gram term-frequency vector, L2-normalized. Empty text
// yields a zero vector flagged always_unique.
struct DedupEmbedding {
  std::vector<float> values;
  bool always_unique = false;
};

struct EmbeddingOptions {
  int dim = 2048;
  int min_n = 3;
  int max_n = 5;
};

DedupEmbedding embed_for_dedup(std::string_view text, const EmbeddingOptions& options = {});
double cosine_similarity(const DedupEmbedding& a, const DedupEmbedding& b);

struct DedupOptions {
  double eps = 0.2;    // cosine distance below which two texts are duplicates
  int k_clusters = 0;  // 0 means ceil(sqrt(n))
  int max_iters = 20;
  std::uint64_t seed = 0;
  EmbeddingOptions embedding;
};

struct DedupResult {
  std::vector<bool> retained;
  std::vector<std::int64_t> removed_by;  // index of the retained twin, or -1
  std::vector<int> cluster;
  int k_used = 0;
  bool k_clamped = false;
  std::int64_t removed() const;
};

// Spherical k-means over the embeddings, then within each cluster a sample
// is removed when it lies closer than eps to an earlier retained member.
DedupResult semantic_dedup(std::span<const std::string> texts, const DedupOptions& options = {});
// Same rule with a single cluster: O(n^2) comparisons.
DedupResult all_pairs_dedup(std::span<const std::string> texts, const DedupOptions& options = {});

enum class Split : std::uint8_t { kTrain, kVal, kTest };
std::string_view split_name(Split s);
Split parse_split(std::string_view name);

// Uniform random assignment: after a seeded shuffle the first test_size
// items are test, the next val_size are validation, the rest train.
std::vector<Split> assign_splits(std::size_t n, std::uint64_t split_seed, std::size_t val_size,
                                 std::size_t test_size);

struct AttributionSample {
  std::int64_t id = 0;  // index in the generated corpus
  std::string text;
  int label = 0;
  std::string model_id;
  Split split = Split::kTrain;
};

struct AttributionDataset {
  std::vector<std::string> class_names;
  std::vector<AttributionSample> samples;  // retained samples only
  std::uint64_t split_seed = 0;

  int n_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<const AttributionSample*> of(Split s) const;
  std::vector<std::int64_t> class_counts(Split s) const;
  // Throws DataError unless there are >= 2 classes and each occurs in train.
  void validate() const;
};

struct RemovalReport {
  std::int64_t input_count = 0;
  std::int64_t removed_count = 0;
  double removed_fraction = 0;
  std::vector<std::int64_t> removed_per_class;
  std::vector<std::int64_t> retained_per_class;
  // Removals where clustered dedup and the all-pairs rule disagree; -1 when
  // the corpus was too large to run the all-pairs check.
  std::int64_t oracle_discrepancies = -1;
};

struct ManifestRecord {
  std::int64_t id = 0;
  std::string model_id;
  std::string split;  // "train" | "val" | "test" | "" when not retained
  bool retained = true;
  std::int64_t removed_by = -1;
  std::string reason;  // "", "repeated_ngram" or "near_duplicate"
};

struct DatasetOptions {
  bool dedup = true;
  DedupOptions dedup_options;
  std::size_t val_size = 0;
  std::size_t test_size = 0;
  std::uint64_t split_seed = 0;
  std::size_t oracle_check_limit = 2000;
};

struct DatasetBuild {
  AttributionDataset dataset;
  RemovalReport report;
  std::vector<ManifestRecord> manifest;
};

// Takes the samples that survived the generation filter, deduplicates them
// and splits the rest.
DatasetBuild build_dataset(const GeneratedCorpus& corpus, const DatasetOptions& options);
// Re-splits the retained samples of an existing build with another seed.
AttributionDataset resplit(const AttributionDataset& dataset, std::uint64_t split_seed,
                           std::size_t val_size, std::size_t test_size);

// dataset.jsonl, manifest.jsonl and dedup_report.json under `dir`.
void save_dataset(const std::filesystem::path& dir, const DatasetBuild& build);
AttributionDataset load_dataset(const std::filesystem::path& dir);

}  // namespace fingerlab
