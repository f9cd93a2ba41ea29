#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fingerlab/classify.hpp"
#include "fingerlab/datakit.hpp"
#include "fingerlab/encoder.hpp"

namespace fingerlab {

enum class ClassifierKind { kUnigram, kEncoder };
std::string_view classifier_name(ClassifierKind k);
ClassifierKind parse_classifier(std::string_view name);

struct ClassifierOptions {
  LinearOptions linear;
  EncoderConfig encoder;
  std::size_t val_size = 500;
  std::size_t test_size = 500;
  // Training samples kept per class; 0 keeps the whole train split.
  std::int64_t train_per_class = 0;
  int top_k = 10;
};

struct SeedResult {
  std::uint64_t split_seed = 0;
  double accuracy = 0;
  std::int64_t n_test = 0;
  std::int64_t n_train = 0;
  std::vector<std::vector<std::int64_t>> confusion;
  // Unigram only: class name -> ranked features.
  std::map<std::string, std::vector<RankedFeature>> top_features;
};

// Re-splits `dataset` with split_seed, fits one classifier on train (and val
// for the encoder) and scores it on test.
SeedResult run_split(const AttributionDataset& dataset, ClassifierKind kind,
                     std::uint64_t split_seed, const ClassifierOptions& options,
                     const TokenizerModel& tokenizer);

struct AttributionReport {
  std::string setting;
  std::string classifier;
  std::vector<std::string> class_names;
  std::vector<std::uint64_t> split_seeds;
  std::vector<double> accuracies;
  double mean = 0;
  double std = 0;
  double chance_rate = 0;
  double p_value = 1;
  std::int64_t n_test = 0;   // per split seed
  std::int64_t n_train = 0;  // per split seed
  std::vector<std::vector<std::int64_t>> confusion;  // summed over seeds
  std::map<std::string, std::vector<RankedFeature>> top_features;  // first seed
};

AttributionReport summarize(std::string setting, ClassifierKind kind,
                            const std::vector<std::string>& class_names,
                            std::span<const SeedResult> results);

// Requires at least two split seeds.
AttributionReport repeated_eval(const AttributionDataset& dataset, ClassifierKind kind,
                                std::span<const std::uint64_t> split_seeds,
                                const ClassifierOptions& options, const TokenizerModel& tokenizer,
                                std::string setting = "");

// Labels permuted uniformly at random across samples: the negative control.
AttributionDataset shuffle_labels(const AttributionDataset& dataset, std::uint64_t seed);

}  // namespace fingerlab
