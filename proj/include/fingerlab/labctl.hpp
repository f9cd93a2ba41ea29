#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fingerlab/attribution.hpp"
#include "fingerlab/corpus.hpp"
#include "fingerlab/datakit.hpp"
#include "fingerlab/textgen.hpp"
#include "fingerlab/trainer.hpp"
#include "json.hpp"

namespace fingerlab {

enum class SettingKind {
  kDifferentCorpora,
  kDifferentSizes,
  kHyperparamGrid,
  kOrderAndInit,
  kOrderOnly,
  kInitOnly,
  kCheckpointCurve,
  kSftOrder,
  kSftInit,
};
std::string_view setting_name(SettingKind k);
SettingKind parse_setting(std::string_view name);

struct CorpusSource {
  std::optional<std::filesystem::path> path;  // otherwise synthetic
  SynthOptions synthetic;
};

struct SftSource {
  std::optional<std::filesystem::path> path;  // otherwise synthetic
  int synthetic_n = 2000;
  std::uint64_t synthetic_seed = 1;
};

struct FamilyMember {
  std::string model_id;
  nlohmann::json pretrain_delta = nlohmann::json::object();  // merge patch on `base`
  nlohmann::json finetune_delta = nlohmann::json::object();  // merge patch on `sft_run`
  std::vector<int> topics;  // different_corpora only

  // Resolved by load_spec / resolve_spec.
  TrainRun pretrain;
  std::optional<TrainRun> finetune;
};

struct ExperimentSpec {
  std::string name;
  SettingKind setting = SettingKind::kOrderOnly;
  SettingKind curve_of = SettingKind::kOrderOnly;  // checkpoint_curve only
  CorpusSource corpus;
  std::int64_t heldout_docs = 500;
  int vocab_size = 512;
  TrainRun base;
  std::optional<TrainRun> sft_run;
  SftSource sft_data;
  std::vector<FamilyMember> family;

  int prompts_per_model = 5000;
  int prefix_chars = 50;
  std::uint64_t prompt_seed = 0;
  std::uint64_t gen_seed = 0;
  GenerationOptions generation;

  DedupOptions dedup;
  bool dedup_enabled = true;
  std::size_t val_size = 500;
  std::size_t test_size = 500;

  std::vector<ClassifierKind> classifiers{ClassifierKind::kUnigram};
  LinearOptions linear;
  EncoderConfig encoder;
  int top_k = 10;
  std::vector<std::uint64_t> split_seeds{0, 1, 2};
  std::vector<std::int64_t> train_sizes;  // per model; empty = no sweep
  double parity_band = 0.10;

  int family_size() const { return static_cast<int>(family.size()); }
};

// Parses, resolves member TrainRuns and validates. Errors are ConfigError
// naming the field and the violated constraint. Relative corpus paths are
// resolved against `base_dir`.
ExperimentSpec parse_spec(const nlohmann::json& j, const std::filesystem::path& base_dir = ".");
ExperimentSpec load_spec(const std::filesystem::path& path);
nlohmann::json spec_to_json(const ExperimentSpec& spec);
// Recomputes member runs from base + deltas and checks factor isolation.
void resolve_spec(ExperimentSpec& spec);

// Flattened JSON paths ("peak_lr", "lm_config/d_model") at which two
// serialized runs differ.
std::vector<std::string> run_diff(const TrainRun& a, const TrainRun& b);

// Content-addressed stage outputs under <root>/<stage>/<key>/. A stage
// directory appears atomically once its producer finishes.
class StageCache {
 public:
  explicit StageCache(std::filesystem::path root);
  // FINGERLAB_CACHE, else ./.fingerlab_cache
  static std::filesystem::path default_root();

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path dir(const std::string& stage, std::uint64_t key) const;
  bool has(const std::string& stage, std::uint64_t key) const;
  // Runs `produce` into a scratch directory and publishes it, unless the
  // entry already exists. Counts hits and misses per stage.
  template <typename F>
  std::filesystem::path get_or_make(const std::string& stage, std::uint64_t key, F&& produce) {
    if (has(stage, key)) {
      ++hits_[stage];
      return dir(stage, key);
    }
    ++misses_[stage];
    const auto scratch = begin(stage, key);
    try {
      produce(scratch);
    } catch (...) {
      discard(scratch);
      throw;
    }
    return publish(stage, key, scratch);
  }
  const std::map<std::string, std::int64_t>& hits() const { return hits_; }
  const std::map<std::string, std::int64_t>& misses() const { return misses_; }

 private:
  std::filesystem::path begin(const std::string& stage, std::uint64_t key);
  std::filesystem::path publish(const std::string& stage, std::uint64_t key,
                                const std::filesystem::path& scratch);
  static void discard(const std::filesystem::path& scratch);
  std::filesystem::path root_;
  std::map<std::string, std::int64_t> hits_, misses_;
};

struct SeriesPoint {
  std::int64_t x = 0;       // samples per model, or training step
  std::int64_t tokens = 0;  // training tokens seen (checkpoint series)
  double mean = 0;
  double std = 0;
  double p_value = 1;
  std::int64_t n_test = 0;
};

struct Series {
  std::string kind;  // "train_size" or "checkpoint"
  std::string classifier;
  std::vector<SeriesPoint> points;
};

struct StageFailure {
  std::string stage;
  std::string message;
};

struct ParityCheck {
  std::map<std::string, double> perplexity;  // model_id -> held-out perplexity
  double band = 0.1;
  double spread = 0;  // (max - min) / min
  bool ok = true;
};

struct ReportBundle {
  std::string name;
  std::string setting;
  int n_classes = 0;
  std::vector<std::string> class_names;
  std::vector<AttributionReport> reports;
  std::vector<Series> series;
  ParityCheck parity;
  nlohmann::json provenance = nlohmann::json::object();
  nlohmann::json dataset = nlohmann::json::object();  // dedup / generation summary
  std::vector<StageFailure> failures;
  std::map<std::string, std::int64_t> cache_hits, cache_misses;
  std::vector<std::string> notes;

  bool partial() const { return !failures.empty(); }
  double chance_rate() const { return n_classes > 0 ? 1.0 / n_classes : 0.0; }
};

struct RunOptions {
  std::filesystem::path cache_root = StageCache::default_root();
};

ReportBundle run_experiment(const ExperimentSpec& spec, const RunOptions& options = {});

// One (size, mean, std) point per size for which every class has enough
// training samples; sizes that do not fit are skipped with a warning.
Series sweep_train_size(const AttributionDataset& dataset, ClassifierKind kind,
                        std::span<const std::int64_t> sizes, std::span<const std::uint64_t> split_seeds,
                        const ClassifierOptions& options, const TokenizerModel& tokenizer,
                        std::vector<std::string>* notes = nullptr);

void to_json(nlohmann::json& j, const SeedResult& r);
void from_json(const nlohmann::json& j, SeedResult& r);
void to_json(nlohmann::json& j, const AttributionReport& r);
void from_json(const nlohmann::json& j, AttributionReport& r);

nlohmann::json bundle_to_json(const ReportBundle& bundle);
ReportBundle bundle_from_json(const nlohmann::json& j);

// report.json, summary.csv, summary.txt and series_<kind>_<classifier>.csv.
void emit_reports(const ReportBundle& bundle, const std::filesystem::path& out_dir);
std::string summary_text(const ReportBundle& bundle);

}  // namespace fingerlab
