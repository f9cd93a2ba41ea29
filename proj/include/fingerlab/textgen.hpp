#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fingerlab/lm.hpp"
#include "fingerlab/rng.hpp"
#include "fingerlab/tokenizer.hpp"

namespace fingerlab {

// First n Unicode scalar values of `text`, or nullopt when it has fewer.
// Invalid UTF-8 bytes count as one scalar each.
std::optional<std::string> utf8_prefix(std::string_view text, int n_chars);
std::size_t utf8_length(std::string_view text);

// Picks n_prompts documents without replacement among those with at least
// prefix_chars characters and returns their prefixes, in draw order.
std::vector<std::string> extract_prompts(std::span<const std::string> documents,
                                         int prefix_chars, int n_prompts,
                                         std::uint64_t seed);

// One draw from softmax(logits) computed in double precision.
TokenId sample_from_logits(std::span<const float> logits, Rng& rng);

// Ancestral sampling at temperature 1. Feeds `context`, then samples until a
// special token (>= stop_from) is drawn, max_new_tokens are produced, or the
// model context is full. The stop token is not returned.
std::vector<TokenId> sample_tokens(const LMParams& params, std::span<const TokenId> context,
                                   int max_new_tokens, TokenId stop_from, Rng& rng);

struct FilterOptions {
  int n = 5;
  int threshold = 8;
  bool continuation_only = false;
  bool word_level = false;
};

// True iff some contiguous n-gram occurs at least `threshold` times
// (overlapping occurrences count).
bool is_degenerate(std::span<const TokenId> tokens, int n = 5, int threshold = 8);
// Whitespace-separated words instead of token ids.
bool is_degenerate_words(std::string_view text, int n = 5, int threshold = 8);

struct GenerationOptions {
  int max_new_tokens = 512;
  FilterOptions filter;
};

struct LabeledModel {
  std::string model_id;
  const Checkpoint* checkpoint = nullptr;
};

struct GeneratedSample {
  std::string model_id;
  int label = 0;  // index of the model in the generation call
  std::int64_t prompt_index = 0;
  std::string prompt;
  std::string continuation;
  std::string full_text;
  std::vector<TokenId> prompt_tokens;
  std::vector<TokenId> continuation_tokens;
  bool dropped = false;
  std::string drop_reason;  // empty or "repeated_ngram"

  std::vector<TokenId> full_tokens() const;
  bool operator==(const GeneratedSample&) const = default;
};

struct ModelGenerationStats {
  std::string model_id;
  std::int64_t generated = 0;
  std::int64_t dropped = 0;
};

struct GeneratedCorpus {
  std::vector<GeneratedSample> samples;  // prompt-major, model-minor, dropped ones included
  std::vector<ModelGenerationStats> stats;
  std::uint64_t gen_seed = 0;
  std::uint64_t tokenizer_hash = 0;

  std::vector<const GeneratedSample*> kept() const;
};

// Re-applies the filter to a stored sample.
bool filter_drops(const GeneratedSample& sample, const FilterOptions& filter);

// The sampling stream is keyed by (gen_seed, model_id, prompt_index), so any
// single sample can be regenerated in isolation.
GeneratedSample generate_sample(const LabeledModel& model, int label,
                                const TokenizerModel& tokenizer, const std::string& prompt,
                                std::int64_t prompt_index, std::uint64_t gen_seed,
                                const GenerationOptions& options = {});

GeneratedCorpus generate_corpus(std::span<const LabeledModel> models,
                                const TokenizerModel& tokenizer,
                                std::span<const std::string> prompts, std::uint64_t gen_seed,
                                const GenerationOptions& options = {});

// Regenerates every k-th sample and compares it bitwise with the stored one.
// Returns the number of mismatches.
std::int64_t audit_labels(const GeneratedCorpus& corpus, std::span<const LabeledModel> models,
                          const TokenizerModel& tokenizer, std::span<const std::string> prompts,
                          const GenerationOptions& options, std::int64_t every = 100);

// Writes samples_<model_id>.jsonl per model plus samples.jsonl with all of
// them, and generation.json with the per-model counts.
void save_generated(const std::filesystem::path& dir, const GeneratedCorpus& corpus);
GeneratedCorpus load_generated(const std::filesystem::path& dir);

}  // namespace fingerlab
