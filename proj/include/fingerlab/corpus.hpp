#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fingerlab/trainer.hpp"

namespace fingerlab {

struct Document {
  std::string text;
  int topic = 0;  // -1 when unknown
};

// One document per non-empty line, or for *.jsonl files one object per line
// with a "text" field and an optional integer "topic".
std::vector<Document> load_documents(const std::filesystem::path& path);
void save_documents(const std::filesystem::path& path, const std::vector<Document>& docs);

std::vector<std::string> texts_of(const std::vector<Document>& docs);

struct SynthOptions {
  int n_docs = 20000;
  int n_topics = 8;  // at most 8
  int min_sentences = 2;
  int max_sentences = 6;
  std::uint64_t seed = 1;
};

// Deterministic English-like documents. Each document draws its content
// words from one topic lexicon with Zipfian frequencies, so the corpus has
// learnable structure and topic slices with distinct vocabularies.
std::vector<Document> synthetic_corpus(const SynthOptions& options);

// Short instruction/response pairs drawn from the same topic lexicons.
std::vector<SftExample> synthetic_instructions(int n, int n_topics, std::uint64_t seed);

// JSONL with {"prompt", "response"} or {"instruction", "input", "output"}.
std::vector<SftExample> load_sft_examples(const std::filesystem::path& path);
void save_sft_examples(const std::filesystem::path& path, const std::vector<SftExample>& examples);

}  // namespace fingerlab
