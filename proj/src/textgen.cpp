#include "fingerlab/textgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <unordered_map>

#include "fingerlab/error.hpp"
#include "fingerlab/io.hpp"
#include "fingerlab/rng.hpp"
#include "json.hpp"

namespace fingerlab {

namespace {

// Length of the UTF-8 sequence starting at s[i], or 1 if it is malformed.
std::size_t scalar_width(std::string_view s, std::size_t i) {
  const auto b = static_cast<unsigned char>(s[i]);
  std::size_t n = b < 0x80 ? 1 : (b >> 5) == 0x6 ? 2 : (b >> 4) == 0xE ? 3 : (b >> 3) == 0x1E ? 4 : 0;
  if (n == 0 || i + n > s.size()) return 1;
  for (std::size_t k = 1; k < n; ++k) {
    if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return 1;
  }
  return n;
}

std::uint64_t ngram_key(std::span<const TokenId> g) {
  Fnv1a h;
  for (TokenId t : g) h.update_pod(t);
  return h.digest();
}

}  // namespace

std::optional<std::string> utf8_prefix(std::string_view text, int n_chars) {
  std::size_t i = 0;
  for (int c = 0; c < n_chars; ++c) {
    if (i >= text.size()) return std::nullopt;
    i += scalar_width(text, i);
  }
  return std::string(text.substr(0, i));
}

std::size_t utf8_length(std::string_view text) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < text.size(); i += scalar_width(text, i)) ++n;
  return n;
}

std::vector<std::string> extract_prompts(std::span<const std::string> documents,
                                         int prefix_chars, int n_prompts,
                                         std::uint64_t seed) {
  if (prefix_chars <= 0 || n_prompts < 0) throw ConfigError("extract_prompts: bad sizes");
  std::vector<std::uint32_t> eligible;
  for (std::size_t i = 0; i < documents.size(); ++i) {
    if (utf8_length(documents[i]) >= static_cast<std::size_t>(prefix_chars)) {
      eligible.push_back(static_cast<std::uint32_t>(i));
    }
  }
  if (eligible.size() < static_cast<std::size_t>(n_prompts)) {
    throw DataError("extract_prompts: need " + std::to_string(n_prompts) +
                    " documents of at least " + std::to_string(prefix_chars) +
                    " characters, found " + std::to_string(eligible.size()) + " (short by " +
                    std::to_string(n_prompts - static_cast<std::int64_t>(eligible.size())) + ")");
  }
  // Partial Fisher-Yates: the first n_prompts slots are a uniform draw
  // without replacement.
  Rng rng("textgen.prompts", {seed});
  std::vector<std::string> out;
  out.reserve(n_prompts);
  for (int k = 0; k < n_prompts; ++k) {
    const std::size_t j = k + rng.below(eligible.size() - k);
    std::swap(eligible[k], eligible[j]);
    out.push_back(*utf8_prefix(documents[eligible[k]], prefix_chars));
  }
  return out;
}

TokenId sample_from_logits(std::span<const float> logits, Rng& rng) {
  double mx = -INFINITY;
  for (float v : logits) mx = std::max(mx, double(v));
  if (!std::isfinite(mx)) throw NumericError("sampling from non-finite logits");
  thread_local std::vector<double> w;
  w.resize(logits.size());
  double total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += w[i] = std::exp(double(logits[i]) - mx);
  const double u = rng.uniform() * total;
  double acc = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (u < acc) return static_cast<TokenId>(i);
  }
  // u landed in the rounding gap at the top; take the last non-zero entry.
  for (std::size_t i = w.size(); i-- > 0;) {
    if (w[i] > 0) return static_cast<TokenId>(i);
  }
  return 0;
}

std::vector<TokenId> sample_tokens(const LMParams& params, std::span<const TokenId> context,
                                   int max_new_tokens, TokenId stop_from, Rng& rng) {
  if (context.empty()) throw DataError("sample_tokens: empty context");
  if (static_cast<int>(context.size()) > params.config.max_seq_len) {
    throw DataError("sample_tokens: context of " + std::to_string(context.size()) +
                    " tokens exceeds max_seq_len " + std::to_string(params.config.max_seq_len));
  }
  IncrementalDecoder<float> dec(params);
  std::span<const float> logits;
  for (TokenId t : context) logits = dec.push(t);
  std::vector<TokenId> out;
  while (static_cast<int>(out.size()) < max_new_tokens) {
    const TokenId next = sample_from_logits(logits, rng);
    if (stop_from >= 0 && next >= stop_from) break;
    out.push_back(next);
    if (dec.position() >= params.config.max_seq_len) break;
    logits = dec.push(next);
  }
  return out;
}

bool is_degenerate(std::span<const TokenId> tokens, int n, int threshold) {
  if (n <= 0 || threshold <= 0) throw ConfigError("is_degenerate: n and threshold must be positive");
  if (tokens.size() < static_cast<std::size_t>(n)) return false;
  std::unordered_map<std::uint64_t, int> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    if (++counts[ngram_key(tokens.subspan(i, n))] >= threshold) return true;
  }
  return false;
}

bool is_degenerate_words(std::string_view text, int n, int threshold) {
  std::vector<TokenId> ids;
  std::unordered_map<std::string_view, TokenId> vocab;
  std::size_t i = 0;
  auto space = [](char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; };
  while (i < text.size()) {
    while (i < text.size() && space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !space(text[i])) ++i;
    if (i > start) {
      const auto [it, _] = vocab.emplace(text.substr(start, i - start), static_cast<TokenId>(vocab.size()));
      ids.push_back(it->second);
    }
  }
  return is_degenerate(ids, n, threshold);
}

std::vector<TokenId> GeneratedSample::full_tokens() const {
  std::vector<TokenId> all = prompt_tokens;
  all.insert(all.end(), continuation_tokens.begin(), continuation_tokens.end());
  return all;
}

std::vector<const GeneratedSample*> GeneratedCorpus::kept() const {
  std::vector<const GeneratedSample*> out;
  for (const auto& s : samples) {
    if (!s.dropped) out.push_back(&s);
  }
  return out;
}

bool filter_drops(const GeneratedSample& s, const FilterOptions& f) {
  if (f.word_level) {
    return is_degenerate_words(f.continuation_only ? s.continuation : s.full_text, f.n, f.threshold);
  }
  if (f.continuation_only) return is_degenerate(s.continuation_tokens, f.n, f.threshold);
  return is_degenerate(s.full_tokens(), f.n, f.threshold);
}

GeneratedSample generate_sample(const LabeledModel& model, int label,
                                const TokenizerModel& tokenizer, const std::string& prompt,
                                std::int64_t prompt_index, std::uint64_t gen_seed,
                                const GenerationOptions& options) {
  const LMParams& params = model.checkpoint->params;
  GeneratedSample s;
  s.model_id = model.model_id;
  s.label = label;
  s.prompt_index = prompt_index;
  s.prompt = prompt;
  s.prompt_tokens = tokenizer.encode(prompt);
  if (static_cast<int>(s.prompt_tokens.size()) + 1 >= params.config.max_seq_len) {
    throw DataError("prompt " + std::to_string(prompt_index) + " encodes to " +
                    std::to_string(s.prompt_tokens.size()) + " tokens; max_seq_len is " +
                    std::to_string(params.config.max_seq_len));
  }
  std::vector<TokenId> context{tokenizer.bos()};
  context.insert(context.end(), s.prompt_tokens.begin(), s.prompt_tokens.end());
  Rng rng("textgen.sample", {gen_seed, fnv1a(model.model_id), static_cast<std::uint64_t>(prompt_index)});
  s.continuation_tokens =
      sample_tokens(params, context, options.max_new_tokens, tokenizer.vocab_size(), rng);
  s.continuation = tokenizer.decode(s.continuation_tokens);
  s.full_text = s.prompt + s.continuation;
  if (filter_drops(s, options.filter)) {
    s.dropped = true;
    s.drop_reason = "repeated_ngram";
  }
  return s;
}

namespace {

void check_models(std::span<const LabeledModel> models, const TokenizerModel& tokenizer) {
  if (models.size() < 2) throw ConfigError("generation needs at least 2 models");
  std::map<std::string, int> seen;
  for (const auto& m : models) {
    if (!m.checkpoint) throw ConfigError("model " + m.model_id + " has no checkpoint");
    if (m.model_id.empty()) throw ConfigError("empty model_id");
    if (++seen[m.model_id] > 1) throw ConfigError("duplicate model_id " + m.model_id);
    if (m.checkpoint->tokenizer_hash != tokenizer.fingerprint()) {
      throw ConfigError("model " + m.model_id + " was trained with tokenizer " +
                        hex64(m.checkpoint->tokenizer_hash) + ", expected " +
                        hex64(tokenizer.fingerprint()));
    }
    if (m.checkpoint->config().vocab_size != tokenizer.n_tokens()) {
      throw ConfigError("model " + m.model_id + " vocab_size does not match the tokenizer");
    }
  }
}

}  // namespace

GeneratedCorpus generate_corpus(std::span<const LabeledModel> models,
                                const TokenizerModel& tokenizer,
                                std::span<const std::string> prompts, std::uint64_t gen_seed,
                                const GenerationOptions& options) {
  check_models(models, tokenizer);
  GeneratedCorpus out;
  out.gen_seed = gen_seed;
  out.tokenizer_hash = tokenizer.fingerprint();
  for (const auto& m : models) out.stats.push_back({m.model_id, 0, 0});
  out.samples.reserve(prompts.size() * models.size());
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    for (std::size_t j = 0; j < models.size(); ++j) {
      auto s = generate_sample(models[j], static_cast<int>(j), tokenizer, prompts[p],
                               static_cast<std::int64_t>(p), gen_seed, options);
      ++out.stats[j].generated;
      out.stats[j].dropped += s.dropped;
      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

std::int64_t audit_labels(const GeneratedCorpus& corpus, std::span<const LabeledModel> models,
                          const TokenizerModel& tokenizer, std::span<const std::string> prompts,
                          const GenerationOptions& options, std::int64_t every) {
  if (every <= 0) throw ConfigError("audit_labels: every must be positive");
  std::int64_t mismatches = 0;
  for (std::size_t i = 0; i < corpus.samples.size(); i += every) {
    const auto& s = corpus.samples[i];
    const auto it = std::find_if(models.begin(), models.end(),
                                 [&](const LabeledModel& m) { return m.model_id == s.model_id; });
    if (it == models.end()) {
      ++mismatches;
      continue;
    }
    const auto again = generate_sample(*it, s.label, tokenizer, prompts[s.prompt_index],
                                       s.prompt_index, corpus.gen_seed, options);
    mismatches += !(again == s);
  }
  return mismatches;
}

namespace {

using nlohmann::json;

json sample_json(const GeneratedSample& s) {
  return {{"model_id", s.model_id},
          {"label", s.label},
          {"prompt_index", s.prompt_index},
          {"prompt", s.prompt},
          {"continuation", s.continuation},
          {"full_text", s.full_text},
          {"prompt_tokens", s.prompt_tokens},
          {"continuation_tokens", s.continuation_tokens},
          {"dropped", s.dropped},
          {"drop_reason", s.drop_reason}};
}

std::string dump_line(const json& j) {
  return j.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
}

}  // namespace

void save_generated(const std::filesystem::path& dir, const GeneratedCorpus& corpus) {
  std::string all;
  std::map<std::string, std::string> per_model;
  for (const auto& s : corpus.samples) {
    const auto line = dump_line(sample_json(s));
    all += line;
    per_model[s.model_id] += line;
  }
  write_file_atomic(dir / "samples.jsonl", all);
  for (const auto& [id, text] : per_model) write_file_atomic(dir / ("samples_" + id + ".jsonl"), text);
  json meta = {{"gen_seed", corpus.gen_seed},
               {"tokenizer_hash", hex64(corpus.tokenizer_hash)},
               {"models", json::array()}};
  for (const auto& st : corpus.stats) {
    meta["models"].push_back({{"model_id", st.model_id}, {"generated", st.generated}, {"dropped", st.dropped}});
  }
  write_file_atomic(dir / "generation.json", meta.dump(2) + "\n");
}

GeneratedCorpus load_generated(const std::filesystem::path& dir) {
  GeneratedCorpus out;
  try {
    const json meta = json::parse(read_file(dir / "generation.json"));
    out.gen_seed = meta.at("gen_seed").get<std::uint64_t>();
    out.tokenizer_hash = std::stoull(meta.at("tokenizer_hash").get<std::string>(), nullptr, 16);
    for (const auto& m : meta.at("models")) {
      out.stats.push_back({m.at("model_id"), m.at("generated"), m.at("dropped")});
    }
    std::ifstream in(dir / "samples.jsonl", std::ios::binary);
    if (!in) throw IoError("cannot open " + (dir / "samples.jsonl").string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      GeneratedSample s;
      s.model_id = j.at("model_id");
      s.label = j.at("label");
      s.prompt_index = j.at("prompt_index");
      s.prompt = j.at("prompt");
      s.continuation = j.at("continuation");
      s.full_text = j.at("full_text");
      s.prompt_tokens = j.at("prompt_tokens").get<std::vector<TokenId>>();
      s.continuation_tokens = j.at("continuation_tokens").get<std::vector<TokenId>>();
      s.dropped = j.at("dropped");
      s.drop_reason = j.at("drop_reason");
      out.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw DataError("malformed generated corpus in " + dir.string() + ": " + e.what());
  }
  return out;
}

}  // namespace fingerlab
