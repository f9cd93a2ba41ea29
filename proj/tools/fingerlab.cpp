// fingerlab command line. Exit codes: 0 success, 1 user error (bad
// arguments, configuration or data), 2 internal error, 3 partial bundle.

#include <cstdio>
#include <iostream>
#include <map>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "fingerlab/attribution.hpp"
#include "fingerlab/corpus.hpp"
#include "fingerlab/datakit.hpp"
#include "fingerlab/error.hpp"
#include "fingerlab/io.hpp"
#include "fingerlab/labctl.hpp"
#include "fingerlab/serialization.hpp"
#include "fingerlab/textgen.hpp"
#include "fingerlab/tokenizer.hpp"
#include "fingerlab/trainer.hpp"

using namespace fingerlab;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kUserError = 1;
constexpr int kInternalError = 2;
constexpr int kPartial = 3;

// Above this many training tokens, `exp run` wants --accept-budget.
constexpr double kBudgetTokens = 5e7;

TrainRun load_run(const std::string& path) {
  if (path.empty()) return {};
  try {
    return json::parse(read_file(path)).get<TrainRun>();
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::vector<Document> load_corpus_arg(const std::string& path) {
  auto docs = load_documents(path);
  if (docs.empty()) throw DataError(path + ": no documents");
  return docs;
}

LabeledTexts split_texts(const AttributionDataset& ds, Split s) {
  LabeledTexts out;
  for (const auto* sample : ds.of(s)) {
    out.texts.push_back(sample->text);
    out.labels.push_back(sample->label);
  }
  return out;
}

void print_report(const AttributionReport& r) {
  std::printf("%s: %s %% over %zu split seeds, %lld test samples per seed, chance %.1f%%, p = %.3g\n",
              r.classifier.c_str(), format_mean_std({r.mean, r.std}).c_str(), r.split_seeds.size(),
              static_cast<long long>(r.n_test), r.chance_rate * 100.0, r.p_value);
}

struct Args {
  // shared
  std::string corpus, tokenizer, out, config, dataset, model_dir;
  int vocab_size = 512;
  // data synth
  int n_docs = 20000, n_topics = 8, n_instructions = 0;
  std::uint64_t seed = 1;
  // lm generate
  std::vector<std::string> models;
  int prompts = 5000, prefix_chars = 50, max_new_tokens = 512;
  std::uint64_t prompt_seed = 0, gen_seed = 0;
  bool continuation_only = false, word_level = false;
  // data build
  std::string generated;
  std::size_t val_size = 500, test_size = 500;
  std::uint64_t split_seed = 0;
  double eps = 0.2;
  bool no_dedup = false;
  // clf
  std::string kind = "unigram", encoder_config;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::int64_t train_per_class = 0;
  std::int64_t shuffle_seed = -1;
  int top_k = 10;
  // lm finetune
  std::string base, sft_data;
  // exp
  std::string spec, bundle, cache;
  bool accept_budget = false, dry_run = false;
};

int tok_train(const Args& a) {
  const auto docs = load_corpus_arg(a.corpus);
  const auto tok = train_bpe(texts_of(docs), a.vocab_size);
  tok.save(a.out);
  std::printf("tokenizer: %d merges, fingerprint %s -> %s\n", a.vocab_size - 256, hex64(tok.fingerprint()).c_str(),
              a.out.c_str());
  return kOk;
}

int data_synth(const Args& a) {
  if (a.n_instructions > 0) {
    save_sft_examples(a.out, synthetic_instructions(a.n_instructions, a.n_topics, a.seed));
    std::printf("%d instruction examples -> %s\n", a.n_instructions, a.out.c_str());
    return kOk;
  }
  SynthOptions o;
  o.n_docs = a.n_docs;
  o.n_topics = a.n_topics;
  o.seed = a.seed;
  save_documents(a.out, synthetic_corpus(o));
  std::printf("%d documents -> %s\n", a.n_docs, a.out.c_str());
  return kOk;
}

int lm_train(const Args& a) {
  const auto tok = TokenizerModel::load(a.tokenizer);
  auto run = load_run(a.config);
  run.lm_config.vocab_size = tok.n_tokens();
  const auto docs = load_corpus_arg(a.corpus);
  const auto packed = pack_documents(tok, texts_of(docs), run.lm_config.max_seq_len);
  TrainOptions opts;
  opts.run_dir = fs::path(a.out);
  opts.tokenizer_hash = tok.fingerprint();
  const auto ckpts = pretrain(run, packed, opts);
  std::printf("trained %lld steps; %zu checkpoints under %s/checkpoints\n",
              static_cast<long long>(run.total_steps), ckpts.size(), a.out.c_str());
  return kOk;
}

int lm_finetune(const Args& a) {
  const auto tok = TokenizerModel::load(a.tokenizer);
  const auto base = Checkpoint::load(a.base);
  if (base.tokenizer_hash != tok.fingerprint()) throw ConfigError("checkpoint was trained with another tokenizer");
  auto run = load_run(a.config);
  run.lm_config = base.config();
  const auto data = load_sft_examples(a.sft_data);
  TrainOptions opts;
  opts.run_dir = fs::path(a.out);
  opts.tokenizer_hash = tok.fingerprint();
  finetune(base, data, tok, run, opts);
  std::printf("fine-tuned %lld steps on %zu examples -> %s\n", static_cast<long long>(run.total_steps), data.size(),
              a.out.c_str());
  return kOk;
}

int lm_generate(const Args& a) {
  const auto tok = TokenizerModel::load(a.tokenizer);
  std::vector<Checkpoint> ckpts;
  std::vector<std::string> ids;
  for (const auto& m : a.models) {
    const auto eq = m.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--model expects ID=CHECKPOINT, got '" + m + "'");
    ids.push_back(m.substr(0, eq));
    ckpts.push_back(Checkpoint::load(m.substr(eq + 1)));
  }
  std::vector<LabeledModel> labeled;
  for (std::size_t i = 0; i < ckpts.size(); ++i) labeled.push_back({ids[i], &ckpts[i]});
  const auto docs = load_corpus_arg(a.corpus);
  const auto prompts = extract_prompts(texts_of(docs), a.prefix_chars, a.prompts, a.prompt_seed);
  GenerationOptions g;
  g.max_new_tokens = a.max_new_tokens;
  g.filter.continuation_only = a.continuation_only;
  g.filter.word_level = a.word_level;
  const auto corpus = generate_corpus(labeled, tok, prompts, a.gen_seed, g);
  save_generated(a.out, corpus);
  for (const auto& s : corpus.stats) {
    std::printf("%s: %lld generated, %lld dropped\n", s.model_id.c_str(), static_cast<long long>(s.generated),
                static_cast<long long>(s.dropped));
  }
  return kOk;
}

int data_build(const Args& a) {
  const auto corpus = load_generated(a.generated);
  DatasetOptions o;
  o.dedup = !a.no_dedup;
  o.dedup_options.eps = a.eps;
  o.dedup_options.seed = a.seed;
  o.val_size = a.val_size;
  o.test_size = a.test_size;
  o.split_seed = a.split_seed;
  const auto build = build_dataset(corpus, o);
  save_dataset(a.out, build);
  std::printf("%zu samples retained, %lld removed as near duplicates (%.2f%%)\n", build.dataset.samples.size(),
              static_cast<long long>(build.report.removed_count), build.report.removed_fraction * 100.0);
  return kOk;
}

ClassifierOptions clf_options(const Args& a) {
  ClassifierOptions o;
  if (!a.encoder_config.empty()) {
    try {
      o.encoder = json::parse(read_file(a.encoder_config)).get<EncoderConfig>();
    } catch (const json::exception& e) {
      throw ConfigError(a.encoder_config + ": " + e.what());
    }
  }
  o.val_size = a.val_size;
  o.test_size = a.test_size;
  o.train_per_class = a.train_per_class;
  o.top_k = a.top_k;
  return o;
}

int clf_fit(const Args& a) {
  const auto tok = TokenizerModel::load(a.tokenizer);
  const auto ds = load_dataset(a.dataset);
  ds.validate();
  const auto train = split_texts(ds, Split::kTrain);
  const auto kind = parse_classifier(a.kind);
  if (kind == ClassifierKind::kUnigram) {
    fit_unigram(train.texts, train.labels, ds.class_names, tok, clf_options(a).linear).save(a.out);
  } else {
    auto cfg = clf_options(a).encoder;
    cfg.lm.vocab_size = tok.n_tokens();
    train_encoder(train, split_texts(ds, Split::kVal), ds.class_names, tok, cfg).save(a.out);
  }
  std::printf("%s classifier fitted on %zu samples -> %s\n", a.kind.c_str(), train.texts.size(), a.out.c_str());
  return kOk;
}

int clf_eval(const Args& a) {
  const auto tok = TokenizerModel::load(a.tokenizer);
  auto ds = load_dataset(a.dataset);
  if (a.shuffle_seed >= 0) ds = shuffle_labels(ds, static_cast<std::uint64_t>(a.shuffle_seed));
  if (!a.model_dir.empty()) {
    // A fitted model scored on the stored test split.
    const auto test = split_texts(ds, Split::kTest);
    if (test.texts.empty()) throw DataError("dataset has no test split");
    const bool encoder = fs::is_directory(a.model_dir);
    const auto pred = encoder ? EncoderAttributor::load(a.model_dir).predict(test.texts, tok)
                              : UnigramClassifier::load(a.model_dir).predict(test.texts, tok);
    const auto ev = evaluate_predictions(test.labels, pred, ds.n_classes());
    const double chance = chance_rate(ds.n_classes());
    std::printf("accuracy %.1f%% on %lld test samples, chance %.1f%%, p = %.3g\n", ev.accuracy * 100.0,
                static_cast<long long>(ev.n), chance * 100.0, binomial_significance(ev.accuracy, ev.n, chance));
    return kOk;
  }
  auto o = clf_options(a);
  o.encoder.lm.vocab_size = tok.n_tokens();
  const auto r = repeated_eval(ds, parse_classifier(a.kind), a.seeds, o, tok, a.shuffle_seed >= 0 ? "shuffled" : "");
  print_report(r);
  if (!a.out.empty()) write_file_atomic(a.out, json(r).dump(2));
  return kOk;
}

double planned_tokens(const ExperimentSpec& spec) {
  double total = 0;
  for (const auto& m : spec.family) {
    total += static_cast<double>(m.pretrain.total_steps) * m.pretrain.batch_size * m.pretrain.lm_config.max_seq_len;
    if (m.finetune) {
      total += static_cast<double>(m.finetune->total_steps) * m.finetune->batch_size * m.finetune->lm_config.max_seq_len;
    }
  }
  return total;
}

int exp_run(const Args& a) {
  const auto spec = load_spec(a.spec);
  const double tokens = planned_tokens(spec);
  std::printf("experiment %s: %s, %d models, %.3g training tokens, %d prompts per model\n", spec.name.c_str(),
              std::string(setting_name(spec.setting)).c_str(), spec.family_size(), tokens, spec.prompts_per_model);
  if (a.dry_run) {
    std::printf("%s\n", spec_to_json(spec).dump(2).c_str());
    return kOk;
  }
  if (tokens > kBudgetTokens && !a.accept_budget) {
    std::fprintf(stderr, "this run trains on %.3g tokens; pass --accept-budget to proceed\n", tokens);
    return kUserError;
  }
  RunOptions opts;
  if (!a.cache.empty()) opts.cache_root = a.cache;
  const auto bundle = run_experiment(spec, opts);
  const fs::path out = a.out.empty() ? fs::path("reports") / spec.name : fs::path(a.out);
  emit_reports(bundle, out);
  std::printf("%s\nreports -> %s\n", summary_text(bundle).c_str(), out.c_str());
  return bundle.partial() ? kPartial : kOk;
}

int exp_report(const Args& a) {
  fs::path path = a.bundle;
  if (fs::is_directory(path)) path /= "report.json";
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  const auto bundle = bundle_from_json(j);
  if (!a.out.empty()) emit_reports(bundle, a.out);
  std::printf("%s", summary_text(bundle).c_str());
  return bundle.partial() ? kPartial : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fingerlab: natural fingerprints of language models"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  Args a;
  std::function<int(const Args&)> action;
  const auto bind = [&](CLI::App* sub, int (*fn)(const Args&)) { sub->callback([&action, fn] { action = fn; }); };

  auto* tok = app.add_subcommand("tok", "Tokenizer")->require_subcommand(1);
  {
    auto* s = tok->add_subcommand("train", "Train a byte-level BPE tokenizer");
    s->add_option("--corpus", a.corpus, "Corpus (.txt: one document per line, .jsonl: {\"text\"})")->required();
    s->add_option("--vocab-size", a.vocab_size, "BPE vocabulary size (>= 256)")->capture_default_str();
    s->add_option("--out", a.out, "Output tokenizer file")->required();
    bind(s, tok_train);
  }

  auto* lm = app.add_subcommand("lm", "Language models")->require_subcommand(1);
  {
    auto* s = lm->add_subcommand("train", "Pretrain a language model");
    s->add_option("--corpus", a.corpus)->required();
    s->add_option("--tokenizer", a.tokenizer)->required();
    s->add_option("--config", a.config, "TrainRun JSON (missing keys keep defaults)");
    s->add_option("--out", a.out, "Run directory")->required();
    bind(s, lm_train);

    s = lm->add_subcommand("finetune", "Supervised fine-tuning on instruction data");
    s->add_option("--base", a.base, "Base checkpoint")->required();
    s->add_option("--data", a.sft_data, "Instruction JSONL")->required();
    s->add_option("--tokenizer", a.tokenizer)->required();
    s->add_option("--config", a.config, "TrainRun JSON; lm_config comes from the base");
    s->add_option("--out", a.out, "Run directory")->required();
    bind(s, lm_finetune);

    s = lm->add_subcommand("generate", "Sample continuations of corpus prefixes from several models");
    s->add_option("--model", a.models, "ID=CHECKPOINT, repeated for each model")->required();
    s->add_option("--tokenizer", a.tokenizer)->required();
    s->add_option("--corpus", a.corpus, "Source of prompts")->required();
    s->add_option("--prompts", a.prompts)->capture_default_str();
    s->add_option("--prefix-chars", a.prefix_chars)->capture_default_str();
    s->add_option("--max-new-tokens", a.max_new_tokens)->capture_default_str();
    s->add_option("--prompt-seed", a.prompt_seed)->capture_default_str();
    s->add_option("--gen-seed", a.gen_seed)->capture_default_str();
    s->add_flag("--continuation-only", a.continuation_only, "Apply the repetition filter to the continuation only");
    s->add_flag("--word-level", a.word_level, "Count repeated word n-grams instead of token n-grams");
    s->add_option("--out", a.out, "Output directory")->required();
    bind(s, lm_generate);
  }

  auto* data = app.add_subcommand("data", "Corpora and attribution datasets")->require_subcommand(1);
  {
    auto* s = data->add_subcommand("synth", "Write a synthetic corpus or instruction set");
    s->add_option("--docs", a.n_docs)->capture_default_str();
    s->add_option("--topics", a.n_topics)->capture_default_str();
    s->add_option("--instructions", a.n_instructions, "Write N instruction examples instead of documents");
    s->add_option("--seed", a.seed)->capture_default_str();
    s->add_option("--out", a.out)->required();
    bind(s, data_synth);

    s = data->add_subcommand("build", "Deduplicate and split generated samples");
    s->add_option("--generated", a.generated, "Output directory of lm generate")->required();
    s->add_option("--val-size", a.val_size)->capture_default_str();
    s->add_option("--test-size", a.test_size)->capture_default_str();
    s->add_option("--split-seed", a.split_seed)->capture_default_str();
    s->add_option("--eps", a.eps, "Cosine distance below which samples are duplicates")->capture_default_str();
    s->add_option("--seed", a.seed, "k-means seed")->capture_default_str();
    s->add_flag("--no-dedup", a.no_dedup);
    s->add_option("--out", a.out)->required();
    bind(s, data_build);
  }

  auto* clf = app.add_subcommand("clf", "Attribution classifiers")->require_subcommand(1);
  {
    auto* s = clf->add_subcommand("fit", "Fit a classifier on the dataset's train split");
    s->add_option("--dataset", a.dataset)->required();
    s->add_option("--tokenizer", a.tokenizer)->required();
    s->add_option("--kind", a.kind, "unigram or encoder")->capture_default_str();
    s->add_option("--encoder-config", a.encoder_config, "EncoderConfig JSON");
    s->add_option("--out", a.out, "Model file (unigram) or directory (encoder)")->required();
    bind(s, clf_fit);

    s = clf->add_subcommand("eval", "Score a fitted model, or run repeated split evaluation");
    s->add_option("--dataset", a.dataset)->required();
    s->add_option("--tokenizer", a.tokenizer)->required();
    s->add_option("--model", a.model_dir, "Fitted model; omit for repeated evaluation");
    s->add_option("--kind", a.kind)->capture_default_str();
    s->add_option("--encoder-config", a.encoder_config);
    s->add_option("--seeds", a.seeds, "Split seeds")->capture_default_str()->delimiter(',');
    s->add_option("--val-size", a.val_size)->capture_default_str();
    s->add_option("--test-size", a.test_size)->capture_default_str();
    s->add_option("--train-per-class", a.train_per_class)->capture_default_str();
    s->add_option("--top-k", a.top_k)->capture_default_str();
    s->add_option("--shuffle-labels", a.shuffle_seed, "Permute labels with this seed (negative control)");
    s->add_option("--out", a.out, "Write the report as JSON");
    bind(s, clf_eval);
  }

  auto* exp = app.add_subcommand("exp", "Experiments")->require_subcommand(1);
  {
    auto* s = exp->add_subcommand("run", "Run an experiment spec end to end");
    s->add_option("spec", a.spec, "Experiment JSON")->required();
    s->add_option("--cache", a.cache, "Cache root (default: $FINGERLAB_CACHE or ./.fingerlab_cache)");
    s->add_option("--out", a.out, "Report directory (default: reports/<name>)");
    s->add_flag("--accept-budget", a.accept_budget, "Allow runs above the compute budget threshold");
    s->add_flag("--dry-run", a.dry_run, "Validate and print the resolved spec");
    bind(s, exp_run);

    s = exp->add_subcommand("report", "Re-emit and print a report bundle");
    s->add_option("bundle", a.bundle, "report.json or its directory")->required();
    s->add_option("--out", a.out, "Write the report files here");
    bind(s, exp_report);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUserError;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    return action(a);
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return kUserError;
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return kInternalError;
  }
}
