// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (0 when all pass).
//
//   acceptance --experiments DIR --work DIR [--only N,N,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "fingerlab/attribution.hpp"
#include "fingerlab/classify.hpp"
#include "fingerlab/datakit.hpp"
#include "fingerlab/error.hpp"
#include "fingerlab/io.hpp"
#include "fingerlab/labctl.hpp"
#include "fingerlab/lm.hpp"
#include "fingerlab/rng.hpp"
#include "fingerlab/serialization.hpp"
#include "fingerlab/textgen.hpp"
#include "fingerlab/trainer.hpp"

using namespace fingerlab;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kGradRelTol = 1e-4;
constexpr double kGradMaxSeconds = 300;
constexpr double kSigmas = 3.0;
constexpr int kSingleDraws = 100000;
constexpr int kPathDraws = 100000;
constexpr double kDedupEps = 0.2;
constexpr double kDedupFarDistance = 0.5;
constexpr double kBayesBand = 0.03;
constexpr double kControlAlpha = 0.01;
constexpr double kFlagshipAlpha = 0.01;
constexpr std::int64_t kFlagshipMinTest = 1500;
constexpr double kFlagshipMaxSeconds = 2 * 3600;
constexpr double kSftAlpha = 0.05;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Context {
  fs::path experiments;
  fs::path work;
  fs::path cache() const { return work / "cache"; }
  fs::path reports(const std::string& name) const { return work / "reports" / name; }
};

// ---------------------------------------------------------------------------

LMParamsF64 lively_params(const LMConfig& c, std::uint64_t seed) {
  auto p = init_params<double>(c, seed);
  Rng rng("acceptance.lively", {seed});
  for (auto& v : p.values) v = 0.4 * rng.normal();
  for (const auto& t : p.layout.tensors) {
    if (t.name.find("norm") != std::string::npos) {
      for (std::size_t i = 0; i < t.size(); ++i) p.values[t.offset + i] = 1.0 + 0.2 * rng.normal();
    }
  }
  return p;
}

Outcome gradient_exactness(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  LMConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.d_ffn = 32;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.vocab_size = 13;
  c.max_seq_len = 16;
  const auto p = lively_params(c, 5);
  Rng rng("acceptance.fd", {1});
  TokenBatch batch;
  batch.batch_size = 2;
  batch.seq_len = 9;
  for (int i = 0; i < 18; ++i) batch.tokens.push_back(static_cast<TokenId>(rng.below(c.vocab_size)));
  const auto analytic = loss_and_grads(p, batch).grads;
  auto q = p;
  double worst = 0;
  std::string worst_name;
  for (const auto& t : p.layout.tensors) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const std::size_t idx = t.offset + i;
      const double h = 1e-4;
      auto at = [&](double delta) {
        q.values[idx] = p.values[idx] + delta;
        return loss_and_grads(q, batch).loss;
      };
      const double numeric = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
      q.values[idx] = p.values[idx];
      const double denom = std::max({std::abs(numeric), std::abs(analytic[idx]), 1e-6});
      const double err = std::abs(numeric - analytic[idx]) / denom;
      if (err > worst) {
        worst = err;
        worst_name = t.name;
      }
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst < kGradRelTol && secs < kGradMaxSeconds,
          fmt("max relative error %.2e (%s) over %zu tensors, %.1f s", worst, worst_name.c_str(),
              p.layout.tensors.size(), secs)};
}

// ---------------------------------------------------------------------------

Outcome sampling_fidelity(const Context&) {
  bool ok = true;
  double worst_z = 0;
  {
    const std::vector<float> logits{1.5f, 0.2f, -0.7f, 0.9f};
    std::vector<double> p(logits.size());
    double z = 0;
    for (std::size_t k = 0; k < p.size(); ++k) z += p[k] = std::exp(double(logits[k]));
    for (auto& v : p) v /= z;
    Rng rng("acceptance.single", {1});
    std::vector<int> counts(p.size(), 0);
    for (int i = 0; i < kSingleDraws; ++i) ++counts[sample_from_logits(logits, rng)];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double zk = std::abs(counts[k] - kSingleDraws * p[k]) / std::sqrt(kSingleDraws * p[k] * (1 - p[k]));
      worst_z = std::max(worst_z, zk);
      ok = ok && zk < kSigmas;
    }
  }
  // Hand-set 3-token model whose residual stream is the token embedding, so
  // next-token probabilities depend only on the previous token.
  LMConfig c;
  c.n_layers = 1;
  c.d_model = 4;
  c.d_ffn = 4;
  c.n_heads = 1;
  c.n_kv_heads = 1;
  c.vocab_size = 3;
  c.max_seq_len = 8;
  auto params = init_params<float>(c, 1);
  const auto& L = params.layout;
  auto zero = [&](const TensorSlot& s) {
    std::fill(params.values.begin() + s.offset, params.values.begin() + s.offset + s.size(), 0.0f);
  };
  zero(L.blocks[0].wo);
  zero(L.blocks[0].w_down);
  const float embed[3][4] = {{1, 0, 0, 0}, {0, 1, 0, 1}, {1, 1, 1, -1}};
  const float head[4][3] = {{0.5f, 0.2f, -0.3f}, {0.1f, -0.4f, 0.6f}, {0.9f, 0, 0.2f}, {-0.7f, 0.3f, 0}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) params.values[L.embed.offset + i * 4 + j] = embed[i][j];
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) params.values[L.head.offset + i * 3 + j] = head[i][j];
  auto next_probs = [&](int tok) {
    double ms = 0;
    for (float e : embed[tok]) ms += double(e) * e;
    const double inv = 1.0 / std::sqrt(ms / 4 + 1e-5);
    std::vector<double> logit(3, 0.0), out(3);
    double z = 0;
    for (int j = 0; j < 3; ++j) {
      for (int i = 0; i < 4; ++i) logit[j] += embed[tok][i] * inv * head[i][j];
      z += std::exp(logit[j]);
    }
    for (int j = 0; j < 3; ++j) out[j] = std::exp(logit[j]) / z;
    return out;
  };
  const auto first = next_probs(0);
  Rng rng("acceptance.paths", {2});
  int counts[3][3] = {};
  const std::vector<TokenId> ctx{0};
  for (int i = 0; i < kPathDraws; ++i) {
    const auto path = sample_tokens(params, ctx, 2, -1, rng);
    if (path.size() != 2) return {false, "sampler returned a path of the wrong length"};
    ++counts[path[0]][path[1]];
  }
  double worst_path = 0;
  for (int a = 0; a < 3; ++a) {
    const auto second = next_probs(a);
    for (int b = 0; b < 3; ++b) {
      const double pr = first[a] * second[b];
      const double zab = std::abs(counts[a][b] - kPathDraws * pr) / std::sqrt(kPathDraws * pr * (1 - pr));
      worst_path = std::max(worst_path, zab);
      ok = ok && zab < kSigmas;
    }
  }
  return {ok, fmt("single-step max |z| %.2f, two-step path max |z| %.2f (limit %.0f sigma)", worst_z, worst_path,
                  kSigmas)};
}

// ---------------------------------------------------------------------------

Outcome degeneracy_boundary(const Context&) {
  const std::vector<TokenId> twelve(12, 42), eleven(11, 42);
  const bool rejects = is_degenerate(twelve, 5, 8);
  const bool keeps = !is_degenerate(eleven, 5, 8);
  GeneratedSample s;
  s.continuation_tokens = twelve;
  s.prompt_tokens = {1, 2, 3};
  FilterOptions f;
  const bool filter_drops12 = filter_drops(s, f);
  s.continuation_tokens = eleven;
  const bool filter_keeps11 = !filter_drops(s, f);
  return {rejects && keeps && filter_drops12 && filter_keeps11,
          fmt("12-fold %s, 11-fold %s", rejects && filter_drops12 ? "rejected" : "KEPT",
              keeps && filter_keeps11 ? "kept" : "REJECTED")};
}

// ---------------------------------------------------------------------------

Outcome dedup_oracle(const Context&) {
  constexpr int n = 2000;
  Rng rng("acceptance.dedup", {1});
  std::vector<std::string> texts;
  for (int i = 0; i < n; ++i) {
    std::string s;
    for (int k = 0; k < 160; ++k) s += static_cast<char>('a' + rng.below(26));
    texts.push_back(s);
  }
  // Five planted pairs: a one-character edit of an earlier text, placed
  // later in the corpus.
  std::set<std::pair<int, int>> planted;
  for (int i = 0; i < 5; ++i) {
    const int src = 100 * i + 7, dst = 1500 + 50 * i;
    texts[dst] = texts[src];
    texts[dst][80] = texts[src][80] == 'q' ? 'r' : 'q';
    planted.insert({src, dst});
  }
  std::vector<DedupEmbedding> emb;
  for (const auto& t : texts) emb.push_back(embed_for_dedup(t));
  // Check the fixture and derive the greedy removal set independently.
  std::vector<bool> keep(n, true);
  double closest_unplanted = 2.0, farthest_planted = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < i; ++j) {
      const double d = 1.0 - cosine_similarity(emb[i], emb[j]);
      if (planted.count({j, i})) farthest_planted = std::max(farthest_planted, d);
      else closest_unplanted = std::min(closest_unplanted, d);
      if (keep[i] && keep[j] && d < kDedupEps) keep[i] = false;
    }
  }
  const bool fixture_ok = farthest_planted < kDedupEps && closest_unplanted > kDedupFarDistance;
  DedupOptions o;
  o.eps = kDedupEps;
  const auto clustered = semantic_dedup(texts, o);
  const auto oracle = all_pairs_dedup(texts, o);
  std::int64_t discrepancies = 0, vs_independent = 0;
  for (int i = 0; i < n; ++i) {
    discrepancies += clustered.retained[i] != oracle.retained[i];
    vs_independent += clustered.retained[i] != keep[i];
  }
  return {fixture_ok && discrepancies == 0 && vs_independent == 0 && clustered.removed() == 5,
          fmt("removed %lld, discrepancies vs all-pairs %lld, vs test-side greedy %lld; planted distance <= %.3f, "
              "others >= %.3f",
              static_cast<long long>(clustered.removed()), static_cast<long long>(discrepancies),
              static_cast<long long>(vs_independent), farthest_planted, closest_unplanted)};
}

// ---------------------------------------------------------------------------

std::string draw_doc(Rng& rng, const std::vector<double>& probs, int len) {
  std::string s;
  for (int i = 0; i < len; ++i) {
    double u = rng.uniform(), acc = 0;
    std::size_t k = 0;
    for (; k + 1 < probs.size(); ++k) {
      acc += probs[k];
      if (u < acc) break;
    }
    s += static_cast<char>('a' + k);
  }
  return s;
}

Outcome classifier_oracle(const Context&) {
  auto normalized = [](std::vector<double> w) {
    double s = 0;
    for (double v : w) s += v;
    for (double& v : w) v /= s;
    return w;
  };
  const auto p = normalized({9, 8, 7, 6, 5, 5, 4, 4, 3, 3, 3, 2, 2, 2, 2, 1, 1, 1, 1, 1});
  const auto q = normalized({1, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 4, 4, 5, 5, 6, 7, 8, 9});
  Rng rng("acceptance.bayes", {1});
  const int per_class = 5000, n_train = 4000, len = 3;
  std::vector<std::string> train, test;
  std::vector<int> ytrain, ytest;
  for (int i = 0; i < per_class; ++i) {
    for (int y = 0; y < 2; ++y) {
      (i < n_train ? train : test).push_back(draw_doc(rng, y ? q : p, len));
      (i < n_train ? ytrain : ytest).push_back(y);
    }
  }
  const TokenizerModel tok;
  const auto clf = fit_unigram(train, ytrain, {"p", "q"}, tok);
  const double acc = evaluate_predictions(ytest, clf.predict(test, tok), 2).accuracy;
  int bayes_correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    double lp = 0, lq = 0;
    for (char ch : test[i]) {
      lp += std::log(p[ch - 'a']);
      lq += std::log(q[ch - 'a']);
    }
    bayes_correct += (lq > lp ? 1 : 0) == ytest[i];
  }
  const double bayes = double(bayes_correct) / double(test.size());
  return {std::abs(acc - bayes) <= kBayesBand,
          fmt("logistic regression %.2f%%, Bayes %.2f%%, |diff| %.2f pp (limit %.0f pp), %zu test docs", acc * 100,
              bayes * 100, std::abs(acc - bayes) * 100, kBayesBand * 100, test.size())};
}

// ---------------------------------------------------------------------------

Outcome negative_control(const Context&) {
  AttributionDataset ds;
  ds.class_names = {"m0", "m1", "m2"};
  Rng rng("acceptance.control", {1});
  const std::string sentinel = "#@%";
  for (int i = 0; i < 3 * 1500; ++i) {
    const int y = i % 3;
    std::string text;
    const int len = 20 + static_cast<int>(rng.below(30));
    for (int k = 0; k < len; ++k) text += rng.below(6) == 0 ? ' ' : static_cast<char>('a' + rng.below(26));
    text.insert(rng.below(text.size()), 1, sentinel[y]);
    ds.samples.push_back({i, text, y, ds.class_names[y], Split::kTrain});
  }
  const auto shuffled = shuffle_labels(ds, 7);
  const TokenizerModel tok;
  ClassifierOptions o;
  o.val_size = 500;
  o.test_size = 1500;
  o.encoder.lm.n_layers = 1;
  o.encoder.lm.d_model = 32;
  o.encoder.lm.d_ffn = 64;
  o.encoder.lm.n_heads = 2;
  o.encoder.lm.n_kv_heads = 2;
  o.encoder.lm.max_seq_len = 64;
  o.encoder.lm.vocab_size = tok.n_tokens();
  o.encoder.peak_lr = 1e-3;
  o.encoder.batch_size = 32;
  o.encoder.epochs = 2;
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  const auto [lo, hi] = chance_interval(1500, 1.0 / 3.0, kControlAlpha);
  bool ok = true;
  std::string detail = fmt("99%% chance interval [%.1f%%, %.1f%%];", lo * 100, hi * 100);
  for (auto kind : {ClassifierKind::kUnigram, ClassifierKind::kEncoder}) {
    // The unshuffled data must carry signal, otherwise the control is vacuous.
    const auto real = run_split(ds, kind, 0, o, tok);
    const auto r = repeated_eval(shuffled, kind, seeds, o, tok, "negative_control");
    bool inside = real.accuracy > hi;
    for (double a : r.accuracies) inside = inside && a >= lo && a <= hi;
    ok = ok && inside && r.n_test == 1500;
    detail += fmt(" %s shuffled %s %% (true labels %.1f%%)", r.classifier.c_str(),
                  format_mean_std({r.mean, r.std}).c_str(), real.accuracy * 100);
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------

ReportBundle run_spec(const Context& ctx, const std::string& file) {
  const auto spec = load_spec(ctx.experiments / file);
  const auto bundle = run_experiment(spec, {ctx.cache()});
  emit_reports(bundle, ctx.reports(spec.name));
  return bundle;
}

const AttributionReport* find_report(const ReportBundle& b, const std::string& classifier) {
  for (const auto& r : b.reports) {
    if (r.classifier == classifier) return &r;
  }
  return nullptr;
}

Outcome flagship(const Context& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto spec = load_spec(ctx.experiments / "order_only.json");
  std::set<std::uint64_t> init_seeds, order_seeds;
  bool config_ok = spec.setting == SettingKind::kOrderOnly && spec.family_size() == 3 &&
                   spec.prompts_per_model >= 5000 && spec.split_seeds.size() == 3;
  for (const auto& m : spec.family) {
    init_seeds.insert(m.pretrain.init_seed);
    order_seeds.insert(m.pretrain.order_seed);
    config_ok = config_ok && m.pretrain.total_steps >= 3000;
  }
  config_ok = config_ok && init_seeds.size() == 1 && order_seeds.size() == 3;
  const auto bundle = run_spec(ctx, "order_only.json");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (bundle.partial()) return {false, "partial bundle: " + bundle.failures.front().stage + ": " + bundle.failures.front().message};
  const auto* r = find_report(bundle, "unigram");
  if (r == nullptr) return {false, "no unigram report"};
  std::int64_t generated = INT64_MAX;
  for (const auto& m : bundle.dataset.at("generation").at("models")) {
    generated = std::min(generated, m.at("generated").get<std::int64_t>());
  }
  const bool ok = config_ok && generated >= 5000 && r->n_test >= kFlagshipMinTest && r->mean > r->chance_rate &&
                  r->p_value < kFlagshipAlpha && secs < kFlagshipMaxSeconds;
  return {ok, fmt("unigram %s %% vs chance %.1f%%, p = %.3g, %lld test samples x %zu seeds, %lld samples/model, "
                  "%.0f s (cache hits %zu stages)",
                  format_mean_std({r->mean, r->std}).c_str(), r->chance_rate * 100, r->p_value,
                  static_cast<long long>(r->n_test), r->split_seeds.size(), static_cast<long long>(generated), secs,
                  bundle.cache_hits.size())};
}

// ---------------------------------------------------------------------------

Outcome seed_factorization(const Context& ctx) {
  const auto spec = load_spec(ctx.experiments / "order_only.json");
  SynthOptions so;
  so.n_docs = 400;
  const auto docs = synthetic_corpus(so);
  const auto tok = train_bpe(texts_of(docs), 300);
  auto shrink = [&](TrainRun r) {
    r.lm_config.vocab_size = tok.n_tokens();
    r.total_steps = 4;
    r.warmup_steps = 1;
    r.checkpoint_steps = {0, 4};
    return r;
  };
  const auto packed = pack_documents(tok, texts_of(docs), spec.base.lm_config.max_seq_len);
  std::vector<std::uint64_t> init_sums, final_sums;
  for (const auto& m : spec.family) {
    const auto ck = pretrain(shrink(m.pretrain), packed);
    init_sums.push_back(ck[0].checksum());
    final_sums.push_back(ck[1].checksum());
  }
  const bool shared_init = std::all_of(init_sums.begin(), init_sums.end(), [&](auto s) { return s == init_sums[0]; });
  const bool distinct_final = std::set<std::uint64_t>(final_sums.begin(), final_sums.end()).size() == final_sums.size();

  // Init-varied runs: different initial weights, identical data order.
  auto order_checksum = [&](const TrainRun& r) {
    Fnv1a h;
    for (std::uint64_t epoch = 0; epoch < 2; ++epoch) {
      const auto o = make_order(r.order_seed, packed.size(), epoch);
      for (auto v : o.permutation) h.update_pod(v);
    }
    BatchSchedule sched(r.order_seed, r.batch_size, packed.size());
    for (int step = 0; step < 50; ++step) {
      for (auto v : sched.indices(step)) h.update_pod(v);
    }
    return h.digest();
  };
  TrainRun a = shrink(spec.base), b = shrink(spec.base);
  a.init_seed = 101;
  b.init_seed = 202;
  const bool same_order = order_checksum(a) == order_checksum(b);
  const bool different_init = pretrain(a, packed)[0].checksum() != pretrain(b, packed)[0].checksum();
  return {shared_init && distinct_final && same_order && different_init,
          fmt("order-varied initial checksum %s (shared: %s), trained checksums distinct: %s; init-varied order "
              "checksum %s (shared: %s), initial weights distinct: %s",
              hex64(init_sums[0]).c_str(), shared_init ? "yes" : "no", distinct_final ? "yes" : "no",
              hex64(order_checksum(a)).c_str(), same_order ? "yes" : "no", different_init ? "yes" : "no")};
}

// ---------------------------------------------------------------------------

Outcome checkpoint_curve(const Context& ctx) {
  const auto spec = load_spec(ctx.experiments / "checkpoint_curve.json");
  const auto bundle = run_spec(ctx, "checkpoint_curve.json");
  if (bundle.partial()) return {false, "partial bundle: " + bundle.failures.front().stage + ": " + bundle.failures.front().message};
  const auto milestones = spec.family.front().pretrain.resolved_checkpoint_steps();
  bool ok = bundle.series.size() == spec.classifiers.size();
  std::string detail = fmt("%zu milestones;", milestones.size());
  for (const auto& s : bundle.series) {
    ok = ok && s.kind == "checkpoint" && s.points.size() == milestones.size();
    bool decreasing = true;
    detail += " " + s.classifier + ":";
    for (std::size_t i = 0; i < s.points.size(); ++i) {
      const auto& pt = s.points[i];
      ok = ok && pt.x == milestones[i] && std::isfinite(pt.mean) && std::isfinite(pt.std) && pt.p_value > 0 &&
           pt.p_value <= 1 && pt.n_test > 0;
      if (i > 0) decreasing = decreasing && pt.mean <= s.points[i - 1].mean;
      detail += fmt(" %lld=%s(p=%.2g)", static_cast<long long>(pt.x), format_mean_std({pt.mean, pt.std}).c_str(),
                    pt.p_value);
    }
    detail += decreasing ? " [monotone decrease: yes]" : " [monotone decrease: no]";
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------

Outcome sft_fingerprints(const Context& ctx) {
  const auto spec = load_spec(ctx.experiments / "sft_order.json");
  std::set<std::uint64_t> orders;
  std::set<std::string> pretrain_runs;
  for (const auto& m : spec.family) {
    orders.insert(m.finetune->order_seed);
    pretrain_runs.insert(nlohmann::json(m.pretrain).dump());
  }
  const bool config_ok = spec.family_size() == 3 && orders.size() == 3 && pretrain_runs.size() == 1;
  const auto bundle = run_spec(ctx, "sft_order.json");
  if (bundle.partial()) return {false, "partial bundle: " + bundle.failures.front().stage + ": " + bundle.failures.front().message};
  const auto* r = find_report(bundle, "unigram");
  if (r == nullptr) return {false, "no unigram report"};
  const bool effect = r->mean > r->chance_rate && r->p_value < kSftAlpha;
  // Either outcome passes once the run is complete and reported; a null is
  // stated as such in the detail line.
  return {config_ok, fmt("unigram %s %% vs chance %.1f%%, p = %.3g, %lld test samples: %s", format_mean_std({r->mean, r->std}).c_str(),
                         r->chance_rate * 100, r->p_value, static_cast<long long>(r->n_test),
                         effect ? "above chance (p < 0.05)" : "documented null at this scale")};
}

// ---------------------------------------------------------------------------

Outcome report_fidelity(const Context&) {
  std::vector<std::string> bad;
  auto expect = [&](bool cond, const std::string& what) {
    if (!cond) bad.push_back(what);
  };
  expect(format_mean_std({0.445, 0.008}) == "44.5 \xc2\xb1 0.8", "format 44.5 +- 0.8");
  expect(format_mean_std({0.399, 0.007}) == "39.9 \xc2\xb1 0.7", "format 39.9 +- 0.7");
  expect(chance_rate(6) == 1.0 / 6.0 && chance_rate(3) == 1.0 / 3.0, "chance rate");
  ReportBundle b;
  b.name = "fixture";
  b.setting = "order_only";
  b.n_classes = 6;
  expect(summary_text(b).find("chance 16.7%") != std::string::npos, "16.7% for m=6");
  b.n_classes = 3;
  expect(summary_text(b).find("chance 33.3%") != std::string::npos, "33.3% for m=3");

  // Top-10: weights on byte tokens, hand-ranked below.
  const TokenizerModel tok;
  LinearAttributor m;
  m.n_classes = 2;
  m.n_features = tok.n_tokens();
  m.weights.assign(2, std::vector<double>(m.n_features, 0.0));
  m.bias = {0, 0};
  const std::string letters = "etaoinshrdlu";
  for (std::size_t i = 0; i < letters.size(); ++i) m.weights[0][letters[i]] = 12.0 - double(i);
  m.weights[0][' '] = 7.5;
  m.weights[0]['z'] = 5.0;  // ties with 'h'; the lower id ranks first
  m.weights[0][0xC3] = -100;
  m.weights[1][0xC3] = 4.0;
  const std::vector<std::string> expected0{"e", "t", "a", "o", "i", "\xe2\x96\x81", "n", "s", "h", "z"};
  const auto top0 = top_features(m, 0, 10, tok);
  std::vector<std::string> got0;
  for (const auto& f : top0) got0.push_back(f.text);
  expect(got0 == expected0, "top-10 ranking of class 0");
  const auto top1 = top_features(m, 1, 10, tok);
  expect(top1.size() == 10 && top1[0].text == "<0xC3>" && top1[0].weight == 4.0, "top feature of class 1");
  // Remaining class-1 features are zero-weight and ordered by id.
  expect(top1.size() == 10 && top1[1].token == 0 && top1[9].token == 8, "zero-weight tie order");

  std::string detail = "formatting, chance rates and top-10 features match hand-computed values";
  if (!bad.empty()) {
    detail = "mismatch:";
    for (const auto& s : bad) detail += " [" + s + "]";
  }
  return {bad.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fingerlab acceptance suite"};
  Context ctx;
  std::vector<int> only;
  app.add_option("--experiments", ctx.experiments, "Directory with experiment specs")->required();
  app.add_option("--work", ctx.work, "Cache and report directory")->required();
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);

  const std::vector<std::pair<std::string, std::function<Outcome(const Context&)>>> criteria = {
      {"gradient exactness", gradient_exactness},
      {"sampling fidelity", sampling_fidelity},
      {"degeneracy-filter boundary", degeneracy_boundary},
      {"dedup oracle equivalence", dedup_oracle},
      {"classifier oracle", classifier_oracle},
      {"negative control", negative_control},
      {"flagship order-only reproduction", flagship},
      {"seed factorization", seed_factorization},
      {"checkpoint-curve machinery", checkpoint_curve},
      {"SFT fingerprints", sft_fingerprints},
      {"report fidelity", report_fidelity},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome out;
    try {
      out = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    failed += !out.pass;
    std::printf("%s [%2d] %s: %s\n", out.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), out.detail.c_str());
    std::fflush(stdout);
  }
  return failed;
}
