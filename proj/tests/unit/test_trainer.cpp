#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>

#include "doctest.h"
#include "fingerlab/corpus.hpp"
#include "fingerlab/io.hpp"
#include "fingerlab/serialization.hpp"
#include "fingerlab/trainer.hpp"

using namespace fingerlab;

namespace {

struct Tiny {
  TokenizerModel tok;
  PackedCorpus corpus;
  TrainRun run;
};

const Tiny& tiny() {
  static const Tiny t = [] {
    Tiny x;
    SynthOptions so;
    so.n_docs = 200;
    so.n_topics = 2;
    const auto docs = texts_of(synthetic_corpus(so));
    x.tok = train_bpe(docs, 300);
    x.run.lm_config.n_layers = 1;
    x.run.lm_config.d_model = 16;
    x.run.lm_config.d_ffn = 32;
    x.run.lm_config.n_heads = 2;
    x.run.lm_config.n_kv_heads = 1;
    x.run.lm_config.vocab_size = x.tok.n_tokens();
    x.run.lm_config.max_seq_len = 16;
    x.run.lm_config.dropout_rate = 0.1;
    x.run.peak_lr = 3e-3;
    x.run.warmup_steps = 2;
    x.run.total_steps = 12;
    x.run.batch_size = 4;
    x.corpus = pack_documents(x.tok, docs, 16);
    return x;
  }();
  return t;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainRun r;
  r.peak_lr = 1e-3;
  r.warmup_steps = 100;
  r.total_steps = 1000;
  CHECK(lr_at(r, 0) == 0.0);
  CHECK(lr_at(r, 50) == doctest::Approx(5e-4));
  CHECK(lr_at(r, 100) == doctest::Approx(1e-3));
  CHECK(lr_at(r, 1000) == doctest::Approx(1e-4));
  // Halfway through decay: min + (peak - min) * (1 + cos(pi / 2)) / 2.
  CHECK(lr_at(r, 550) == doctest::Approx(1e-4 + 9e-4 * 0.5));
  CHECK(lr_at(r, 325) == doctest::Approx(1e-4 + 9e-4 * 0.5 * (1 + std::cos(std::numbers::pi * 0.25))));
  r.schedule = Schedule::kLinear;
  CHECK(lr_at(r, 1000) == 0.0);
  CHECK(lr_at(r, 550) == doctest::Approx(5e-4));
  CHECK_THROWS_AS(lr_at(r, -1), LogicError);
  CHECK_THROWS_AS(lr_at(r, 1001), LogicError);
  r.warmup_steps = 0;
  CHECK(lr_at(r, 0) == doctest::Approx(1e-3));
}

TEST_CASE("milestones") {
  CHECK(milestone_steps(3000) == std::vector<std::int64_t>{30, 150, 300, 600, 1500, 3000});
  CHECK(milestone_steps(10) == std::vector<std::int64_t>{1, 2, 5, 10});
}

TEST_CASE("data order") {
  CHECK(make_order(5, 1, 0).permutation == std::vector<std::uint32_t>{0});
  CHECK(make_order(5, 100, 3).permutation == make_order(5, 100, 3).permutation);
  CHECK(make_order(5, 100, 3).permutation != make_order(5, 100, 4).permutation);
  CHECK(make_order(5, 100, 3).permutation != make_order(6, 100, 3).permutation);
  auto p = make_order(9, 1000, 0).permutation;
  std::sort(p.begin(), p.end());
  for (std::uint32_t i = 0; i < 1000; ++i) REQUIRE(p[i] == i);
}

TEST_CASE("all 24 permutations of 4 items are equally likely") {
  std::map<std::vector<std::uint32_t>, int> counts;
  const int draws = 10000;
  for (int s = 0; s < draws; ++s) ++counts[make_order(static_cast<std::uint64_t>(s), 4, 0).permutation];
  CHECK(counts.size() == 24);
  const double p = 1.0 / 24, mean = draws * p, sigma = std::sqrt(draws * p * (1 - p));
  for (const auto& [perm, c] : counts) CHECK(std::abs(c - mean) < 5 * sigma);
}

TEST_CASE("batch schedule depends only on the order seed") {
  BatchSchedule a(3, 4, 10), b(3, 4, 10), c(4, 4, 10);
  std::vector<int> seen(10, 0);
  for (int step = 0; step < 5; ++step) {
    const auto ia = a.indices(step);
    CHECK(ia == b.indices(step));
    if (step < 2) {
      for (auto i : ia) ++seen[i];
    }
    if (step == 0) CHECK(ia != c.indices(step));
  }
  // Steps 0-1 plus half of step 2 cover epoch 0; the first 8 items are distinct.
  for (int v : seen) CHECK(v <= 1);
}

TEST_CASE("config json round trip and unknown keys") {
  TrainRun r = tiny().run;
  r.checkpoint_steps = {3, 7};
  r.order_seed = 42;
  const nlohmann::json j = r;
  CHECK(j.get<TrainRun>() == r);
  auto bad = j;
  bad["peak_lrr"] = 1.0;
  CHECK_THROWS_AS(bad.get<TrainRun>(), ConfigError);
  bad = j;
  bad["lm_config"]["n_heads"] = "four";
  CHECK_THROWS_AS(bad.get<TrainRun>(), ConfigError);
}

TEST_CASE("pretraining is a pure function of the run") {
  const auto& t = tiny();
  const auto a = pretrain(t.run, t.corpus);
  const auto b = pretrain(t.run, t.corpus);
  REQUIRE(a.size() == milestone_steps(12).size());
  CHECK(a.back().step == 12);
  CHECK(a.back().checksum() == b.back().checksum());
  TrainRun other = t.run;
  other.order_seed = 2;
  CHECK(pretrain(other, t.corpus).back().checksum() != a.back().checksum());
}

TEST_CASE("seed factorization") {
  const auto& t = tiny();
  TrainRun r = t.run;
  r.checkpoint_steps = {0, r.total_steps};
  TrainRun order_varied = r;
  order_varied.order_seed = 77;
  const auto base = pretrain(r, t.corpus);
  const auto ov = pretrain(order_varied, t.corpus);
  CHECK(base[0].checksum() == ov[0].checksum());
  CHECK(base[1].checksum() != ov[1].checksum());
  TrainRun init_varied = r;
  init_varied.init_seed = 78;
  const auto iv = pretrain(init_varied, t.corpus);
  CHECK(base[0].checksum() != iv[0].checksum());
  BatchSchedule s1(r.order_seed, r.batch_size, t.corpus.size());
  BatchSchedule s2(init_varied.order_seed, init_varied.batch_size, t.corpus.size());
  for (int step = 0; step < r.total_steps; ++step) REQUIRE(s1.indices(step) == s2.indices(step));
}

TEST_CASE("loss decreases on learnable data") {
  const auto& t = tiny();
  TrainRun r = t.run;
  r.total_steps = 200;
  r.warmup_steps = 10;
  r.lm_config.dropout_rate = 0.0;
  std::vector<double> losses;
  TrainOptions opt;
  opt.observer = [&](const StepStats& s) { losses.push_back(s.loss); };
  const auto ck = pretrain(r, t.corpus, opt);
  REQUIRE(losses.size() == 200);
  const auto init = init_params<float>(r.lm_config, r.init_seed);
  const double before = mean_loss(init, t.corpus);
  const double after = mean_loss(ck.back().params, t.corpus);
  MESSAGE("loss " << before << " -> " << after);
  CHECK(after < before - 1.0);
  CHECK(losses.back() < losses.front());
}

TEST_CASE("clipping bounds the applied gradient norm") {
  const auto& t = tiny();
  TrainRun r = t.run;
  r.grad_clip = 0.05;
  int clipped = 0;
  TrainOptions opt;
  opt.observer = [&](const StepStats& s) {
    REQUIRE(s.clipped_norm <= r.grad_clip + 1e-6);
    clipped += s.grad_norm > r.grad_clip;
  };
  pretrain(r, t.corpus, opt);
  CHECK(clipped > 0);
}

TEST_CASE("weight_decay 0 reproduces a plain Adam trace") {
  const auto& t = tiny();
  TrainRun r = t.run;
  r.total_steps = 10;
  r.weight_decay = 0.0;
  r.lm_config.dropout_rate = 0.0;
  const auto trained = pretrain(r, t.corpus).back().params;

  // Independent loop: plain Adam, same batches, same clipping and schedule.
  auto p = init_params<float>(r.lm_config, r.init_seed);
  std::vector<double> m(p.values.size(), 0.0), v(p.values.size(), 0.0);
  BatchSchedule schedule(r.order_seed, r.batch_size, t.corpus.size());
  for (int step = 0; step < r.total_steps; ++step) {
    TokenBatch b;
    b.batch_size = r.batch_size;
    b.seq_len = t.corpus.seq_len;
    for (auto i : schedule.indices(step)) {
      const auto s = t.corpus.sequence(i);
      b.tokens.insert(b.tokens.end(), s.begin(), s.end());
    }
    auto g = loss_and_grads(p, b).grads;
    double sq = 0;
    for (float x : g) sq += double(x) * x;
    const double scale = std::sqrt(sq) > r.grad_clip ? r.grad_clip / std::sqrt(sq) : 1.0;
    const double lr = lr_at(r, step + 1);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = float(g[i] * scale);
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.95 * v[i] + 0.05 * gi * gi;
      const double mh = m[i] / (1 - std::pow(0.9, step + 1));
      const double vh = v[i] / (1 - std::pow(0.95, step + 1));
      p.values[i] = static_cast<float>(p.values[i] - lr * mh / (std::sqrt(vh) + 1e-8));
    }
  }
  double worst = 0;
  for (std::size_t i = 0; i < p.values.size(); ++i) worst = std::max(worst, double(std::abs(p.values[i] - trained.values[i])));
  CHECK(worst < 1e-6);
}

TEST_CASE("run directory layout") {
  const auto& t = tiny();
  const auto dir = std::filesystem::temp_directory_path() / "fingerlab_test_rundir";
  std::filesystem::remove_all(dir);
  TrainOptions opt;
  opt.run_dir = dir;
  TrainRun r = t.run;
  r.checkpoint_steps = {6, 12};
  const auto cks = pretrain(r, t.corpus, opt);
  CHECK(std::filesystem::exists(dir / "run.json"));
  CHECK(nlohmann::json::parse(read_file(dir / "run.json")).get<TrainRun>() == r);
  const auto log = read_file(dir / "train_log.csv");
  CHECK(std::count(log.begin(), log.end(), '\n') == 13);
  CHECK(log.rfind("step,loss,lr,grad_norm", 0) == 0);
  CHECK(Checkpoint::load(dir / "checkpoints" / "step_000012.ckpt").checksum() == cks.back().checksum());
  CHECK(std::filesystem::exists(dir / "checkpoints" / "step_000006.ckpt"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite loss aborts and keeps the last good weights") {
  const auto& t = tiny();
  TrainRun r = t.run;
  r.peak_lr = 1e38;
  r.warmup_steps = 0;
  try {
    pretrain(r, t.corpus);
    FAIL("expected TrainingAborted");
  } catch (const TrainingAborted& e) {
    for (float v : e.last_good().params.values) REQUIRE(std::isfinite(v));
    CHECK(e.last_good().step < r.total_steps);
  }
}

TEST_CASE("pretrain preconditions") {
  const auto& t = tiny();
  TrainRun r = t.run;
  r.lm_config.max_seq_len = 32;
  CHECK_THROWS_AS(pretrain(r, t.corpus), ConfigError);
  r = t.run;
  r.warmup_steps = r.total_steps + 1;
  CHECK_THROWS_AS(pretrain(r, t.corpus), ConfigError);
}

TEST_CASE("fine-tuning") {
  const auto& t = tiny();
  Checkpoint base = pretrain(t.run, t.corpus).back();
  std::vector<SftExample> data;
  for (int i = 0; i < 12; ++i) {
    data.push_back({"Q" + std::to_string(i) + "?", "A" + std::to_string(i) + "."});
  }
  TrainRun sft = t.run;
  sft.peak_lr = 1e-3;
  sft.warmup_steps = 0;

  SUBCASE("zero steps is the identity") {
    sft.total_steps = 0;
    const auto out = finetune(base, data, t.tok, sft);
    CHECK(out.checksum() == base.checksum());
  }
  SUBCASE("order seed changes the result; init seed does not") {
    sft.total_steps = 6;
    const auto a = finetune(base, data, t.tok, sft);
    TrainRun other = sft;
    other.order_seed = 99;
    CHECK(finetune(base, data, t.tok, other).checksum() != a.checksum());
    other = sft;
    other.init_seed = 1234;
    CHECK(finetune(base, data, t.tok, other).checksum() == a.checksum());
    CHECK(a.checksum() != base.checksum());
    CHECK(a.init_seed == base.init_seed);
  }
  SUBCASE("mismatched base config") {
    TrainRun other = sft;
    other.lm_config.d_ffn += 8;
    CHECK_THROWS_AS(finetune(base, data, t.tok, other), ConfigError);
  }
}

TEST_CASE("SFT loss mask: prompt positions contribute exactly zero") {
  const auto& t = tiny();
  const auto params = init_params<float>(t.run.lm_config, 3);
  const SftExample ex{"the rose", "grows"};
  const auto row = make_sft_row(t.tok, ex, 16, false);
  const auto n_prompt = t.tok.encode(ex.prompt).size();
  const auto n_resp = t.tok.encode(ex.response).size();
  REQUIRE(row.tokens.size() == n_prompt + n_resp + 2);
  auto losses_for = [&](const SftRow& r) {
    TokenBatch b;
    b.batch_size = 1;
    b.seq_len = static_cast<int>(r.tokens.size());
    b.tokens = r.tokens;
    b.target_weight = r.target_weight;
    return position_losses(params, b);
  };
  const auto before = losses_for(row);
  auto flipped = row;
  flipped.tokens[1] = (flipped.tokens[1] + 1) % t.tok.vocab_size();
  const auto after = losses_for(flipped);
  bool context_changed = false;
  for (std::size_t pos = 0; pos < before.size(); ++pos) {
    const bool target = pos >= n_prompt && pos + 1 < row.tokens.size();
    CHECK((row.target_weight[pos] == 1.0f) == target);
    if (!target) {
      CHECK(before[pos] == 0.0);
      CHECK(after[pos] == 0.0);
    } else {
      CHECK(before[pos] > 0.0);
      context_changed |= before[pos] != after[pos];
    }
  }
  CHECK(context_changed);
  const auto full = make_sft_row(t.tok, ex, 16, true);
  CHECK(full.target_weight[0] == 1.0f);
}

TEST_CASE("over-length SFT prompts are cut from the left") {
  const auto& t = tiny();
  const SftExample ex{"one two three four five six seven eight nine ten", "ok"};
  const auto row = make_sft_row(t.tok, ex, 8, false);
  CHECK(row.truncated);
  CHECK(row.tokens.size() == 8);
  const auto resp = t.tok.encode("ok");
  CHECK(std::equal(resp.begin(), resp.end(), row.tokens.end() - 1 - static_cast<std::ptrdiff_t>(resp.size())));
  const auto prompt = t.tok.encode(ex.prompt);
  CHECK(row.tokens[1] == prompt[prompt.size() - (8 - resp.size() - 2)]);
  CHECK_THROWS_AS(make_sft_row(t.tok, {"p", std::string(40, 'x')}, 8, false), DataError);
}
