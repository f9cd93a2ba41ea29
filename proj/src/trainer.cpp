#include "fingerlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "fingerlab/io.hpp"
#include "fingerlab/serialization.hpp"

namespace fingerlab {

void TrainRun::validate() const {
  lm_config.validate();
  auto fail = [](const std::string& msg) { throw ConfigError("TrainRun: " + msg); };
  if (!(peak_lr > 0.0)) fail("peak_lr must be > 0");
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) fail("min_lr_ratio must be in [0, 1]");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    fail("Adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
  if (total_steps < 0 || warmup_steps < 0) fail("step counts must be >= 0");
  if (warmup_steps > total_steps) fail("warmup_steps must be <= total_steps");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(grad_clip > 0.0)) fail("grad_clip must be > 0");
  for (auto s : checkpoint_steps) {
    if (s < 0 || s > total_steps) fail("checkpoint step " + std::to_string(s) + " outside [0, total_steps]");
  }
}

std::vector<std::int64_t> milestone_steps(std::int64_t total_steps) {
  std::set<std::int64_t> steps;
  for (int pct : {1, 5, 10, 20, 50, 100}) {
    steps.insert(std::max<std::int64_t>(1, (total_steps * pct + 99) / 100));
  }
  if (total_steps == 0) return {0};
  return {steps.begin(), steps.end()};
}

std::vector<std::int64_t> TrainRun::resolved_checkpoint_steps() const {
  if (checkpoint_steps.empty()) return milestone_steps(total_steps);
  std::set<std::int64_t> s(checkpoint_steps.begin(), checkpoint_steps.end());
  return {s.begin(), s.end()};
}

double lr_at(const TrainRun& run, std::int64_t step) {
  if (step < 0 || step > run.total_steps) {
    throw LogicError("lr_at: step " + std::to_string(step) + " outside [0, " +
                     std::to_string(run.total_steps) + "]");
  }
  if (step < run.warmup_steps) {
    return run.peak_lr * static_cast<double>(step) / static_cast<double>(run.warmup_steps);
  }
  const std::int64_t decay_steps = run.total_steps - run.warmup_steps;
  if (decay_steps == 0) return run.peak_lr;
  const double progress = static_cast<double>(step - run.warmup_steps) / static_cast<double>(decay_steps);
  if (run.schedule == Schedule::kLinear) return run.peak_lr * (1.0 - progress);
  const double min_lr = run.min_lr_ratio * run.peak_lr;
  return min_lr + (run.peak_lr - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

DataOrder make_order(std::uint64_t order_seed, std::size_t n_items, std::uint64_t epoch) {
  DataOrder order{order_seed, epoch, {}};
  order.permutation.resize(n_items);
  for (std::size_t i = 0; i < n_items; ++i) order.permutation[i] = static_cast<std::uint32_t>(i);
  Rng rng("trainer.order", {order_seed, epoch});
  shuffle(order.permutation, rng);
  return order;
}

BatchSchedule::BatchSchedule(std::uint64_t order_seed, int batch_size, std::size_t n_items)
    : order_seed_(order_seed), batch_size_(batch_size), n_(n_items), order_(make_order(order_seed, n_items, 0)) {}

std::vector<std::uint32_t> BatchSchedule::indices(std::int64_t step) {
  std::vector<std::uint32_t> out;
  out.reserve(batch_size_);
  for (int i = 0; i < batch_size_; ++i) {
    const auto global = static_cast<std::uint64_t>(step) * batch_size_ + i;
    const std::uint64_t epoch = global / n_;
    if (epoch != order_.epoch) order_ = make_order(order_seed_, n_, epoch);
    out.push_back(order_.permutation[global % n_]);
  }
  return out;
}

PackedCorpus pack_documents(const TokenizerModel& tokenizer, std::span<const std::string> docs,
                            int seq_len) {
  if (seq_len < 2) throw ConfigError("pack_documents: seq_len must be >= 2");
  PackedCorpus out;
  out.seq_len = seq_len;
  for (const auto& d : docs) {
    out.tokens.push_back(tokenizer.bos());
    const auto ids = tokenizer.encode(d);
    out.tokens.insert(out.tokens.end(), ids.begin(), ids.end());
    out.tokens.push_back(tokenizer.eos());
  }
  out.tokens.resize(out.tokens.size() / seq_len * seq_len);
  if (out.tokens.empty()) throw DataError("pack_documents: corpus shorter than one sequence");
  return out;
}

double mean_loss(const LMParams& params, const PackedCorpus& corpus, int batch_size) {
  double sum = 0.0, weight = 0.0;
  for (std::size_t start = 0; start < corpus.size(); start += batch_size) {
    TokenBatch b;
    b.seq_len = corpus.seq_len;
    for (std::size_t i = start; i < std::min(corpus.size(), start + batch_size); ++i) {
      const auto s = corpus.sequence(i);
      b.tokens.insert(b.tokens.end(), s.begin(), s.end());
      ++b.batch_size;
    }
    for (double l : position_losses(params, b)) sum += l;
    weight += static_cast<double>(b.batch_size) * (b.seq_len - 1);
  }
  return weight > 0 ? sum / weight : 0.0;
}

AdamW::AdamW(std::size_t n_params, double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay), m_(n_params, 0.0), v_(n_params, 0.0) {}

template <typename Real>
void AdamW::step(std::span<Real> params, std::span<const Real> grads, const ParamLayout& layout, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& slot : layout.tensors) {
    const double decay = slot.decay ? 1.0 - lr * weight_decay_ : 1.0;
    for (std::size_t i = slot.offset; i < slot.offset + slot.size(); ++i) {
      const double g = grads[i];
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
      const double update = (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_);
      params[i] = static_cast<Real>(static_cast<double>(params[i]) * decay - lr * update);
    }
  }
}

template <typename Real>
double clip_global_norm(std::span<Real> grads, double max_norm) {
  double sq = 0.0;
  for (Real g : grads) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Real& g : grads) g = static_cast<Real>(g * s);
  }
  return norm;
}

template void AdamW::step<float>(std::span<float>, std::span<const float>, const ParamLayout&, double);
template void AdamW::step<double>(std::span<double>, std::span<const double>, const ParamLayout&, double);
template double clip_global_norm<float>(std::span<float>, double);
template double clip_global_norm<double>(std::span<double>, double);

namespace {

// Shared optimization loop for pretraining and fine-tuning. `make_batch`
// returns the batch for a 0-based update index.
class Loop {
 public:
  Loop(const TrainRun& run, const TrainOptions& options, std::string dropout_domain)
      : run_(run), options_(options), dropout_domain_(std::move(dropout_domain)) {
    if (options_.run_dir) {
      std::filesystem::create_directories(*options_.run_dir / "checkpoints");
      write_file_atomic(*options_.run_dir / "run.json", nlohmann::json(run).dump(2));
      log_ << "step,loss,lr,grad_norm\n";
    }
  }

  template <typename BatchFn>
  std::vector<Checkpoint> run(Checkpoint state, BatchFn&& make_batch) {
    const auto wanted = run_.resolved_checkpoint_steps();
    std::vector<Checkpoint> saved;
    auto maybe_save = [&](std::int64_t step) {
      if (!std::binary_search(wanted.begin(), wanted.end(), step)) return;
      state.step = step;
      if (options_.run_dir) {
        char name[32];
        std::snprintf(name, sizeof name, "step_%06lld.ckpt", static_cast<long long>(step));
        state.save(*options_.run_dir / "checkpoints" / name);
      }
      saved.push_back(state);
    };
    maybe_save(0);
    AdamW opt(state.params.values.size(), run_.adam_beta1, run_.adam_beta2, run_.adam_eps, run_.weight_decay);
    for (std::int64_t step = 0; step < run_.total_steps; ++step) {
      const TokenBatch batch = make_batch(step);
      Rng dropout(dropout_domain_, {run_.order_seed, static_cast<std::uint64_t>(step)});
      auto abort = [&](const std::string& why) {
        state.step = step;
        flush_log();
        if (options_.run_dir) state.save(*options_.run_dir / "checkpoints" / "last_good.ckpt");
        throw TrainingAborted("training aborted at update " + std::to_string(step + 1) + ": " + why, state);
      };
      LossAndGrads<float> r;
      try {
        r = loss_and_grads(state.params, batch, &dropout);
      } catch (const NumericError& e) {
        abort(e.what());
      }
      StepStats stats;
      stats.step = step + 1;
      stats.loss = r.loss;
      stats.grad_norm = clip_global_norm(std::span<float>(r.grads), run_.grad_clip);
      if (!std::isfinite(stats.grad_norm)) abort("non-finite gradient norm");
      double sq = 0.0;
      for (float g : r.grads) sq += static_cast<double>(g) * g;
      stats.clipped_norm = std::sqrt(sq);
      stats.lr = lr_at(run_, step + 1);
      opt.step(std::span<float>(state.params.values), std::span<const float>(r.grads), state.params.layout,
               stats.lr);
      if (options_.observer) options_.observer(stats);
      if (options_.run_dir) log_ << stats.step << ',' << stats.loss << ',' << stats.lr << ',' << stats.grad_norm << '\n';
      maybe_save(step + 1);
    }
    flush_log();
    return saved;
  }

 private:
  void flush_log() {
    if (options_.run_dir) write_file_atomic(*options_.run_dir / "train_log.csv", log_.str());
  }

  const TrainRun& run_;
  const TrainOptions& options_;
  std::string dropout_domain_;
  std::ostringstream log_;
};

}  // namespace

std::vector<Checkpoint> pretrain(const TrainRun& run, const PackedCorpus& corpus, const TrainOptions& options) {
  run.validate();
  if (corpus.seq_len != run.lm_config.max_seq_len) {
    throw ConfigError("pretrain: corpus sequence length " + std::to_string(corpus.seq_len) +
                      " != max_seq_len " + std::to_string(run.lm_config.max_seq_len));
  }
  if (corpus.size() == 0) throw DataError("pretrain: empty corpus");
  Checkpoint state;
  state.params = init_params<float>(run.lm_config, run.init_seed);
  state.init_seed = run.init_seed;
  state.order_seed = run.order_seed;
  state.tokenizer_hash = options.tokenizer_hash;

  BatchSchedule schedule(run.order_seed, run.batch_size, corpus.size());
  auto make_batch = [&](std::int64_t step) {
    TokenBatch b;
    b.batch_size = run.batch_size;
    b.seq_len = corpus.seq_len;
    for (auto idx : schedule.indices(step)) {
      const auto seq = corpus.sequence(idx);
      b.tokens.insert(b.tokens.end(), seq.begin(), seq.end());
    }
    return b;
  };
  Loop loop(run, options, "trainer.dropout");
  return loop.run(std::move(state), make_batch);
}

SftRow make_sft_row(const TokenizerModel& tokenizer, const SftExample& example, int max_seq_len,
                    bool full_sequence_loss) {
  auto prompt = tokenizer.encode(example.prompt);
  const auto response = tokenizer.encode(example.response);
  SftRow row;
  const std::size_t fixed = response.size() + 2;  // BOS, EOS
  if (fixed > static_cast<std::size_t>(max_seq_len)) {
    throw DataError("SFT response of " + std::to_string(response.size()) +
                    " tokens does not fit max_seq_len " + std::to_string(max_seq_len));
  }
  if (fixed + prompt.size() > static_cast<std::size_t>(max_seq_len)) {
    const std::size_t keep = max_seq_len - fixed;
    prompt.erase(prompt.begin(), prompt.end() - static_cast<std::ptrdiff_t>(keep));
    row.truncated = true;
  }
  row.tokens.push_back(tokenizer.bos());
  row.tokens.insert(row.tokens.end(), prompt.begin(), prompt.end());
  row.tokens.insert(row.tokens.end(), response.begin(), response.end());
  row.tokens.push_back(tokenizer.eos());
  // Position t predicts tokens[t + 1]; responses start at index 1 + |prompt|.
  row.target_weight.assign(row.tokens.size(), 0.0f);
  const std::size_t first_target = full_sequence_loss ? 0 : prompt.size();
  for (std::size_t t = first_target; t + 1 < row.tokens.size(); ++t) row.target_weight[t] = 1.0f;
  return row;
}

Checkpoint finetune(const Checkpoint& base, std::span<const SftExample> data, const TokenizerModel& tokenizer,
                    const TrainRun& run, const TrainOptions& options) {
  run.validate();
  if (!(base.config() == run.lm_config)) throw ConfigError("finetune: base config does not match run.lm_config");
  if (data.empty() && run.total_steps > 0) throw DataError("finetune: no SFT examples");
  if (tokenizer.n_tokens() != run.lm_config.vocab_size) {
    throw ConfigError("finetune: tokenizer size does not match the model vocabulary");
  }
  std::vector<SftRow> rows;
  int truncated = 0;
  for (const auto& ex : data) {
    rows.push_back(make_sft_row(tokenizer, ex, run.lm_config.max_seq_len, run.sft_full_sequence_loss));
    truncated += rows.back().truncated;
  }
  if (truncated > 0) spdlog::info("finetune: truncated {} of {} prompts from the left", truncated, rows.size());

  BatchSchedule schedule(run.order_seed, run.batch_size, std::max<std::size_t>(rows.size(), 1));
  auto make_batch = [&](std::int64_t step) {
    std::vector<const SftRow*> picked;
    for (auto idx : schedule.indices(step)) picked.push_back(&rows[idx]);
    std::vector<std::vector<TokenId>> toks;
    for (const auto* r : picked) toks.push_back(r->tokens);
    TokenBatch b = TokenBatch::from_rows(toks, tokenizer.pad());
    b.target_weight.assign(b.tokens.size(), 0.0f);
    for (std::size_t i = 0; i < picked.size(); ++i) {
      std::copy(picked[i]->target_weight.begin(), picked[i]->target_weight.end(),
                b.target_weight.begin() + static_cast<std::ptrdiff_t>(i) * b.seq_len);
    }
    return b;
  };

  Checkpoint state = base;
  state.order_seed = run.order_seed;
  state.step = 0;
  TrainRun tuned = run;
  tuned.checkpoint_steps = {run.total_steps};
  Loop loop(tuned, options, "finetune.dropout");
  auto out = loop.run(std::move(state), make_batch);
  return out.back();
}

}  // namespace fingerlab
