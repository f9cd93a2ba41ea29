#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fingerlab/error.hpp"
#include "fingerlab/lm.hpp"
#include "fingerlab/tokenizer.hpp"

namespace fingerlab {

enum class Schedule {
  kCosine,  // linear warmup, cosine decay to min_lr_ratio * peak_lr
  kLinear,  // linear warmup, linear decay to 0 (classifier fine-tuning)
};

// Full training recipe. init_seed and order_seed are independent: the first
// keys the initial weights only, the second keys data order and dropout.
struct TrainRun {
  LMConfig lm_config;
  double peak_lr = 3e-4;
  double min_lr_ratio = 0.1;
  Schedule schedule = Schedule::kCosine;
  double weight_decay = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  std::int64_t warmup_steps = 300;
  std::int64_t total_steps = 3000;
  int batch_size = 32;
  double grad_clip = 1.0;
  std::uint64_t init_seed = 1;
  std::uint64_t order_seed = 1;
  // Empty means the default milestones, see milestone_steps().
  std::vector<std::int64_t> checkpoint_steps;
  // Fine-tuning only: train on every token instead of response tokens.
  bool sft_full_sequence_loss = false;

  void validate() const;  // throws ConfigError
  std::vector<std::int64_t> resolved_checkpoint_steps() const;
  bool operator==(const TrainRun&) const = default;
};

// Steps at 1%, 5%, 10%, 20%, 50% and 100% of total_steps (rounded up,
// deduplicated).
std::vector<std::int64_t> milestone_steps(std::int64_t total_steps);

// Learning rate used for update number `step` (1-based; step 0 is the start
// of warmup). Throws LogicError outside [0, total_steps].
double lr_at(const TrainRun& run, std::int64_t step);

struct DataOrder {
  std::uint64_t order_seed = 0;
  std::uint64_t epoch = 0;
  std::vector<std::uint32_t> permutation;
};

// Fisher-Yates permutation of [0, n_items) from a stream keyed by
// (order_seed, epoch).
DataOrder make_order(std::uint64_t order_seed, std::size_t n_items, std::uint64_t epoch);

// Item indices for each update: the epoch-major concatenation of
// make_order(order_seed, n_items, 0), (..., 1), ... cut into batches.
class BatchSchedule {
 public:
  BatchSchedule(std::uint64_t order_seed, int batch_size, std::size_t n_items);
  std::vector<std::uint32_t> indices(std::int64_t step);

 private:
  std::uint64_t order_seed_;
  int batch_size_;
  std::size_t n_;
  DataOrder order_;
};

// Fixed-length training sequences cut from BOS doc EOS BOS doc EOS ...
struct PackedCorpus {
  int seq_len = 0;
  std::vector<TokenId> tokens;

  std::size_t size() const { return seq_len == 0 ? 0 : tokens.size() / seq_len; }
  std::span<const TokenId> sequence(std::size_t i) const {
    return {tokens.data() + i * seq_len, static_cast<std::size_t>(seq_len)};
  }
};

PackedCorpus pack_documents(const TokenizerModel& tokenizer, std::span<const std::string> docs,
                            int seq_len);

// Mean next-token loss over every sequence; perplexity = exp(result).
double mean_loss(const LMParams& params, const PackedCorpus& corpus, int batch_size = 16);

struct StepStats {
  std::int64_t step = 0;  // number of updates applied so far
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;     // before clipping
  double clipped_norm = 0.0;  // after clipping
};

struct TrainOptions {
  // When set: run.json, train_log.csv and checkpoints/step_NNNNNN.ckpt are
  // written under this directory.
  std::optional<std::filesystem::path> run_dir;
  std::function<void(const StepStats&)> observer;
  std::uint64_t tokenizer_hash = 0;
};

// Thrown when the loss goes non-finite; carries the parameters from before
// the failing update.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, Checkpoint last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const Checkpoint& last_good() const { return last_good_; }

 private:
  Checkpoint last_good_;
};

// AdamW with decoupled weight decay applied only to tensors flagged `decay`.
class AdamW {
 public:
  AdamW(std::size_t n_params, double beta1, double beta2, double eps, double weight_decay);
  template <typename Real>
  void step(std::span<Real> params, std::span<const Real> grads, const ParamLayout& layout, double lr);
  std::int64_t steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
  std::vector<double> m_, v_;
};

// Scales grads in place so their global L2 norm is at most max_norm; returns
// the norm before clipping.
template <typename Real>
double clip_global_norm(std::span<Real> grads, double max_norm);

// Returns one checkpoint per resolved checkpoint step, in step order.
std::vector<Checkpoint> pretrain(const TrainRun& run, const PackedCorpus& corpus,
                                 const TrainOptions& options = {});

struct SftExample {
  std::string prompt;
  std::string response;
};

// Token row and loss mask for one instruction example: BOS prompt response
// EOS, with the prompt truncated from the left to fit max_seq_len.
struct SftRow {
  std::vector<TokenId> tokens;
  std::vector<float> target_weight;
  bool truncated = false;
};
SftRow make_sft_row(const TokenizerModel& tokenizer, const SftExample& example, int max_seq_len,
                    bool full_sequence_loss);

// run.total_steps updates over the examples (order from run.order_seed);
// run.init_seed is ignored because the weights come from `base`.
Checkpoint finetune(const Checkpoint& base, std::span<const SftExample> data,
                    const TokenizerModel& tokenizer, const TrainRun& run,
                    const TrainOptions& options = {});

}  // namespace fingerlab
