#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fingerlab/lm.hpp"
#include "fingerlab/tokenizer.hpp"

namespace fingerlab {

// Bidirectional encoder over [BOS] + tokens, mean-pooled over non-padding
// positions, then a linear head with bias. Reuses the LM trunk with causal
// masking off.
struct EncoderConfig {
  LMConfig lm = default_lm();
  double peak_lr = 2e-5;
  int batch_size = 64;
  double warmup_fraction = 0.1;
  double epochs = 1.0;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  int evals_per_epoch = 10;
  std::uint64_t init_seed = 0;
  std::uint64_t order_seed = 0;

  static LMConfig default_lm();
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

template <typename Real>
struct ClassifierLoss {
  double loss = 0;  // mean cross-entropy over the batch
  std::vector<Real> grads;
};

// Logits [batch, n_classes].
template <typename Real>
RowMatrix<Real> classifier_logits(const BasicParams<Real>& params, const TokenBatch& batch);

template <typename Real>
ClassifierLoss<Real> classifier_loss_and_grads(const BasicParams<Real>& params,
                                               const TokenBatch& batch,
                                               std::span<const int> labels, Rng* dropout);

struct EncoderAttributor {
  EncoderConfig config;
  std::vector<std::string> class_names;
  LMParams params;
  std::int64_t steps_trained = 0;
  std::int64_t best_step = 0;
  double best_val_accuracy = 0;
  bool improved = false;  // some evaluation beat the untrained model

  int n_classes() const { return static_cast<int>(class_names.size()); }
  // [BOS] + encode(text), cut to max_seq_len.
  std::vector<TokenId> input_ids(const std::string& text, const TokenizerModel& tokenizer) const;
  std::vector<int> predict(std::span<const std::string> texts, const TokenizerModel& tokenizer) const;

  // <dir>/encoder.ckpt and <dir>/encoder.json
  void save(const std::filesystem::path& dir) const;
  static EncoderAttributor load(const std::filesystem::path& dir);
};

struct LabeledTexts {
  std::vector<std::string> texts;
  std::vector<int> labels;
};

// Adam with linear warmup then linear decay to zero; validation accuracy is
// measured every 1/evals_per_epoch of an epoch and the best weights are
// returned.
EncoderAttributor train_encoder(const LabeledTexts& train, const LabeledTexts& val,
                                std::vector<std::string> class_names,
                                const TokenizerModel& tokenizer, EncoderConfig config);

}  // namespace fingerlab
