#include "fingerlab/serialization.hpp"

#include <string>

#include "fingerlab/error.hpp"

namespace fingerlab {
void require_known_keys(const nlohmann::json& j, std::initializer_list<std::string_view> keys,
                        std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (auto key : keys) known |= key == k;
    if (!known) throw ConfigError(std::string(where) + ": unknown key '" + k + "'");
  }
}

void to_json(nlohmann::json& j, const LMConfig& c) {
  j = {{"n_layers", c.n_layers},     {"d_model", c.d_model},         {"d_ffn", c.d_ffn},
       {"n_heads", c.n_heads},       {"n_kv_heads", c.n_kv_heads},   {"vocab_size", c.vocab_size},
       {"max_seq_len", c.max_seq_len}, {"dropout_rate", c.dropout_rate}, {"scaled_embed", c.scaled_embed}};
}

void from_json(const nlohmann::json& j, LMConfig& c) {
  constexpr std::string_view w = "lm_config";
  require_known_keys(j, {"n_layers", "d_model", "d_ffn", "n_heads", "n_kv_heads", "vocab_size",
                         "max_seq_len", "dropout_rate", "scaled_embed"},
                     w);
  read_opt(j, "n_layers", c.n_layers, w);
  read_opt(j, "d_model", c.d_model, w);
  read_opt(j, "d_ffn", c.d_ffn, w);
  read_opt(j, "n_heads", c.n_heads, w);
  read_opt(j, "n_kv_heads", c.n_kv_heads, w);
  read_opt(j, "vocab_size", c.vocab_size, w);
  read_opt(j, "max_seq_len", c.max_seq_len, w);
  read_opt(j, "dropout_rate", c.dropout_rate, w);
  read_opt(j, "scaled_embed", c.scaled_embed, w);
}

void to_json(nlohmann::json& j, const TrainRun& r) {
  j = {{"lm_config", r.lm_config},
       {"peak_lr", r.peak_lr},
       {"min_lr_ratio", r.min_lr_ratio},
       {"schedule", r.schedule == Schedule::kCosine ? "cosine" : "linear"},
       {"weight_decay", r.weight_decay},
       {"adam_beta1", r.adam_beta1},
       {"adam_beta2", r.adam_beta2},
       {"adam_eps", r.adam_eps},
       {"warmup_steps", r.warmup_steps},
       {"total_steps", r.total_steps},
       {"batch_size", r.batch_size},
       {"grad_clip", r.grad_clip},
       {"init_seed", r.init_seed},
       {"order_seed", r.order_seed},
       {"checkpoint_steps", r.checkpoint_steps},
       {"sft_full_sequence_loss", r.sft_full_sequence_loss}};
}

void from_json(const nlohmann::json& j, TrainRun& r) {
  constexpr std::string_view w = "train_run";
  require_known_keys(j, {"lm_config", "peak_lr", "min_lr_ratio", "schedule", "weight_decay",
                         "adam_beta1", "adam_beta2", "adam_eps", "warmup_steps", "total_steps",
                         "batch_size", "grad_clip", "init_seed", "order_seed", "checkpoint_steps",
                         "sft_full_sequence_loss"},
                     w);
  if (const auto it = j.find("lm_config"); it != j.end()) from_json(*it, r.lm_config);
  read_opt(j, "peak_lr", r.peak_lr, w);
  read_opt(j, "min_lr_ratio", r.min_lr_ratio, w);
  std::string schedule = r.schedule == Schedule::kCosine ? "cosine" : "linear";
  read_opt(j, "schedule", schedule, w);
  if (schedule == "cosine") {
    r.schedule = Schedule::kCosine;
  } else if (schedule == "linear") {
    r.schedule = Schedule::kLinear;
  } else {
    throw ConfigError("train_run.schedule: expected 'cosine' or 'linear', got '" + schedule + "'");
  }
  read_opt(j, "weight_decay", r.weight_decay, w);
  read_opt(j, "adam_beta1", r.adam_beta1, w);
  read_opt(j, "adam_beta2", r.adam_beta2, w);
  read_opt(j, "adam_eps", r.adam_eps, w);
  read_opt(j, "warmup_steps", r.warmup_steps, w);
  read_opt(j, "total_steps", r.total_steps, w);
  read_opt(j, "batch_size", r.batch_size, w);
  read_opt(j, "grad_clip", r.grad_clip, w);
  read_opt(j, "init_seed", r.init_seed, w);
  read_opt(j, "order_seed", r.order_seed, w);
  read_opt(j, "checkpoint_steps", r.checkpoint_steps, w);
  read_opt(j, "sft_full_sequence_loss", r.sft_full_sequence_loss, w);
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"lm_config", c.lm},
       {"peak_lr", c.peak_lr},
       {"batch_size", c.batch_size},
       {"warmup_fraction", c.warmup_fraction},
       {"epochs", c.epochs},
       {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip},
       {"evals_per_epoch", c.evals_per_epoch},
       {"init_seed", c.init_seed},
       {"order_seed", c.order_seed}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  constexpr std::string_view w = "encoder";
  require_known_keys(j, {"lm_config", "peak_lr", "batch_size", "warmup_fraction", "epochs",
                         "weight_decay", "grad_clip", "evals_per_epoch", "init_seed", "order_seed"},
                     w);
  if (const auto it = j.find("lm_config"); it != j.end()) {
    // Partial lm_config objects override the encoder defaults key by key.
    nlohmann::json merged = c.lm;
    merged.merge_patch(*it);
    c.lm = merged.get<LMConfig>();
  }
  read_opt(j, "peak_lr", c.peak_lr, w);
  read_opt(j, "batch_size", c.batch_size, w);
  read_opt(j, "warmup_fraction", c.warmup_fraction, w);
  read_opt(j, "epochs", c.epochs, w);
  read_opt(j, "weight_decay", c.weight_decay, w);
  read_opt(j, "grad_clip", c.grad_clip, w);
  read_opt(j, "evals_per_epoch", c.evals_per_epoch, w);
  read_opt(j, "init_seed", c.init_seed, w);
  read_opt(j, "order_seed", c.order_seed, w);
}

void to_json(nlohmann::json& j, const LinearOptions& o) {
  j = {{"C", o.C}, {"tol", o.tol}, {"max_newton_iters", o.max_newton_iters}, {"max_cg_iters", o.max_cg_iters}};
}

void from_json(const nlohmann::json& j, LinearOptions& o) {
  constexpr std::string_view w = "linear";
  require_known_keys(j, {"C", "tol", "max_newton_iters", "max_cg_iters"}, w);
  read_opt(j, "C", o.C, w);
  read_opt(j, "tol", o.tol, w);
  read_opt(j, "max_newton_iters", o.max_newton_iters, w);
  read_opt(j, "max_cg_iters", o.max_cg_iters, w);
}

void to_json(nlohmann::json& j, const FilterOptions& o) {
  j = {{"n", o.n}, {"threshold", o.threshold}, {"continuation_only", o.continuation_only}, {"word_level", o.word_level}};
}

void from_json(const nlohmann::json& j, FilterOptions& o) {
  constexpr std::string_view w = "filter";
  require_known_keys(j, {"n", "threshold", "continuation_only", "word_level"}, w);
  read_opt(j, "n", o.n, w);
  read_opt(j, "threshold", o.threshold, w);
  read_opt(j, "continuation_only", o.continuation_only, w);
  read_opt(j, "word_level", o.word_level, w);
}

}  // namespace fingerlab
