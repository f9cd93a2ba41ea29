#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fingerlab/rng.hpp"
#include "fingerlab/tokenizer.hpp"

namespace fingerlab {

// Architecture of one decoder-only LM (or, with causal=false at call sites,
// the encoder trunk of the attribution classifier).
struct LMConfig {
  int n_layers = 2;
  int d_model = 64;
  int d_ffn = 176;
  int n_heads = 4;
  int n_kv_heads = 2;
  int vocab_size = 259;
  int max_seq_len = 128;
  double dropout_rate = 0.0;
  // Multiply token embeddings by sqrt(d_model) before the first block.
  bool scaled_embed = false;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws ConfigError
  bool operator==(const LMConfig&) const = default;
};

struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 1;
  bool decay = false;  // matrices take weight decay, norm gains and biases do not
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

struct BlockSlots {
  TensorSlot attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down;
};

// Flat parameter storage layout. Storage order (also the checkpoint order):
// embed, then per block {attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up,
// w_down}, then final_norm, head, and head_bias when present. Matrices are
// row-major [in, out] so that y = x * W.
struct ParamLayout {
  ParamLayout() = default;
  ParamLayout(const LMConfig& config, int head_outputs, bool head_bias);

  TensorSlot embed;
  std::vector<BlockSlots> blocks;
  TensorSlot final_norm, head, head_bias;
  std::vector<TensorSlot> tensors;
  std::size_t total = 0;
};

template <typename Real>
struct BasicParams {
  LMConfig config;
  int head_outputs = 0;
  bool head_bias = false;
  ParamLayout layout;
  std::vector<Real> values;

  template <typename Other>
  BasicParams<Other> cast() const {
    BasicParams<Other> out{config, head_outputs, head_bias, layout, {}};
    out.values.assign(values.begin(), values.end());
    return out;
  }
  // FNV-1a over the raw value bytes.
  std::uint64_t checksum() const;
};

// Weights of a language model. The double-precision instantiation is the
// high-precision mode used by gradient checks.
using LMParams = BasicParams<float>;
using LMParamsF64 = BasicParams<double>;

template <typename Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Truncated normal(0, 0.02) for matrices, output projections (wo, w_down)
// scaled by 1/sqrt(2 n_layers), norm gains 1, biases 0. Drawn from a stream
// keyed only by init_seed. head_outputs = 0 means config.vocab_size.
template <typename Real>
BasicParams<Real> init_params(const LMConfig& config, std::uint64_t init_seed,
                              int head_outputs = 0, bool head_bias = false);

enum class Mode { kTrain, kEval };

struct TokenBatch {
  int batch_size = 0;
  int seq_len = 0;
  std::vector<TokenId> tokens;  // [batch_size, seq_len] row-major
  // Optional [batch_size, seq_len]; 0 marks padding that no position may
  // attend to.
  std::vector<std::uint8_t> valid;
  // Optional [batch_size, seq_len]; weight of predicting tokens[t + 1] from
  // position t. Default: 1 for every t < seq_len - 1 whose next token is valid.
  std::vector<float> target_weight;

  // Right-pads rows to the longest one and fills `valid`.
  static TokenBatch from_rows(std::span<const std::vector<TokenId>> rows, TokenId pad);
  std::size_t positions() const { return tokens.size(); }
};

// Causal LM logits, one row per (sequence, position): [batch*seq, vocab].
// Train mode draws dropout masks from `dropout`; eval mode is deterministic.
template <typename Real>
RowMatrix<Real> forward(const BasicParams<Real>& params, const TokenBatch& batch,
                        Mode mode = Mode::kEval, Rng* dropout = nullptr);

template <typename Real>
struct LossAndGrads {
  double loss = 0.0;          // weighted mean next-token cross-entropy
  double weight_total = 0.0;  // number of predicted positions
  std::vector<Real> grads;    // same layout as params.values
};

// Dropout is active when `dropout` is non-null and the rate is positive.
// Throws NumericError naming the first sequence with a non-finite loss.
template <typename Real>
LossAndGrads<Real> loss_and_grads(const BasicParams<Real>& params, const TokenBatch& batch,
                                  Rng* dropout = nullptr);

// Eval-mode per-position weighted losses [batch*seq]; positions with zero
// target weight are exactly 0.
template <typename Real>
std::vector<double> position_losses(const BasicParams<Real>& params, const TokenBatch& batch);

// Runs the transformer trunk and keeps what backward() needs. Shared by the
// LM head and the sequence-classification head.
template <typename Real>
class TransformerPass {
 public:
  TransformerPass(const BasicParams<Real>& params, bool causal);
  ~TransformerPass();
  TransformerPass(const TransformerPass&) = delete;
  TransformerPass& operator=(const TransformerPass&) = delete;

  // Final normalized hidden states [batch*seq, d_model].
  const RowMatrix<Real>& run(const TokenBatch& batch, Rng* dropout);
  // Accumulates trunk gradients into `grads` given dLoss/dHidden.
  void backward(const RowMatrix<Real>& d_hidden, std::span<Real> grads);

 private:
  struct State;
  const BasicParams<Real>& params_;
  bool causal_;
  std::unique_ptr<State> state_;
};

// KV-cached single-sequence decoding for generation. Produces the same
// distribution as forward() up to float rounding.
template <typename Real>
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const BasicParams<Real>& params);
  void reset();
  // Appends `token` at the next position and returns logits for the token
  // after it.
  std::span<const Real> push(TokenId token);
  int position() const { return pos_; }

 private:
  const BasicParams<Real>& params_;
  int pos_ = 0;
  std::vector<RowMatrix<Real>> k_cache_, v_cache_;
  std::vector<Real> logits_;
};

// A saved LM (or encoder trunk + head) with its provenance.
struct Checkpoint {
  LMParams params;
  std::uint64_t init_seed = 0;
  std::uint64_t order_seed = 0;
  std::int64_t step = 0;
  std::uint64_t tokenizer_hash = 0;

  const LMConfig& config() const { return params.config; }
  std::uint64_t checksum() const { return params.checksum(); }

  // Versioned little-endian format, see docs/formats.md.
  std::string serialize() const;
  static Checkpoint deserialize(std::string_view bytes);
  void save(const std::filesystem::path& path) const;  // atomic
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace fingerlab
