#include "fingerlab/lm.hpp"

#include <cmath>
#include <limits>

#include "fingerlab/error.hpp"
#include "fingerlab/io.hpp"

namespace fingerlab {

void LMConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("LMConfig: " + msg); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (d_model < 2 || d_ffn < 1) fail("d_model and d_ffn must be positive");
  if (n_heads < 1 || n_kv_heads < 1) fail("head counts must be positive");
  if (n_heads % n_kv_heads != 0) fail("n_heads must be divisible by n_kv_heads");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) fail("head dimension must be even for rotary embeddings");
  if (vocab_size < 1) fail("vocab_size must be positive");
  if (max_seq_len < 2) fail("max_seq_len must be >= 2");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must be in [0, 1)");
}

ParamLayout::ParamLayout(const LMConfig& c, int head_outputs, bool with_bias) {
  auto add = [&](std::string name, int rows, int cols, bool decay) {
    TensorSlot s{std::move(name), total, rows, cols, decay};
    total += s.size();
    tensors.push_back(s);
    return s;
  };
  const int D = c.d_model;
  const int hd = c.head_dim();
  embed = add("embed", c.vocab_size, D, true);
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    BlockSlots b;
    b.attn_norm = add(p + "attn_norm", 1, D, false);
    b.wq = add(p + "wq", D, c.n_heads * hd, true);
    b.wk = add(p + "wk", D, c.n_kv_heads * hd, true);
    b.wv = add(p + "wv", D, c.n_kv_heads * hd, true);
    b.wo = add(p + "wo", c.n_heads * hd, D, true);
    b.ffn_norm = add(p + "ffn_norm", 1, D, false);
    b.w_gate = add(p + "w_gate", D, c.d_ffn, true);
    b.w_up = add(p + "w_up", D, c.d_ffn, true);
    b.w_down = add(p + "w_down", c.d_ffn, D, true);
    blocks.push_back(std::move(b));
  }
  final_norm = add("final_norm", 1, D, false);
  head = add("head", D, head_outputs, true);
  if (with_bias) head_bias = add("head_bias", 1, head_outputs, false);
}

template <typename Real>
std::uint64_t BasicParams<Real>::checksum() const {
  return Fnv1a{}
      .update(std::span(reinterpret_cast<const std::uint8_t*>(values.data()),
                        values.size() * sizeof(Real)))
      .digest();
}

template <typename Real>
BasicParams<Real> init_params(const LMConfig& config, std::uint64_t init_seed,
                              int head_outputs, bool head_bias) {
  config.validate();
  if (head_outputs <= 0) head_outputs = config.vocab_size;
  BasicParams<Real> p{config, head_outputs, head_bias,
                      ParamLayout(config, head_outputs, head_bias), {}};
  p.values.assign(p.layout.total, Real(0));
  Rng rng("lm.init", {init_seed});
  const double proj_std = 0.02 / std::sqrt(2.0 * config.n_layers);
  auto ends_with = [](const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  for (const auto& t : p.layout.tensors) {
    Real* out = p.values.data() + t.offset;
    if (ends_with(t.name, "norm")) {
      std::fill(out, out + t.size(), Real(1));
    } else if (t.name == "head_bias") {
      continue;
    } else {
      const double std = ends_with(t.name, ".wo") || ends_with(t.name, ".w_down") ? proj_std : 0.02;
      for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<Real>(rng.truncated_normal(std));
    }
  }
  return p;
}

TokenBatch TokenBatch::from_rows(std::span<const std::vector<TokenId>> rows, TokenId pad) {
  TokenBatch b;
  b.batch_size = static_cast<int>(rows.size());
  for (const auto& r : rows) b.seq_len = std::max(b.seq_len, static_cast<int>(r.size()));
  if (b.batch_size == 0 || b.seq_len == 0) throw DataError("TokenBatch: empty batch");
  b.tokens.assign(static_cast<std::size_t>(b.batch_size) * b.seq_len, pad);
  b.valid.assign(b.tokens.size(), 0);
  for (int i = 0; i < b.batch_size; ++i) {
    for (std::size_t t = 0; t < rows[i].size(); ++t) {
      b.tokens[i * b.seq_len + t] = rows[i][t];
      b.valid[i * b.seq_len + t] = 1;
    }
  }
  return b;
}

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kRopeBase = 10000.0;

template <typename Real>
using Mat = RowMatrix<Real>;
template <typename Real>
using Vec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
template <typename Real>
using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

template <typename Real>
Eigen::Map<const Mat<Real>> view(const BasicParams<Real>& p, const TensorSlot& s) {
  return {p.values.data() + s.offset, s.rows, s.cols};
}

template <typename Real>
Eigen::Map<Mat<Real>> view(std::span<Real> g, const TensorSlot& s) {
  return {g.data() + s.offset, s.rows, s.cols};
}

template <typename Real>
void rmsnorm(const Mat<Real>& x, const Eigen::Map<const Mat<Real>>& gain, Mat<Real>& y,
             Vec<Real>& inv_rms) {
  const auto D = x.cols();
  y.resize(x.rows(), D);
  inv_rms.resize(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Real r = Real(1) / std::sqrt(x.row(i).squaredNorm() / Real(D) + Real(kNormEps));
    inv_rms(i) = r;
    y.row(i) = (x.row(i) * r).cwiseProduct(gain.row(0));
  }
}

// dx += d(rmsnorm)/dx^T dy ; dgain += ...
template <typename Real>
void rmsnorm_backward(const Mat<Real>& x, const Vec<Real>& inv_rms,
                      const Eigen::Map<const Mat<Real>>& gain, const Mat<Real>& dy,
                      Mat<Real>& dx, Eigen::Map<Mat<Real>> dgain) {
  const Real D = Real(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Real r = inv_rms(i);
    const RowVec<Real> gy = dy.row(i).cwiseProduct(gain.row(0));
    dgain.row(0) += dy.row(i).cwiseProduct(x.row(i)) * r;
    const Real dot = gy.dot(x.row(i));
    dx.row(i) += gy * r - x.row(i) * (r * r * r * dot / D);
  }
}

template <typename Real>
struct RopeTable {
  Mat<Real> cos, sin;  // [positions, head_dim / 2]
  RopeTable(int positions, int head_dim) : cos(positions, head_dim / 2), sin(positions, head_dim / 2) {
    for (int t = 0; t < positions; ++t) {
      for (int i = 0; i < head_dim / 2; ++i) {
        const double angle = t * std::pow(kRopeBase, -2.0 * i / head_dim);
        cos(t, i) = static_cast<Real>(std::cos(angle));
        sin(t, i) = static_cast<Real>(std::sin(angle));
      }
    }
  }
};

// Rotates pairs (2i, 2i+1) of every head in row `row` by the angle of
// position t; sign = -1 applies the inverse rotation (used by backward).
template <typename Real, typename RowExpr>
void rotate_row(RowExpr&& row, int n_heads, int head_dim, const RopeTable<Real>& rope, int t,
                Real sign) {
  for (int h = 0; h < n_heads; ++h) {
    for (int i = 0; i < head_dim / 2; ++i) {
      const Eigen::Index a = h * head_dim + 2 * i;
      const Real c = rope.cos(t, i);
      const Real s = sign * rope.sin(t, i);
      const Real x0 = row(a), x1 = row(a + 1);
      row(a) = x0 * c - x1 * s;
      row(a + 1) = x0 * s + x1 * c;
    }
  }
}

template <typename Real>
Real sigmoid(Real x) {
  return Real(1) / (Real(1) + std::exp(-x));
}

void check_batch(const LMConfig& c, const TokenBatch& batch) {
  if (batch.batch_size < 1 || batch.seq_len < 1) throw DataError("batch is empty");
  if (batch.tokens.size() != static_cast<std::size_t>(batch.batch_size) * batch.seq_len) {
    throw DataError("batch token count does not match batch_size * seq_len");
  }
  if (batch.seq_len > c.max_seq_len) {
    throw DataError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                    std::to_string(c.max_seq_len));
  }
  for (TokenId id : batch.tokens) {
    if (id < 0 || id >= c.vocab_size) {
      throw DataError("token id " + std::to_string(id) + " out of range [0, " +
                      std::to_string(c.vocab_size) + ")");
    }
  }
  if (!batch.valid.empty()) {
    if (batch.valid.size() != batch.tokens.size()) throw DataError("valid mask has wrong size");
    for (int b = 0; b < batch.batch_size; ++b) {
      bool any = false;
      for (int t = 0; t < batch.seq_len; ++t) any |= batch.valid[b * batch.seq_len + t] != 0;
      if (!any) throw DataError("batch row " + std::to_string(b) + " has no valid tokens");
    }
  }
  if (!batch.target_weight.empty() && batch.target_weight.size() != batch.tokens.size()) {
    throw DataError("target_weight has wrong size");
  }
}

std::vector<float> target_weights(const TokenBatch& batch) {
  if (!batch.target_weight.empty()) {
    std::vector<float> w = batch.target_weight;
    for (int b = 0; b < batch.batch_size; ++b) w[b * batch.seq_len + batch.seq_len - 1] = 0.0f;
    return w;
  }
  std::vector<float> w(batch.tokens.size(), 0.0f);
  for (int b = 0; b < batch.batch_size; ++b) {
    for (int t = 0; t + 1 < batch.seq_len; ++t) {
      const auto n = static_cast<std::size_t>(b) * batch.seq_len + t;
      const bool ok = batch.valid.empty() || (batch.valid[n] && batch.valid[n + 1]);
      w[n] = ok ? 1.0f : 0.0f;
    }
  }
  return w;
}

}  // namespace

template <typename Real>
struct TransformerPass<Real>::State {
  struct Layer {
    Mat<Real> x_in, a, q, k, v, probs, attn_mask, ctx, x_mid, f, gate, up, act, ffn_mask;
    Vec<Real> rms1, rms2;
  };
  int B = 0, T = 0, N = 0;
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> valid;
  bool dropout_on = false;
  std::vector<Layer> layers;
  Mat<Real> x_out, z;
  Vec<Real> rms_f;
  std::unique_ptr<RopeTable<Real>> rope;
};

template <typename Real>
TransformerPass<Real>::TransformerPass(const BasicParams<Real>& params, bool causal)
    : params_(params), causal_(causal), state_(std::make_unique<State>()) {}

template <typename Real>
TransformerPass<Real>::~TransformerPass() = default;

template <typename Real>
const RowMatrix<Real>& TransformerPass<Real>::run(const TokenBatch& batch, Rng* dropout) {
  const LMConfig& c = params_.config;
  const ParamLayout& L = params_.layout;
  check_batch(c, batch);
  State& S = *state_;
  const int B = batch.batch_size, T = batch.seq_len, N = B * T;
  const int D = c.d_model, H = c.n_heads, KV = c.n_kv_heads, hd = c.head_dim();
  const int group = H / KV;
  S.B = B;
  S.T = T;
  S.N = N;
  S.tokens = batch.tokens;
  S.valid = batch.valid;
  S.dropout_on = dropout != nullptr && c.dropout_rate > 0.0;
  if (!S.rope || S.rope->cos.rows() < T) S.rope = std::make_unique<RopeTable<Real>>(T, hd);
  const RopeTable<Real>& rope = *S.rope;
  const Real keep = Real(1.0 - c.dropout_rate);
  const double rate = c.dropout_rate;
  const Real scale = Real(1) / std::sqrt(Real(hd));

  Mat<Real> x(N, D);
  {
    auto E = view(params_, L.embed);
    const Real es = c.scaled_embed ? std::sqrt(Real(D)) : Real(1);
    for (int n = 0; n < N; ++n) x.row(n) = E.row(S.tokens[n]) * es;
  }

  S.layers.resize(c.n_layers);
  for (int l = 0; l < c.n_layers; ++l) {
    const BlockSlots& bs = L.blocks[l];
    auto& Ly = S.layers[l];
    Ly.x_in = x;
    rmsnorm(Ly.x_in, view(params_, bs.attn_norm), Ly.a, Ly.rms1);
    Ly.q.noalias() = Ly.a * view(params_, bs.wq);
    Ly.k.noalias() = Ly.a * view(params_, bs.wk);
    Ly.v.noalias() = Ly.a * view(params_, bs.wv);
    for (int n = 0; n < N; ++n) {
      rotate_row(Ly.q.row(n), H, hd, rope, n % T, Real(1));
      rotate_row(Ly.k.row(n), KV, hd, rope, n % T, Real(1));
    }
    Ly.probs.resize(static_cast<Eigen::Index>(B) * H * T, T);
    if (S.dropout_on) Ly.attn_mask.resize(Ly.probs.rows(), T);
    Ly.ctx.setZero(N, H * hd);
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const int kvh = h / group;
        auto Qh = Ly.q.block(b * T, h * hd, T, hd);
        auto Kh = Ly.k.block(b * T, kvh * hd, T, hd);
        auto Vh = Ly.v.block(b * T, kvh * hd, T, hd);
        auto P = Ly.probs.block((static_cast<Eigen::Index>(b) * H + h) * T, 0, T, T);
        P.noalias() = Qh * Kh.transpose();
        for (int t = 0; t < T; ++t) {
          Real mx = -std::numeric_limits<Real>::infinity();
          for (int s = 0; s < T; ++s) {
            const bool masked = (causal_ && s > t) || (!S.valid.empty() && !S.valid[b * T + s]);
            if (masked) {
              P(t, s) = -std::numeric_limits<Real>::infinity();
            } else {
              P(t, s) *= scale;
              mx = std::max(mx, P(t, s));
            }
          }
          Real sum = 0;
          for (int s = 0; s < T; ++s) {
            const Real e = std::exp(P(t, s) - mx);
            P(t, s) = e;
            sum += e;
          }
          P.row(t) /= sum;
        }
        auto ctx = Ly.ctx.block(b * T, h * hd, T, hd);
        if (S.dropout_on) {
          auto M = Ly.attn_mask.block((static_cast<Eigen::Index>(b) * H + h) * T, 0, T, T);
          for (int t = 0; t < T; ++t) {
            for (int s = 0; s < T; ++s) M(t, s) = dropout->uniform() >= rate ? Real(1) / keep : Real(0);
          }
          ctx.noalias() = P.cwiseProduct(M) * Vh;
        } else {
          ctx.noalias() = P * Vh;
        }
      }
    }
    Ly.x_mid = Ly.x_in;
    Ly.x_mid.noalias() += Ly.ctx * view(params_, bs.wo);

    rmsnorm(Ly.x_mid, view(params_, bs.ffn_norm), Ly.f, Ly.rms2);
    Ly.gate.noalias() = Ly.f * view(params_, bs.w_gate);
    Ly.up.noalias() = Ly.f * view(params_, bs.w_up);
    Ly.act.resize(N, c.d_ffn);
    for (Eigen::Index i = 0; i < Ly.act.size(); ++i) {
      const Real g = Ly.gate.data()[i];
      Ly.act.data()[i] = g * sigmoid(g) * Ly.up.data()[i];
    }
    Mat<Real> ffn = Ly.act * view(params_, bs.w_down);
    if (S.dropout_on) {
      Ly.ffn_mask.resize(N, D);
      for (Eigen::Index i = 0; i < Ly.ffn_mask.size(); ++i) {
        Ly.ffn_mask.data()[i] = dropout->uniform() >= rate ? Real(1) / keep : Real(0);
      }
      ffn = ffn.cwiseProduct(Ly.ffn_mask);
    }
    x = Ly.x_mid + ffn;
  }
  S.x_out = std::move(x);
  rmsnorm(S.x_out, view(params_, L.final_norm), S.z, S.rms_f);
  return S.z;
}

template <typename Real>
void TransformerPass<Real>::backward(const RowMatrix<Real>& d_hidden, std::span<Real> grads) {
  const LMConfig& c = params_.config;
  const ParamLayout& L = params_.layout;
  State& S = *state_;
  const int B = S.B, T = S.T, N = S.N;
  const int D = c.d_model, H = c.n_heads, KV = c.n_kv_heads, hd = c.head_dim();
  const int group = H / KV;
  const RopeTable<Real>& rope = *S.rope;
  const Real scale = Real(1) / std::sqrt(Real(hd));

  Mat<Real> dx = Mat<Real>::Zero(N, D);
  rmsnorm_backward(S.x_out, S.rms_f, view(params_, L.final_norm), d_hidden, dx,
                   view(grads, L.final_norm));

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const BlockSlots& bs = L.blocks[l];
    const auto& Ly = S.layers[l];

    // Feed-forward branch.
    Mat<Real> dffn = S.dropout_on ? Mat<Real>(dx.cwiseProduct(Ly.ffn_mask)) : dx;
    view(grads, bs.w_down).noalias() += Ly.act.transpose() * dffn;
    Mat<Real> dact = dffn * view(params_, bs.w_down).transpose();
    Mat<Real> dgate(N, c.d_ffn), dup(N, c.d_ffn);
    for (Eigen::Index i = 0; i < dact.size(); ++i) {
      const Real g = Ly.gate.data()[i];
      const Real sg = sigmoid(g);
      const Real da = dact.data()[i];
      dup.data()[i] = da * g * sg;
      dgate.data()[i] = da * Ly.up.data()[i] * sg * (Real(1) + g * (Real(1) - sg));
    }
    view(grads, bs.w_gate).noalias() += Ly.f.transpose() * dgate;
    view(grads, bs.w_up).noalias() += Ly.f.transpose() * dup;
    Mat<Real> df = dgate * view(params_, bs.w_gate).transpose();
    df.noalias() += dup * view(params_, bs.w_up).transpose();
    rmsnorm_backward(Ly.x_mid, Ly.rms2, view(params_, bs.ffn_norm), df, dx,
                     view(grads, bs.ffn_norm));

    // Attention branch.
    view(grads, bs.wo).noalias() += Ly.ctx.transpose() * dx;
    Mat<Real> dctx = dx * view(params_, bs.wo).transpose();
    Mat<Real> dq = Mat<Real>::Zero(N, H * hd);
    Mat<Real> dk = Mat<Real>::Zero(N, KV * hd);
    Mat<Real> dv = Mat<Real>::Zero(N, KV * hd);
    Mat<Real> Pd(T, T), dP(T, T);
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const int kvh = h / group;
        const Eigen::Index prow = (static_cast<Eigen::Index>(b) * H + h) * T;
        auto P = Ly.probs.block(prow, 0, T, T);
        auto Qh = Ly.q.block(b * T, h * hd, T, hd);
        auto Kh = Ly.k.block(b * T, kvh * hd, T, hd);
        auto Vh = Ly.v.block(b * T, kvh * hd, T, hd);
        auto dctx_h = dctx.block(b * T, h * hd, T, hd);
        if (S.dropout_on) {
          auto M = Ly.attn_mask.block(prow, 0, T, T);
          Pd = P.cwiseProduct(M);
          dv.block(b * T, kvh * hd, T, hd).noalias() += Pd.transpose() * dctx_h;
          dP.noalias() = dctx_h * Vh.transpose();
          dP = dP.cwiseProduct(M);
        } else {
          dv.block(b * T, kvh * hd, T, hd).noalias() += P.transpose() * dctx_h;
          dP.noalias() = dctx_h * Vh.transpose();
        }
        for (int t = 0; t < T; ++t) {
          const Real dot = P.row(t).dot(dP.row(t));
          for (int s = 0; s < T; ++s) dP(t, s) = P(t, s) * (dP(t, s) - dot) * scale;
        }
        dq.block(b * T, h * hd, T, hd).noalias() += dP * Kh;
        dk.block(b * T, kvh * hd, T, hd).noalias() += dP.transpose() * Qh;
      }
    }
    for (int n = 0; n < N; ++n) {
      rotate_row(dq.row(n), H, hd, rope, n % T, Real(-1));
      rotate_row(dk.row(n), KV, hd, rope, n % T, Real(-1));
    }
    view(grads, bs.wq).noalias() += Ly.a.transpose() * dq;
    view(grads, bs.wk).noalias() += Ly.a.transpose() * dk;
    view(grads, bs.wv).noalias() += Ly.a.transpose() * dv;
    Mat<Real> da = dq * view(params_, bs.wq).transpose();
    da.noalias() += dk * view(params_, bs.wk).transpose();
    da.noalias() += dv * view(params_, bs.wv).transpose();
    rmsnorm_backward(Ly.x_in, Ly.rms1, view(params_, bs.attn_norm), da, dx,
                     view(grads, bs.attn_norm));
  }

  auto gE = view(grads, L.embed);
  const Real es = c.scaled_embed ? std::sqrt(Real(D)) : Real(1);
  for (int n = 0; n < N; ++n) gE.row(S.tokens[n]) += dx.row(n) * es;
}

namespace {

template <typename Real>
Mat<Real> head_logits(const BasicParams<Real>& p, const Mat<Real>& z) {
  Mat<Real> logits = z * view(p, p.layout.head);
  if (p.head_bias) logits.rowwise() += view(p, p.layout.head_bias).row(0);
  return logits;
}

}  // namespace

template <typename Real>
RowMatrix<Real> forward(const BasicParams<Real>& params, const TokenBatch& batch, Mode mode,
                        Rng* dropout) {
  TransformerPass<Real> pass(params, true);
  const auto& z = pass.run(batch, mode == Mode::kTrain ? dropout : nullptr);
  return head_logits(params, z);
}

template <typename Real>
LossAndGrads<Real> loss_and_grads(const BasicParams<Real>& params, const TokenBatch& batch,
                                  Rng* dropout) {
  TransformerPass<Real> pass(params, true);
  const Mat<Real>& z = pass.run(batch, dropout);
  const Mat<Real> logits = head_logits(params, z);
  const auto w = target_weights(batch);
  const int T = batch.seq_len;
  const auto V = logits.cols();

  LossAndGrads<Real> out;
  out.grads.assign(params.values.size(), Real(0));
  for (float x : w) out.weight_total += x;
  if (out.weight_total == 0.0) return out;

  Mat<Real> dlogits = Mat<Real>::Zero(logits.rows(), V);
  std::vector<double> seq_loss(batch.batch_size, 0.0);
  const double inv_total = 1.0 / out.weight_total;
  for (Eigen::Index n = 0; n < logits.rows(); ++n) {
    if (w[n] == 0.0f) continue;
    const TokenId target = batch.tokens[n + 1];
    const auto row = logits.row(n);
    const Real mx = row.maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < V; ++j) sum += std::exp(static_cast<double>(row(j) - mx));
    const double lse = static_cast<double>(mx) + std::log(sum);
    seq_loss[n / T] += w[n] * (lse - static_cast<double>(row(target)));
    const double coef = w[n] * inv_total;
    for (Eigen::Index j = 0; j < V; ++j) {
      dlogits(n, j) = static_cast<Real>(std::exp(static_cast<double>(row(j)) - lse) * coef);
    }
    dlogits(n, target) -= static_cast<Real>(coef);
  }
  double total = 0.0;
  for (int b = 0; b < batch.batch_size; ++b) {
    if (!std::isfinite(seq_loss[b])) {
      throw NumericError("non-finite loss at batch sequence " + std::to_string(b));
    }
    total += seq_loss[b];
  }
  out.loss = total * inv_total;

  std::span<Real> g(out.grads);
  view(g, params.layout.head).noalias() += z.transpose() * dlogits;
  if (params.head_bias) view(g, params.layout.head_bias).row(0) += dlogits.colwise().sum();
  const Mat<Real> dz = dlogits * view(params, params.layout.head).transpose();
  pass.backward(dz, g);
  return out;
}

template <typename Real>
std::vector<double> position_losses(const BasicParams<Real>& params, const TokenBatch& batch) {
  const Mat<Real> logits = forward(params, batch, Mode::kEval);
  const auto w = target_weights(batch);
  std::vector<double> out(logits.rows(), 0.0);
  for (Eigen::Index n = 0; n < logits.rows(); ++n) {
    if (w[n] == 0.0f) continue;
    const auto row = logits.row(n);
    const Real mx = row.maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) sum += std::exp(static_cast<double>(row(j) - mx));
    out[n] = w[n] * (static_cast<double>(mx) + std::log(sum) -
                     static_cast<double>(row(batch.tokens[n + 1])));
  }
  return out;
}

template <typename Real>
IncrementalDecoder<Real>::IncrementalDecoder(const BasicParams<Real>& params) : params_(params) {
  const LMConfig& c = params.config;
  k_cache_.assign(c.n_layers, Mat<Real>(c.max_seq_len, c.n_kv_heads * c.head_dim()));
  v_cache_.assign(c.n_layers, Mat<Real>(c.max_seq_len, c.n_kv_heads * c.head_dim()));
}

template <typename Real>
void IncrementalDecoder<Real>::reset() {
  pos_ = 0;
}

template <typename Real>
std::span<const Real> IncrementalDecoder<Real>::push(TokenId token) {
  const LMConfig& c = params_.config;
  const ParamLayout& L = params_.layout;
  if (pos_ >= c.max_seq_len) throw DataError("decoder context is full");
  if (token < 0 || token >= c.vocab_size) {
    throw DataError("token id " + std::to_string(token) + " out of range");
  }
  const int D = c.d_model, H = c.n_heads, KV = c.n_kv_heads, hd = c.head_dim();
  const int group = H / KV;
  const int t = pos_;
  static thread_local std::unique_ptr<RopeTable<Real>> rope_cache;
  if (!rope_cache || rope_cache->cos.rows() < c.max_seq_len || rope_cache->cos.cols() != hd / 2) {
    rope_cache = std::make_unique<RopeTable<Real>>(c.max_seq_len, hd);
  }
  const RopeTable<Real>& rope = *rope_cache;
  const Real scale = Real(1) / std::sqrt(Real(hd));

  Mat<Real> x = view(params_, L.embed).row(token);
  if (c.scaled_embed) x *= std::sqrt(Real(D));
  Mat<Real> a, ctx(1, H * hd), scores(1, t + 1);
  Vec<Real> r;
  for (int l = 0; l < c.n_layers; ++l) {
    const BlockSlots& bs = L.blocks[l];
    rmsnorm(x, view(params_, bs.attn_norm), a, r);
    Mat<Real> q = a * view(params_, bs.wq);
    Mat<Real> k = a * view(params_, bs.wk);
    rotate_row(q.row(0), H, hd, rope, t, Real(1));
    rotate_row(k.row(0), KV, hd, rope, t, Real(1));
    k_cache_[l].row(t) = k.row(0);
    v_cache_[l].row(t) = (a * view(params_, bs.wv)).row(0);
    for (int h = 0; h < H; ++h) {
      const int kvh = h / group;
      auto qh = q.block(0, h * hd, 1, hd);
      scores.noalias() = qh * k_cache_[l].block(0, kvh * hd, t + 1, hd).transpose();
      scores *= scale;
      const Real mx = scores.maxCoeff();
      scores = (scores.array() - mx).exp().matrix();
      scores /= scores.sum();
      ctx.block(0, h * hd, 1, hd).noalias() = scores * v_cache_[l].block(0, kvh * hd, t + 1, hd);
    }
    x.noalias() += ctx * view(params_, bs.wo);
    Mat<Real> f;
    rmsnorm(x, view(params_, bs.ffn_norm), f, r);
    Mat<Real> gate = f * view(params_, bs.w_gate);
    Mat<Real> up = f * view(params_, bs.w_up);
    for (Eigen::Index i = 0; i < gate.size(); ++i) {
      const Real g = gate.data()[i];
      gate.data()[i] = g * sigmoid(g) * up.data()[i];
    }
    x.noalias() += gate * view(params_, bs.w_down);
  }
  Mat<Real> z;
  rmsnorm(x, view(params_, L.final_norm), z, r);
  const Mat<Real> logits = head_logits(params_, z);
  logits_.assign(logits.data(), logits.data() + logits.size());
  ++pos_;
  return logits_;
}

namespace {
constexpr char kCkptMagic[4] = {'F', 'L', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;
}  // namespace

std::string Checkpoint::serialize() const {
  const LMConfig& c = params.config;
  ByteWriter w;
  w.bytes(std::string_view(kCkptMagic, 4));
  w.u32(kCkptVersion);
  for (int v : {c.n_layers, c.d_model, c.d_ffn, c.n_heads, c.n_kv_heads, c.vocab_size, c.max_seq_len}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.f64(c.dropout_rate);
  w.u8(c.scaled_embed ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(params.head_outputs));
  w.u8(params.head_bias ? 1 : 0);
  w.u64(init_seed);
  w.u64(order_seed);
  w.u64(static_cast<std::uint64_t>(step));
  w.u64(tokenizer_hash);
  w.u64(params.values.size());
  for (float v : params.values) w.f32(v);
  return w.str();
}

Checkpoint Checkpoint::deserialize(std::string_view bytes) {
  ByteReader r(bytes, "checkpoint");
  if (r.bytes(4) != std::string_view(kCkptMagic, 4)) throw DataError("checkpoint: bad magic");
  if (const auto v = r.u32(); v != kCkptVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(v));
  }
  LMConfig c;
  for (int* f : {&c.n_layers, &c.d_model, &c.d_ffn, &c.n_heads, &c.n_kv_heads, &c.vocab_size,
                 &c.max_seq_len}) {
    *f = static_cast<int>(r.u32());
  }
  c.dropout_rate = r.f64();
  c.scaled_embed = r.u8() != 0;
  c.validate();
  Checkpoint ck;
  ck.params.config = c;
  ck.params.head_outputs = static_cast<int>(r.u32());
  ck.params.head_bias = r.u8() != 0;
  ck.params.layout = ParamLayout(c, ck.params.head_outputs, ck.params.head_bias);
  ck.init_seed = r.u64();
  ck.order_seed = r.u64();
  ck.step = static_cast<std::int64_t>(r.u64());
  ck.tokenizer_hash = r.u64();
  const auto n = r.u64();
  if (n != ck.params.layout.total) throw DataError("checkpoint: tensor size mismatch");
  ck.params.values.resize(n);
  for (auto& v : ck.params.values) v = r.f32();
  if (!r.at_end()) throw DataError("checkpoint: trailing bytes");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

#define FINGERLAB_INSTANTIATE(Real)                                                              \
  template struct BasicParams<Real>;                                                            \
  template BasicParams<Real> init_params<Real>(const LMConfig&, std::uint64_t, int, bool);      \
  template RowMatrix<Real> forward<Real>(const BasicParams<Real>&, const TokenBatch&, Mode,     \
                                         Rng*);                                                 \
  template LossAndGrads<Real> loss_and_grads<Real>(const BasicParams<Real>&, const TokenBatch&, \
                                                   Rng*);                                       \
  template std::vector<double> position_losses<Real>(const BasicParams<Real>&,                  \
                                                     const TokenBatch&);                        \
  template class TransformerPass<Real>;                                                         \
  template class IncrementalDecoder<Real>;

FINGERLAB_INSTANTIATE(float)
FINGERLAB_INSTANTIATE(double)

}  // namespace fingerlab
