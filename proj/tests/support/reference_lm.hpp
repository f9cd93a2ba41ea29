#pragma once

// Scalar-loop reference transformer used as a test oracle. It shares no code
// with the Eigen implementation: every product is an explicit loop.

#include <cmath>
#include <vector>

#include "fingerlab/lm.hpp"

namespace fingerlab::testing {

using Vec = std::vector<double>;
using Matx = std::vector<Vec>;

inline double at(const LMParamsF64& p, const TensorSlot& s, int r, int c) {
  return p.values[s.offset + static_cast<std::size_t>(r) * s.cols + c];
}

inline Matx matmul(const Matx& x, const LMParamsF64& p, const TensorSlot& w) {
  Matx out(x.size(), Vec(w.cols, 0.0));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (int j = 0; j < w.cols; ++j)
      for (int k = 0; k < w.rows; ++k) out[i][j] += x[i][k] * at(p, w, k, j);
  return out;
}

inline Matx rmsnorm(const Matx& x, const LMParamsF64& p, const TensorSlot& g) {
  Matx out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double ms = 0;
    for (double v : x[i]) ms += v * v;
    ms /= x[i].size();
    const double r = 1.0 / std::sqrt(ms + 1e-5);
    for (std::size_t j = 0; j < x[i].size(); ++j) out[i][j] = x[i][j] * r * at(p, g, 0, static_cast<int>(j));
  }
  return out;
}

inline void rope(Matx& x, int heads, int hd) {
  for (std::size_t t = 0; t < x.size(); ++t)
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < hd / 2; ++i) {
        const double ang = t * std::pow(10000.0, -2.0 * i / hd);
        double& a = x[t][h * hd + 2 * i];
        double& b = x[t][h * hd + 2 * i + 1];
        const double a0 = a, b0 = b;
        a = a0 * std::cos(ang) - b0 * std::sin(ang);
        b = a0 * std::sin(ang) + b0 * std::cos(ang);
      }
}

// Final normalized hidden states of one sequence.
inline Matx reference_hidden(const LMParamsF64& p, const std::vector<TokenId>& seq, bool causal,
                             const std::vector<std::uint8_t>& valid = {}) {
  const LMConfig& c = p.config;
  const int T = static_cast<int>(seq.size()), D = c.d_model, H = c.n_heads, KV = c.n_kv_heads;
  const int hd = c.head_dim();
  Matx x(T, Vec(D));
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < D; ++j) x[t][j] = at(p, p.layout.embed, seq[t], j) * (c.scaled_embed ? std::sqrt(double(D)) : 1.0);
  for (const auto& b : p.layout.blocks) {
    Matx a = rmsnorm(x, p, b.attn_norm);
    Matx q = matmul(a, p, b.wq), k = matmul(a, p, b.wk), v = matmul(a, p, b.wv);
    rope(q, H, hd);
    rope(k, KV, hd);
    Matx ctx(T, Vec(H * hd, 0.0));
    for (int h = 0; h < H; ++h) {
      const int g = h / (H / KV);
      for (int t = 0; t < T; ++t) {
        Vec w(T, 0.0);
        double mx = -1e300;
        for (int s = 0; s < T; ++s) {
          if ((causal && s > t) || (!valid.empty() && !valid[s])) continue;
          double dot = 0;
          for (int i = 0; i < hd; ++i) dot += q[t][h * hd + i] * k[s][g * hd + i];
          w[s] = dot / std::sqrt(double(hd));
          mx = std::max(mx, w[s]);
        }
        double z = 0;
        for (int s = 0; s < T; ++s) {
          if ((causal && s > t) || (!valid.empty() && !valid[s])) { w[s] = 0; continue; }
          w[s] = std::exp(w[s] - mx);
          z += w[s];
        }
        for (int s = 0; s < T; ++s)
          for (int i = 0; i < hd; ++i) ctx[t][h * hd + i] += w[s] / z * v[s][g * hd + i];
      }
    }
    Matx o = matmul(ctx, p, b.wo);
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < D; ++j) x[t][j] += o[t][j];
    Matx f = rmsnorm(x, p, b.ffn_norm);
    Matx gate = matmul(f, p, b.w_gate), up = matmul(f, p, b.w_up);
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < c.d_ffn; ++j) gate[t][j] = gate[t][j] / (1 + std::exp(-gate[t][j])) * up[t][j];
    Matx d = matmul(gate, p, b.w_down);
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < D; ++j) x[t][j] += d[t][j];
  }
  return rmsnorm(x, p, p.layout.final_norm);
}

inline Matx reference_logits(const LMParamsF64& p, const std::vector<TokenId>& seq) {
  return matmul(reference_hidden(p, seq, true), p, p.layout.head);
}

}  // namespace fingerlab::testing
