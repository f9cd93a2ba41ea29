#include <cmath>

#include "fingerlab/classify.hpp"
#include "fingerlab/error.hpp"

namespace fingerlab {

namespace {

// log(1 + exp(-t)) without overflow.
double log1pexp_neg(double t) { return t > 0 ? std::log1p(std::exp(-t)) : -t + std::log1p(std::exp(t)); }

double sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Binary problem over x with an appended constant-1 column; w has
// n_cols + 1 entries, the last being the bias.
class BinaryLogistic {
 public:
  BinaryLogistic(const SparseMatrix& x, std::vector<double> y, double C)
      : x_(x), y_(std::move(y)), C_(C), z_(x.rows()), d_(x.rows()) {}

  std::size_t dim() const { return static_cast<std::size_t>(x_.n_cols) + 1; }

  double value(const std::vector<double>& w) {
    margins(w);
    double f = 0.5 * dot(w, w);
    for (std::size_t r = 0; r < z_.size(); ++r) f += C_ * log1pexp_neg(y_[r] * z_[r]);
    return f;
  }

  // Objective and gradient at w; caches the curvature weights for hess_vec.
  double grad(const std::vector<double>& w, std::vector<double>& g) {
    const double f = value(w);
    g = w;
    for (std::size_t r = 0; r < x_.rows(); ++r) {
      const double s = sigmoid(y_[r] * z_[r]);
      const double coef = C_ * (s - 1.0) * y_[r];
      d_[r] = s * (1.0 - s);
      for (auto i = x_.row_ptr[r]; i < x_.row_ptr[r + 1]; ++i) g[x_.col[i]] += coef * x_.val[i];
      g.back() += coef;
    }
    return f;
  }

  // (I + C X^T D X) v
  void hess_vec(const std::vector<double>& v, std::vector<double>& out) const {
    out = v;
    for (std::size_t r = 0; r < x_.rows(); ++r) {
      double xv = v.back();
      for (auto i = x_.row_ptr[r]; i < x_.row_ptr[r + 1]; ++i) xv += v[x_.col[i]] * x_.val[i];
      const double coef = C_ * d_[r] * xv;
      for (auto i = x_.row_ptr[r]; i < x_.row_ptr[r + 1]; ++i) out[x_.col[i]] += coef * x_.val[i];
      out.back() += coef;
    }
  }

 private:
  void margins(const std::vector<double>& w) {
    for (std::size_t r = 0; r < x_.rows(); ++r) {
      double s = w.back();
      for (auto i = x_.row_ptr[r]; i < x_.row_ptr[r + 1]; ++i) s += w[x_.col[i]] * x_.val[i];
      z_[r] = s;
    }
  }

  const SparseMatrix& x_;
  std::vector<double> y_;
  double C_;
  std::vector<double> z_, d_;
};

// Truncated Newton: conjugate-gradient inner solves, Armijo backtracking.
// Returns the number of Newton iterations taken.
int solve(BinaryLogistic& prob, std::vector<double>& w, const LinearOptions& o) {
  const std::size_t n = prob.dim();
  w.assign(n, 0.0);
  std::vector<double> g, s(n), r(n), p(n), hp(n), w_try(n);
  double f = prob.grad(w, g);
  const double g0 = std::sqrt(dot(g, g));
  int iter = 0;
  for (; iter < o.max_newton_iters; ++iter) {
    const double gnorm = std::sqrt(dot(g, g));
    if (gnorm <= o.tol * g0 || gnorm == 0.0) break;
    std::fill(s.begin(), s.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) r[i] = -g[i];
    p = r;
    double rr = dot(r, r);
    const double cg_tol = std::min(0.1, std::sqrt(gnorm)) * gnorm;
    for (int k = 0; k < o.max_cg_iters && std::sqrt(rr) > cg_tol; ++k) {
      prob.hess_vec(p, hp);
      const double alpha = rr / dot(p, hp);
      for (std::size_t i = 0; i < n; ++i) {
        s[i] += alpha * p[i];
        r[i] -= alpha * hp[i];
      }
      const double rr_new = dot(r, r);
      const double beta = rr_new / rr;
      rr = rr_new;
      for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    }
    const double slope = dot(g, s);  // negative: H is positive definite
    double step = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 50; ++ls, step *= 0.5) {
      for (std::size_t i = 0; i < n; ++i) w_try[i] = w[i] + step * s[i];
      if (prob.value(w_try) <= f + 1e-4 * step * slope) {
        moved = true;
        break;
      }
    }
    if (!moved) break;  // no representable decrease left
    w.swap(w_try);
    f = prob.grad(w, g);
  }
  return iter;
}

}  // namespace

std::vector<double> LinearAttributor::decision(const SparseMatrix& x, std::size_t row) const {
  std::vector<double> out(bias);
  for (int c = 0; c < n_classes; ++c) {
    const auto& w = weights[c];
    for (auto i = x.row_ptr[row]; i < x.row_ptr[row + 1]; ++i) out[c] += w[x.col[i]] * x.val[i];
  }
  return out;
}

std::vector<int> LinearAttributor::predict(const SparseMatrix& x) const {
  if (x.n_cols != n_features) throw DataError("feature width does not match the model");
  std::vector<int> out(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto d = decision(x, r);
    int best = 0;
    for (int c = 1; c < n_classes; ++c) {
      if (d[c] > d[best]) best = c;
    }
    out[r] = best;
  }
  return out;
}

LinearAttributor train_linear(const SparseMatrix& x, std::span<const int> labels, int n_classes,
                              const LinearOptions& o) {
  if (labels.size() != x.rows()) throw DataError("train_linear: label count differs from row count");
  if (!(o.C > 0) || !(o.tol > 0)) throw ConfigError("train_linear: C and tol must be positive");
  std::vector<std::int64_t> count(n_classes, 0);
  for (int y : labels) {
    if (y < 0 || y >= n_classes) throw DataError("train_linear: label out of range");
    ++count[y];
  }
  int present = 0;
  for (auto c : count) present += c > 0;
  if (present < 2) throw ConfigError("train_linear: training data must contain at least 2 classes");

  LinearAttributor m;
  m.n_classes = n_classes;
  m.n_features = x.n_cols;
  m.C = o.C;
  std::vector<double> w;
  for (int c = 0; c < n_classes; ++c) {
    std::vector<double> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] == c ? 1.0 : -1.0;
    BinaryLogistic prob(x, std::move(y), o.C);
    m.newton_iters.push_back(solve(prob, w, o));
    for (double v : w) {
      if (!std::isfinite(v)) throw NumericError("train_linear: non-finite weight for class " + std::to_string(c));
    }
    m.bias.push_back(w.back());
    w.pop_back();
    m.weights.push_back(w);
  }
  return m;
}

}  // namespace fingerlab
