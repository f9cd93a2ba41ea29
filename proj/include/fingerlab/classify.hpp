#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fingerlab/tokenizer.hpp"

namespace fingerlab {

// Compressed sparse rows with sorted column indices.
struct SparseMatrix {
  int n_cols = 0;
  std::vector<std::int64_t> row_ptr{0};
  std::vector<std::int32_t> col;
  std::vector<double> val;

  std::size_t rows() const { return row_ptr.size() - 1; }
  void add_row(std::span<const std::pair<std::int32_t, double>> entries);
  double at(std::size_t row, std::int32_t c) const;
};

struct UnigramFeatures {
  SparseMatrix x;           // relative frequency of each BPE token id
  std::vector<bool> empty;  // documents that tokenized to nothing
};

// Columns are ids [0, vocab_size); special tokens never appear.
UnigramFeatures unigram_frequencies(std::span<const std::string> texts,
                                    const TokenizerModel& tokenizer);

// Per-column (x - min) / (max - min) with statistics from the rows passed to
// fit(); transformed values are clipped to [0, 1]. Constant columns map to 0.
class MinMaxScaler {
 public:
  void fit(const SparseMatrix& train);
  SparseMatrix transform(const SparseMatrix& x) const;
  const std::vector<double>& min() const { return min_; }
  const std::vector<double>& max() const { return max_; }
  void set(std::vector<double> min, std::vector<double> max);

 private:
  std::vector<double> min_, max_;
};

struct LinearOptions {
  double C = 1.0;
  double tol = 1e-5;  // on ||grad|| relative to its value at w = 0
  int max_newton_iters = 200;
  int max_cg_iters = 500;
};

// One-vs-rest L2-regularized logistic regression. The bias is an extra
// feature fixed at 1 and is regularized with the weights.
struct LinearAttributor {
  int n_classes = 0;
  int n_features = 0;
  double C = 1.0;
  std::vector<std::vector<double>> weights;  // [class][feature]
  std::vector<double> bias;
  std::vector<int> newton_iters;  // per class, for diagnostics

  std::vector<double> decision(const SparseMatrix& x, std::size_t row) const;
  // Highest decision value; ties go to the lowest class index.
  std::vector<int> predict(const SparseMatrix& x) const;
};

LinearAttributor train_linear(const SparseMatrix& x, std::span<const int> labels, int n_classes,
                              const LinearOptions& options = {});

// Scaler plus model; the unit that `clf fit` persists.
struct UnigramClassifier {
  MinMaxScaler scaler;
  LinearAttributor model;
  std::vector<std::string> class_names;

  std::vector<int> predict(std::span<const std::string> texts, const TokenizerModel& tokenizer) const;
  void save(const std::filesystem::path& path) const;
  static UnigramClassifier load(const std::filesystem::path& path);
};

UnigramClassifier fit_unigram(std::span<const std::string> texts, std::span<const int> labels,
                              std::vector<std::string> class_names,
                              const TokenizerModel& tokenizer, const LinearOptions& options = {});

struct RankedFeature {
  TokenId token = 0;
  std::string text;  // rendered with render_token
  double weight = 0;
};

// Spaces become U+2581, other bytes that are not printable UTF-8 become <0xNN>.
std::string render_token(const TokenizerModel& tokenizer, TokenId id);

// The k largest weights of one class's binary problem, ties by ascending id.
std::vector<RankedFeature> top_features(const LinearAttributor& model, int cls, int k,
                                        const TokenizerModel& tokenizer);

struct Evaluation {
  double accuracy = 0;
  std::int64_t n = 0;
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
};

Evaluation evaluate_predictions(std::span<const int> truth, std::span<const int> predicted,
                                int n_classes);

double chance_rate(int n_classes);
// P(X >= round(accuracy * n_test)) for X ~ Binomial(n_test, chance).
double binomial_significance(double accuracy, std::int64_t n_test, double chance);
// Two-sided interval of the number of correct answers under chance, as
// accuracies: the smallest [lo, hi] with P(X < lo) <= alpha/2 and P(X > hi) <= alpha/2.
std::pair<double, double> chance_interval(std::int64_t n_test, double chance, double alpha);

struct MeanStd {
  double mean = 0;
  double std = 0;  // population standard deviation
};
MeanStd mean_std(std::span<const double> values);
// Percentages with one decimal, e.g. "44.5 ± 0.8".
std::string format_mean_std(const MeanStd& m);

}  // namespace fingerlab
