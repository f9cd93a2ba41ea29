#include <cmath>
#include <cstdio>

#include "fingerlab/classify.hpp"
#include "fingerlab/error.hpp"
#include "fingerlab/io.hpp"
#include "json.hpp"

namespace fingerlab {

Evaluation evaluate_predictions(std::span<const int> truth, std::span<const int> predicted,
                                int n_classes) {
  if (truth.empty()) throw DataError("evaluate: empty test set");
  if (truth.size() != predicted.size()) throw DataError("evaluate: prediction count differs from label count");
  Evaluation e;
  e.n = static_cast<std::int64_t>(truth.size());
  e.confusion.assign(n_classes, std::vector<std::int64_t>(n_classes, 0));
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= n_classes) {
      throw DataError("evaluate: label " + std::to_string(truth[i]) + " is not one of the " +
                      std::to_string(n_classes) + " trained classes");
    }
    if (predicted[i] < 0 || predicted[i] >= n_classes) throw LogicError("evaluate: prediction out of range");
    ++e.confusion[truth[i]][predicted[i]];
    correct += truth[i] == predicted[i];
  }
  e.accuracy = double(correct) / double(e.n);
  return e;
}

double chance_rate(int n_classes) {
  if (n_classes < 1) throw ConfigError("chance_rate: need at least one class");
  return 1.0 / n_classes;
}

namespace {

double log_pmf(std::int64_t n, std::int64_t i, double p) {
  return std::lgamma(double(n) + 1) - std::lgamma(double(i) + 1) - std::lgamma(double(n - i) + 1) +
         double(i) * std::log(p) + double(n - i) * std::log1p(-p);
}

// log(sum_{i=a}^{b} pmf(i))
double log_tail(std::int64_t n, std::int64_t a, std::int64_t b, double p) {
  if (a > b) return -INFINITY;
  double mx = -INFINITY;
  for (std::int64_t i = a; i <= b; ++i) mx = std::max(mx, log_pmf(n, i, p));
  double s = 0;
  for (std::int64_t i = a; i <= b; ++i) s += std::exp(log_pmf(n, i, p) - mx);
  return mx + std::log(s);
}

}  // namespace

double binomial_significance(double accuracy, std::int64_t n_test, double chance) {
  if (!(accuracy >= 0 && accuracy <= 1)) throw ConfigError("accuracy must be in [0, 1]");
  if (n_test <= 0) throw ConfigError("n_test must be positive");
  if (!(chance > 0 && chance < 1)) throw ConfigError("chance must be in (0, 1)");
  const auto k = static_cast<std::int64_t>(std::llround(accuracy * double(n_test)));
  if (k <= 0) return 1.0;
  return std::min(1.0, std::exp(log_tail(n_test, k, n_test, chance)));
}

std::pair<double, double> chance_interval(std::int64_t n_test, double chance, double alpha) {
  if (n_test <= 0 || !(chance > 0 && chance < 1) || !(alpha > 0 && alpha < 1)) {
    throw ConfigError("chance_interval: bad arguments");
  }
  std::int64_t lo = 0;
  while (lo < n_test && std::exp(log_tail(n_test, 0, lo, chance)) <= alpha / 2) ++lo;
  std::int64_t hi = n_test;
  while (hi > 0 && std::exp(log_tail(n_test, hi, n_test, chance)) <= alpha / 2) --hi;
  return {double(lo) / double(n_test), double(hi) / double(n_test)};
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw DataError("mean_std: no values");
  MeanStd m;
  for (double v : values) m.mean += v;
  m.mean /= double(values.size());
  double ss = 0;
  for (double v : values) ss += (v - m.mean) * (v - m.mean);
  m.std = std::sqrt(ss / double(values.size()));
  return m;
}

std::string format_mean_std(const MeanStd& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f \xc2\xb1 %.1f", m.mean * 100.0, m.std * 100.0);
  return buf;
}

UnigramClassifier fit_unigram(std::span<const std::string> texts, std::span<const int> labels,
                              std::vector<std::string> class_names,
                              const TokenizerModel& tokenizer, const LinearOptions& options) {
  UnigramClassifier u;
  u.class_names = std::move(class_names);
  const auto raw = unigram_frequencies(texts, tokenizer);
  u.scaler.fit(raw.x);
  u.model = train_linear(u.scaler.transform(raw.x), labels, static_cast<int>(u.class_names.size()), options);
  return u;
}

std::vector<int> UnigramClassifier::predict(std::span<const std::string> texts,
                                            const TokenizerModel& tokenizer) const {
  return model.predict(scaler.transform(unigram_frequencies(texts, tokenizer).x));
}

void UnigramClassifier::save(const std::filesystem::path& path) const {
  const nlohmann::json j = {{"kind", "unigram"},
                            {"classes", class_names},
                            {"C", model.C},
                            {"n_features", model.n_features},
                            {"scaler_min", scaler.min()},
                            {"scaler_max", scaler.max()},
                            {"weights", model.weights},
                            {"bias", model.bias}};
  write_file_atomic(path, j.dump() + "\n");
}

UnigramClassifier UnigramClassifier::load(const std::filesystem::path& path) {
  UnigramClassifier u;
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    if (j.at("kind") != "unigram") throw DataError(path.string() + " is not a unigram classifier");
    u.class_names = j.at("classes").get<std::vector<std::string>>();
    u.scaler.set(j.at("scaler_min").get<std::vector<double>>(), j.at("scaler_max").get<std::vector<double>>());
    u.model.n_classes = static_cast<int>(u.class_names.size());
    u.model.n_features = j.at("n_features");
    u.model.C = j.at("C");
    u.model.weights = j.at("weights").get<std::vector<std::vector<double>>>();
    u.model.bias = j.at("bias").get<std::vector<double>>();
    if (static_cast<int>(u.model.weights.size()) != u.model.n_classes ||
        static_cast<int>(u.model.bias.size()) != u.model.n_classes) {
      throw DataError(path.string() + ": class count mismatch");
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed classifier file " + path.string() + ": " + e.what());
  }
  return u;
}

}  // namespace fingerlab
