#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "fingerlab/classify.hpp"
#include "fingerlab/error.hpp"
#include "fingerlab/rng.hpp"

using namespace fingerlab;

namespace {

const TokenizerModel& bytes_tok() {
  static const TokenizerModel t;
  return t;
}

// Documents of `len` letters drawn i.i.d. from `probs` over 'a'..
std::string draw_doc(Rng& rng, const std::vector<double>& probs, int len) {
  std::string s;
  for (int i = 0; i < len; ++i) {
    double u = rng.uniform(), acc = 0;
    std::size_t k = 0;
    for (; k + 1 < probs.size(); ++k) {
      acc += probs[k];
      if (u < acc) break;
    }
    s += static_cast<char>('a' + k);
  }
  return s;
}

std::vector<double> normalized(std::vector<double> w) {
  double s = 0;
  for (double v : w) s += v;
  for (double& v : w) v /= s;
  return w;
}

}  // namespace

TEST_CASE("unigram frequencies") {
  const std::vector<std::string> texts{"\x07", "aab", ""};
  const auto f = unigram_frequencies(texts, bytes_tok());
  CHECK(f.x.n_cols == 256);
  CHECK(f.x.at(0, 7) == 1.0);
  CHECK(f.x.at(0, 8) == 0.0);
  CHECK(f.x.at(1, 'a') == doctest::Approx(2.0 / 3));
  CHECK(f.x.at(1, 'b') == doctest::Approx(1.0 / 3));
  CHECK(f.empty == std::vector<bool>{false, false, true});
  CHECK(f.x.row_ptr[3] == f.x.row_ptr[2]);
}

TEST_CASE("min-max scaling") {
  SparseMatrix train;
  train.n_cols = 3;
  const std::vector<std::pair<std::int32_t, double>> r0{{0, 0.5}, {2, 0.2}}, r1{{0, 0.1}, {1, 0.3}, {2, 0.2}};
  train.add_row(r0);
  train.add_row(r1);
  MinMaxScaler s;
  s.fit(train);
  CHECK(s.min() == std::vector<double>{0.1, 0.0, 0.2});
  CHECK(s.max() == std::vector<double>{0.5, 0.3, 0.2});
  SparseMatrix doc;
  doc.n_cols = 3;
  const std::vector<std::pair<std::int32_t, double>> d{{0, 0.3}, {1, 0.9}, {2, 0.7}};
  doc.add_row(d);
  const auto t = s.transform(doc);
  CHECK(t.at(0, 0) == doctest::Approx(0.5));
  CHECK(t.at(0, 1) == 1.0);  // clipped
  CHECK(t.at(0, 2) == 0.0);  // constant column

  // Train max 0.5 with an implicit zero: 0.25 scales to 0.5.
  SparseMatrix t2;
  t2.n_cols = 1;
  const std::vector<std::pair<std::int32_t, double>> a{{0, 0.5}}, none{};
  t2.add_row(a);
  t2.add_row(none);
  MinMaxScaler s2;
  s2.fit(t2);
  SparseMatrix q;
  q.n_cols = 1;
  const std::vector<std::pair<std::int32_t, double>> quarter{{0, 0.25}};
  q.add_row(quarter);
  CHECK(s2.transform(q).at(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("scaled train columns span exactly [0, 1]") {
  Rng rng("test.scaler", {1});
  std::vector<std::string> texts;
  for (int i = 0; i < 300; ++i) texts.push_back(draw_doc(rng, normalized({5, 4, 3, 2, 1, 1, 1}), 5 + rng.below(20)));
  const auto raw = unigram_frequencies(texts, bytes_tok());
  MinMaxScaler s;
  s.fit(raw.x);
  const auto x = s.transform(raw.x);
  for (int c = 0; c < 256; ++c) {
    double lo = INFINITY, hi = -INFINITY, rlo = INFINITY, rhi = -INFINITY;
    for (std::size_t r = 0; r < x.rows(); ++r) {
      lo = std::min(lo, x.at(r, c));
      hi = std::max(hi, x.at(r, c));
      rlo = std::min(rlo, raw.x.at(r, c));
      rhi = std::max(rhi, raw.x.at(r, c));
    }
    if (rhi > rlo) {
      CHECK(lo == 0.0);
      CHECK(hi == doctest::Approx(1.0).epsilon(1e-12));
    } else {
      CHECK(hi == 0.0);
    }
  }
}

TEST_CASE("separable classes are learned perfectly") {
  std::vector<std::string> texts;
  std::vector<int> labels;
  Rng rng("test.sep", {1});
  for (int i = 0; i < 60; ++i) {
    texts.push_back(draw_doc(rng, normalized({1, 1, 1, 0, 0, 0}), 10));
    labels.push_back(0);
    texts.push_back(draw_doc(rng, normalized({0, 0, 0, 1, 1, 1}), 10));
    labels.push_back(1);
  }
  const auto u = fit_unigram(texts, labels, {"x", "y"}, bytes_tok());
  CHECK(u.predict(texts, bytes_tok()) == labels);
  const auto again = fit_unigram(texts, labels, {"x", "y"}, bytes_tok());
  CHECK(again.model.weights == u.model.weights);
  CHECK(again.model.bias == u.model.bias);
  CHECK_THROWS_AS(fit_unigram(texts, std::vector<int>(texts.size(), 1), {"x", "y"}, bytes_tok()), ConfigError);
}

TEST_CASE("solver reaches the gradient tolerance") {
  Rng rng("test.tol", {2});
  std::vector<std::string> texts;
  std::vector<int> labels;
  for (int i = 0; i < 200; ++i) {
    const int y = static_cast<int>(rng.below(2));
    texts.push_back(draw_doc(rng, normalized(y ? std::vector<double>{3, 2, 1, 1} : std::vector<double>{1, 1, 2, 3}), 8));
    labels.push_back(y);
  }
  const auto raw = unigram_frequencies(texts, bytes_tok());
  MinMaxScaler s;
  s.fit(raw.x);
  const auto x = s.transform(raw.x);
  const double C = 2.0;
  LinearOptions o;
  o.C = C;
  const auto m = train_linear(x, labels, 2, o);
  for (int c = 0; c < 2; ++c) {
    // Dense recomputation of the gradient at the solution and at zero.
    std::vector<double> g(257, 0.0), g0(257, 0.0);
    for (int f = 0; f < 256; ++f) g[f] = m.weights[c][f];
    g[256] = m.bias[c];
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const double y = labels[r] == c ? 1.0 : -1.0;
      double z = m.bias[c];
      for (int f = 0; f < 256; ++f) z += m.weights[c][f] * x.at(r, f);
      const double coef = C * (1.0 / (1.0 + std::exp(-y * z)) - 1.0) * y;
      const double coef0 = C * -0.5 * y;
      for (int f = 0; f < 256; ++f) {
        g[f] += coef * x.at(r, f);
        g0[f] += coef0 * x.at(r, f);
      }
      g[256] += coef;
      g0[256] += coef0;
    }
    double n = 0, n0 = 0;
    for (int f = 0; f < 257; ++f) {
      n += g[f] * g[f];
      n0 += g0[f] * g0[f];
    }
    CHECK(std::sqrt(n) <= 1e-5 * std::sqrt(n0) * 1.0001);
  }
}

TEST_CASE("accuracy tracks the Bayes classifier of two multinomial sources") {
  const auto p = normalized({9, 8, 7, 6, 5, 5, 4, 4, 3, 3, 3, 2, 2, 2, 2, 1, 1, 1, 1, 1});
  const auto q = normalized({1, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 4, 4, 5, 5, 6, 7, 8, 9});
  Rng rng("test.bayes", {1});
  const int len = 6;
  std::vector<std::string> train, test;
  std::vector<int> ytrain, ytest;
  for (int i = 0; i < 1500; ++i) {
    for (int y = 0; y < 2; ++y) {
      (i < 1000 ? train : test).push_back(draw_doc(rng, y ? q : p, len));
      (i < 1000 ? ytrain : ytest).push_back(y);
    }
  }
  const auto u = fit_unigram(train, ytrain, {"p", "q"}, bytes_tok());
  const auto acc = evaluate_predictions(ytest, u.predict(test, bytes_tok()), 2).accuracy;
  int bayes_correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    double lp = 0, lq = 0;
    for (char ch : test[i]) {
      lp += std::log(p[ch - 'a']);
      lq += std::log(q[ch - 'a']);
    }
    bayes_correct += (lq > lp ? 1 : 0) == ytest[i];
  }
  const double bayes = double(bayes_correct) / double(test.size());
  MESSAGE("linear " << acc << " bayes " << bayes);
  CHECK(std::abs(acc - bayes) <= 0.03);
}

TEST_CASE("vanishing regularization strength drives weights to zero") {
  std::vector<std::string> texts{"aaa", "bbb", "aab", "bba"};
  std::vector<int> labels{0, 1, 0, 1};
  LinearOptions o;
  o.C = 1e-12;
  const auto u = fit_unigram(texts, labels, {"x", "y"}, bytes_tok(), o);
  for (const auto& w : u.model.weights)
    for (double v : w) CHECK(std::abs(v) < 1e-9);
  // At exactly zero weights every decision value ties and the lowest class wins.
  LinearAttributor zero = u.model;
  for (auto& w : zero.weights) std::fill(w.begin(), w.end(), 0.0);
  std::fill(zero.bias.begin(), zero.bias.end(), 0.0);
  CHECK(zero.predict(u.scaler.transform(unigram_frequencies(texts, bytes_tok()).x)) ==
        std::vector<int>{0, 0, 0, 0});
}

TEST_CASE("top features") {
  LinearAttributor m;
  m.n_classes = 1;
  m.n_features = 256;
  m.weights.assign(1, std::vector<double>(256, 0.0));
  m.bias = {0};
  m.weights[0]['x'] = 3;
  m.weights[0]['y'] = 2;
  m.weights[0]['z'] = 1;
  const auto top2 = top_features(m, 0, 2, bytes_tok());
  REQUIRE(top2.size() == 2);
  CHECK(top2[0].token == 'x');
  CHECK(top2[1].token == 'y');
  CHECK(top2[0].text == "x");
  m.weights[0]['b'] = 2;
  const auto tied = top_features(m, 0, 3, bytes_tok());
  CHECK(tied[1].token == 'b');
  CHECK(tied[2].token == 'y');
  CHECK(top_features(m, 0, 1000, bytes_tok()).size() == 256);
  CHECK_THROWS_AS(top_features(m, 1, 2, bytes_tok()), ConfigError);
}

TEST_CASE("token rendering") {
  const TokenizerModel tok({{' ', 't'}, {0xC3, 0xA9}});
  CHECK(render_token(tok, 256) == "\xe2\x96\x81t");
  CHECK(render_token(tok, 257) == "\xc3\xa9");
  CHECK(render_token(tok, '\n') == "<0x0A>");
  CHECK(render_token(tok, 0xC3) == "<0xC3>");
}

TEST_CASE("evaluation") {
  const std::vector<int> truth{0, 1, 2, 0, 1, 2};
  const auto e = evaluate_predictions(truth, truth, 3);
  CHECK(e.accuracy == 1.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(e.confusion[i][j] == (i == j ? 2 : 0));
  const std::vector<int> constant(6, 1);
  CHECK(evaluate_predictions(truth, constant, 3).accuracy == 1.0 / 3.0);
  CHECK_THROWS_AS(evaluate_predictions(std::vector<int>{3}, std::vector<int>{0}, 3), DataError);
  CHECK_THROWS_AS(evaluate_predictions(std::vector<int>{}, std::vector<int>{}, 3), DataError);
  CHECK(chance_rate(6) == doctest::Approx(0.1667).epsilon(1e-3));
  CHECK(chance_rate(3) == doctest::Approx(0.3333).epsilon(1e-3));
}

TEST_CASE("binomial significance") {
  CHECK(binomial_significance(0.0, 100, 1.0 / 3) == 1.0);
  CHECK(std::abs(binomial_significance(0.5, 100000, 0.5) - 0.5) < 0.01);
  // Direct summation with the pmf recurrence.
  const int n = 1000;
  const double p = 1.0 / 3;
  std::vector<long double> pmf(n + 1);
  pmf[0] = std::pow((long double)(1 - p), n);
  for (int i = 1; i <= n; ++i) pmf[i] = pmf[i - 1] * (n - i + 1) / i * p / (1 - p);
  long double tail = 0;
  for (int i = 400; i <= n; ++i) tail += pmf[i];
  const double got = binomial_significance(0.4, n, p);
  CHECK(got < 1e-5);
  CHECK(got == doctest::Approx(double(tail)).epsilon(1e-9));
  const auto [lo, hi] = chance_interval(n, p, 0.01);
  long double below = 0, above = 0;
  for (int i = 0; i < std::lround(lo * n); ++i) below += pmf[i];
  for (int i = std::lround(hi * n) + 1; i <= n; ++i) above += pmf[i];
  CHECK(below <= 0.005);
  CHECK(below + pmf[std::lround(lo * n)] > 0.005);
  CHECK(above <= 0.005);
}

TEST_CASE("mean and population std") {
  const std::vector<double> v{0.4, 0.5, 0.6};
  const auto m = mean_std(v);
  CHECK(m.mean == doctest::Approx(0.5));
  CHECK(m.std == doctest::Approx(std::sqrt(1.0 / 150)));
  const std::vector<double> same{0.42, 0.42, 0.42};
  CHECK(mean_std(same).std == 0.0);
  CHECK(format_mean_std({0.445, 0.008}) == "44.5 \xc2\xb1 0.8");
  CHECK(format_mean_std({0.39, 0.002}) == "39.0 \xc2\xb1 0.2");
}

TEST_CASE("unigram classifier file round trip") {
  std::vector<std::string> texts{"aaa", "bbb", "aab", "bba", "ccc", "cca"};
  std::vector<int> labels{0, 1, 0, 1, 2, 2};
  const auto u = fit_unigram(texts, labels, {"x", "y", "z"}, bytes_tok());
  const auto path = std::filesystem::temp_directory_path() / "fingerlab_test_clf.json";
  u.save(path);
  const auto back = UnigramClassifier::load(path);
  CHECK(back.model.weights == u.model.weights);
  CHECK(back.scaler.min() == u.scaler.min());
  CHECK(back.predict(texts, bytes_tok()) == u.predict(texts, bytes_tok()));
  std::filesystem::remove(path);
}
