#include <algorithm>
#include <cstdio>
#include <map>

#include "fingerlab/classify.hpp"
#include "fingerlab/error.hpp"
#include "fingerlab/textgen.hpp"

namespace fingerlab {

void SparseMatrix::add_row(std::span<const std::pair<std::int32_t, double>> entries) {
  for (const auto& [c, v] : entries) {
    if (c < 0 || c >= n_cols) throw LogicError("sparse column out of range");
    col.push_back(c);
    val.push_back(v);
  }
  row_ptr.push_back(static_cast<std::int64_t>(col.size()));
}

double SparseMatrix::at(std::size_t row, std::int32_t c) const {
  const auto b = col.begin() + row_ptr[row], e = col.begin() + row_ptr[row + 1];
  const auto it = std::lower_bound(b, e, c);
  return it != e && *it == c ? val[it - col.begin()] : 0.0;
}

UnigramFeatures unigram_frequencies(std::span<const std::string> texts,
                                    const TokenizerModel& tokenizer) {
  UnigramFeatures f;
  f.x.n_cols = tokenizer.vocab_size();
  std::map<std::int32_t, double> counts;
  std::vector<std::pair<std::int32_t, double>> row;
  for (const auto& t : texts) {
    counts.clear();
    const auto ids = tokenizer.encode(t);
    for (TokenId id : ids) counts[id] += 1.0;
    row.clear();
    for (const auto& [id, c] : counts) row.emplace_back(id, c / double(ids.size()));
    f.x.add_row(row);
    f.empty.push_back(ids.empty());
  }
  return f;
}

void MinMaxScaler::fit(const SparseMatrix& x) {
  const std::size_t n = x.rows();
  min_.assign(x.n_cols, 0.0);
  max_.assign(x.n_cols, 0.0);
  std::vector<double> lo(x.n_cols, INFINITY), hi(x.n_cols, -INFINITY);
  std::vector<std::size_t> seen(x.n_cols, 0);
  for (std::size_t i = 0; i < x.col.size(); ++i) {
    lo[x.col[i]] = std::min(lo[x.col[i]], x.val[i]);
    hi[x.col[i]] = std::max(hi[x.col[i]], x.val[i]);
    ++seen[x.col[i]];
  }
  for (int c = 0; c < x.n_cols; ++c) {
    if (seen[c] == 0) continue;
    // Rows without an entry hold an implicit zero.
    min_[c] = seen[c] < n ? std::min(0.0, lo[c]) : lo[c];
    max_[c] = seen[c] < n ? std::max(0.0, hi[c]) : hi[c];
  }
}

void MinMaxScaler::set(std::vector<double> min, std::vector<double> max) {
  if (min.size() != max.size()) throw DataError("scaler min/max sizes differ");
  min_ = std::move(min);
  max_ = std::move(max);
}

SparseMatrix MinMaxScaler::transform(const SparseMatrix& x) const {
  if (static_cast<std::size_t>(x.n_cols) != min_.size()) throw LogicError("scaler not fit for this width");
  SparseMatrix out;
  out.n_cols = x.n_cols;
  out.row_ptr.reserve(x.row_ptr.size());
  std::vector<std::pair<std::int32_t, double>> row;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    row.clear();
    for (auto i = x.row_ptr[r]; i < x.row_ptr[r + 1]; ++i) {
      const int c = x.col[i];
      const double range = max_[c] - min_[c];
      if (range <= 0) continue;
      const double v = std::clamp((x.val[i] - min_[c]) / range, 0.0, 1.0);
      if (v != 0.0) row.emplace_back(c, v);
    }
    out.add_row(row);
  }
  return out;
}

std::string render_token(const TokenizerModel& tokenizer, TokenId id) {
  const std::string& bytes = tokenizer.token_bytes(id);
  std::string out;
  std::size_t i = 0;
  while (i < bytes.size()) {
    const auto b = static_cast<unsigned char>(bytes[i]);
    const std::size_t w = utf8_prefix(std::string_view(bytes).substr(i), 1)->size();
    if (b == ' ') {
      out += "\xe2\x96\x81";
    } else if (b >= 0x20 && b < 0x7f) {
      out += static_cast<char>(b);
    } else if (b >= 0x80 && w > 1) {
      out.append(bytes, i, w);
    } else {
      char buf[8];
      std::snprintf(buf, sizeof buf, "<0x%02X>", b);
      out += buf;
    }
    i += w;
  }
  return out;
}

std::vector<RankedFeature> top_features(const LinearAttributor& model, int cls, int k,
                                        const TokenizerModel& tokenizer) {
  if (cls < 0 || cls >= model.n_classes) throw ConfigError("top_features: class out of range");
  if (k < 0) throw ConfigError("top_features: k must be non-negative");
  const auto& w = model.weights[cls];
  std::vector<TokenId> ids(w.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TokenId>(i);
  k = std::min<int>(k, static_cast<int>(ids.size()));
  std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](TokenId a, TokenId b) {
    return w[a] != w[b] ? w[a] > w[b] : a < b;
  });
  std::vector<RankedFeature> out;
  for (int i = 0; i < k; ++i) out.push_back({ids[i], render_token(tokenizer, ids[i]), w[ids[i]]});
  return out;
}

}  // namespace fingerlab
