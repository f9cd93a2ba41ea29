#include "fingerlab/datakit.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <spdlog/spdlog.h>

#include "fingerlab/error.hpp"
#include "fingerlab/io.hpp"
#include "fingerlab/rng.hpp"
#include "json.hpp"

namespace fingerlab {

namespace {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Byte offsets of the Unicode scalar boundaries of `text`, including the end.
std::vector<std::size_t> scalar_offsets(std::string_view text) {
  std::vector<std::size_t> off;
  std::size_t i = 0;
  while (i < text.size()) {
    off.push_back(i);
    i += utf8_prefix(text.substr(i), 1)->size();
  }
  off.push_back(text.size());
  return off;
}

}  // namespace

DedupEmbedding embed_for_dedup(std::string_view text, const EmbeddingOptions& o) {
  if (o.dim <= 0 || o.min_n <= 0 || o.max_n < o.min_n) throw ConfigError("bad embedding options");
  DedupEmbedding e;
  e.values.assign(o.dim, 0.0f);
  if (text.empty()) {
    e.always_unique = true;
    return e;
  }
  const auto off = scalar_offsets(text);
  const std::size_t n_chars = off.size() - 1;
  std::vector<double> tf(o.dim, 0.0);
  bool any = false;
  for (int n = o.min_n; n <= o.max_n; ++n) {
    for (std::size_t i = 0; i + n <= n_chars; ++i) {
      tf[fnv1a(text.substr(off[i], off[i + n] - off[i])) % o.dim] += 1.0;
      any = true;
    }
  }
  // Texts shorter than min_n characters fall back to the whole string.
  if (!any) tf[fnv1a(text) % o.dim] = 1.0;
  double norm = 0;
  for (double v : tf) norm += v * v;
  norm = std::sqrt(norm);
  for (int i = 0; i < o.dim; ++i) e.values[i] = static_cast<float>(tf[i] / norm);
  return e;
}

double cosine_similarity(const DedupEmbedding& a, const DedupEmbedding& b) {
  if (a.values.size() != b.values.size()) throw LogicError("embedding dimensions differ");
  double dot = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) dot += double(a.values[i]) * b.values[i];
  return dot;
}

std::int64_t DedupResult::removed() const {
  return std::count(retained.begin(), retained.end(), false);
}

namespace {

struct Embedded {
  Matrix x;                   // one row per non-empty text
  std::vector<std::size_t> row_of_item;  // SIZE_MAX for always-unique items
  std::vector<std::size_t> item_of_row;
};

Embedded embed_all(std::span<const std::string> texts, const EmbeddingOptions& o) {
  Embedded e;
  e.row_of_item.assign(texts.size(), SIZE_MAX);
  std::vector<DedupEmbedding> rows;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    auto v = embed_for_dedup(texts[i], o);
    if (v.always_unique) continue;
    e.row_of_item[i] = rows.size();
    e.item_of_row.push_back(i);
    rows.push_back(std::move(v));
  }
  e.x.resize(static_cast<Eigen::Index>(rows.size()), o.dim);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    e.x.row(static_cast<Eigen::Index>(r)) = Eigen::Map<const Eigen::RowVectorXf>(rows[r].values.data(), o.dim);
  }
  return e;
}

void check_options(std::span<const std::string> texts, const DedupOptions& o) {
  if (!(o.eps > 0 && o.eps < 2)) throw ConfigError("dedup eps must be in (0, 2)");
  if (texts.empty()) throw DataError("dedup: no samples");
  if (o.k_clusters < 0 || o.max_iters <= 0) throw ConfigError("dedup: bad k_clusters or max_iters");
}

// Greedy removal inside each cluster; members are visited in input order.
void remove_within(const Embedded& e, const std::vector<int>& row_cluster, int k, double eps,
                   DedupResult& out) {
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t r = 0; r < row_cluster.size(); ++r) members[row_cluster[r]].push_back(r);
  for (const auto& rows : members) {
    std::vector<std::size_t> kept;
    for (std::size_t r : rows) {
      const std::size_t item = e.item_of_row[r];
      for (std::size_t q : kept) {
        const double dist = 1.0 - double(e.x.row(r).dot(e.x.row(q)));
        if (dist < eps) {
          out.retained[item] = false;
          out.removed_by[item] = static_cast<std::int64_t>(e.item_of_row[q]);
          break;
        }
      }
      if (out.retained[item]) kept.push_back(r);
    }
  }
}

DedupResult empty_result(std::size_t n) {
  DedupResult out;
  out.retained.assign(n, true);
  out.removed_by.assign(n, -1);
  out.cluster.assign(n, -1);
  return out;
}

}  // namespace

DedupResult semantic_dedup(std::span<const std::string> texts, const DedupOptions& o) {
  check_options(texts, o);
  const Embedded e = embed_all(texts, o.embedding);
  DedupResult out = empty_result(texts.size());
  const auto m = static_cast<std::size_t>(e.x.rows());
  if (m == 0) return out;
  std::size_t k = o.k_clusters > 0 ? static_cast<std::size_t>(o.k_clusters)
                                   : static_cast<std::size_t>(std::ceil(std::sqrt(double(m))));
  if (k > m) {
    spdlog::warn("dedup: k_clusters {} exceeds {} embeddable samples; clamped", k, m);
    k = m;
    out.k_clamped = true;
  }
  out.k_used = static_cast<int>(k);

  std::vector<std::size_t> pick(m);
  for (std::size_t i = 0; i < m; ++i) pick[i] = i;
  Rng rng("datakit.kmeans", {o.seed});
  for (std::size_t i = 0; i < k; ++i) std::swap(pick[i], pick[i + rng.below(m - i)]);
  Matrix centroids(static_cast<Eigen::Index>(k), e.x.cols());
  for (std::size_t c = 0; c < k; ++c) centroids.row(c) = e.x.row(pick[c]);

  std::vector<int> assign(m, -1);
  for (int iter = 0; iter < o.max_iters; ++iter) {
    const Matrix sim = e.x * centroids.transpose();
    bool changed = false;
    for (std::size_t r = 0; r < m; ++r) {
      Eigen::Index best;
      sim.row(r).maxCoeff(&best);  // first maximum on ties
      if (assign[r] != static_cast<int>(best)) {
        assign[r] = static_cast<int>(best);
        changed = true;
      }
    }
    if (!changed) break;
    Matrix sums = Matrix::Zero(static_cast<Eigen::Index>(k), e.x.cols());
    for (std::size_t r = 0; r < m; ++r) sums.row(assign[r]) += e.x.row(r);
    for (std::size_t c = 0; c < k; ++c) {
      const float norm = sums.row(c).norm();
      if (norm > 0) centroids.row(c) = sums.row(c) / norm;  // empty clusters keep their centroid
    }
  }
  for (std::size_t r = 0; r < m; ++r) out.cluster[e.item_of_row[r]] = assign[r];
  remove_within(e, assign, static_cast<int>(k), o.eps, out);
  return out;
}

DedupResult all_pairs_dedup(std::span<const std::string> texts, const DedupOptions& o) {
  check_options(texts, o);
  const Embedded e = embed_all(texts, o.embedding);
  DedupResult out = empty_result(texts.size());
  const std::vector<int> one(static_cast<std::size_t>(e.x.rows()), 0);
  out.k_used = 1;
  for (std::size_t r = 0; r < one.size(); ++r) out.cluster[e.item_of_row[r]] = 0;
  remove_within(e, one, 1, o.eps, out);
  return out;
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  throw LogicError("bad split");
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw DataError("unknown split '" + std::string(name) + "'");
}

std::vector<Split> assign_splits(std::size_t n, std::uint64_t split_seed, std::size_t val_size,
                                 std::size_t test_size) {
  if (val_size + test_size >= n && (val_size + test_size) > 0) {
    throw ConfigError("val_size + test_size = " + std::to_string(val_size + test_size) +
                      " leaves no training data out of " + std::to_string(n) + " samples");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng("datakit.split", {split_seed});
  shuffle(order, rng);
  std::vector<Split> out(n, Split::kTrain);
  for (std::size_t i = 0; i < test_size; ++i) out[order[i]] = Split::kTest;
  for (std::size_t i = test_size; i < test_size + val_size; ++i) out[order[i]] = Split::kVal;
  return out;
}

std::vector<const AttributionSample*> AttributionDataset::of(Split s) const {
  std::vector<const AttributionSample*> out;
  for (const auto& x : samples) {
    if (x.split == s) out.push_back(&x);
  }
  return out;
}

std::vector<std::int64_t> AttributionDataset::class_counts(Split s) const {
  std::vector<std::int64_t> c(class_names.size(), 0);
  for (const auto& x : samples) {
    if (x.split == s) ++c.at(x.label);
  }
  return c;
}

void AttributionDataset::validate() const {
  if (class_names.size() < 2) throw DataError("an attribution dataset needs at least 2 classes");
  const auto train = class_counts(Split::kTrain);
  for (std::size_t c = 0; c < train.size(); ++c) {
    if (train[c] == 0) throw DataError("class " + class_names[c] + " has no training samples");
  }
}

AttributionDataset resplit(const AttributionDataset& dataset, std::uint64_t split_seed,
                           std::size_t val_size, std::size_t test_size) {
  AttributionDataset out = dataset;
  out.split_seed = split_seed;
  const auto s = assign_splits(out.samples.size(), split_seed, val_size, test_size);
  for (std::size_t i = 0; i < s.size(); ++i) out.samples[i].split = s[i];
  out.validate();
  return out;
}

DatasetBuild build_dataset(const GeneratedCorpus& corpus, const DatasetOptions& o) {
  DatasetBuild b;
  for (const auto& st : corpus.stats) b.dataset.class_names.push_back(st.model_id);
  const std::size_t m = b.dataset.class_names.size();
  std::vector<std::size_t> kept_ids;
  std::vector<std::string> texts;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    const auto& s = corpus.samples[i];
    ManifestRecord rec;
    rec.id = static_cast<std::int64_t>(i);
    rec.model_id = s.model_id;
    if (s.dropped) {
      rec.retained = false;
      rec.reason = s.drop_reason;
    } else {
      kept_ids.push_back(i);
      texts.push_back(s.full_text);
    }
    b.manifest.push_back(rec);
  }
  if (texts.empty()) throw DataError("no samples survived generation filtering");

  DedupResult d;
  if (o.dedup) {
    d = semantic_dedup(texts, o.dedup_options);
    if (texts.size() <= o.oracle_check_limit) {
      const auto oracle = all_pairs_dedup(texts, o.dedup_options);
      b.report.oracle_discrepancies = 0;
      for (std::size_t i = 0; i < texts.size(); ++i) b.report.oracle_discrepancies += d.retained[i] != oracle.retained[i];
    }
  } else {
    d = empty_result(texts.size());
  }

  b.report.input_count = static_cast<std::int64_t>(texts.size());
  b.report.removed_per_class.assign(m, 0);
  b.report.retained_per_class.assign(m, 0);
  for (std::size_t k = 0; k < texts.size(); ++k) {
    const auto& s = corpus.samples[kept_ids[k]];
    auto& rec = b.manifest[kept_ids[k]];
    if (!d.retained[k]) {
      rec.retained = false;
      rec.reason = "near_duplicate";
      rec.removed_by = static_cast<std::int64_t>(kept_ids[d.removed_by[k]]);
      ++b.report.removed_per_class.at(s.label);
      continue;
    }
    ++b.report.retained_per_class.at(s.label);
    b.dataset.samples.push_back({rec.id, s.full_text, s.label, s.model_id, Split::kTrain});
  }
  b.report.removed_count = d.removed();
  b.report.removed_fraction = double(b.report.removed_count) / double(texts.size());

  b.dataset = resplit(b.dataset, o.split_seed, o.val_size, o.test_size);
  for (const auto& s : b.dataset.samples) b.manifest[s.id].split = split_name(s.split);
  return b;
}

namespace {
using nlohmann::json;

std::string line(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace) + "\n"; }
}  // namespace

void save_dataset(const std::filesystem::path& dir, const DatasetBuild& b) {
  std::string data, manifest;
  for (const auto& s : b.dataset.samples) {
    data += line({{"id", s.id}, {"text", s.text}, {"label", s.label}, {"model_id", s.model_id},
                  {"split", split_name(s.split)}});
  }
  for (const auto& r : b.manifest) {
    json j = {{"id", r.id}, {"model_id", r.model_id}, {"split", r.split}, {"retained", r.retained}};
    j["removed_by"] = r.removed_by >= 0 ? json(r.removed_by) : json(nullptr);
    if (!r.reason.empty()) j["reason"] = r.reason;
    manifest += line(j);
  }
  const auto& rep = b.report;
  json report = {{"input_count", rep.input_count},
                 {"removed_count", rep.removed_count},
                 {"removed_fraction", rep.removed_fraction},
                 {"removed_per_class", rep.removed_per_class},
                 {"retained_per_class", rep.retained_per_class},
                 {"oracle_discrepancies", rep.oracle_discrepancies},
                 {"classes", b.dataset.class_names},
                 {"split_seed", b.dataset.split_seed},
                 {"split_counts",
                  {{"train", b.dataset.class_counts(Split::kTrain)},
                   {"val", b.dataset.class_counts(Split::kVal)},
                   {"test", b.dataset.class_counts(Split::kTest)}}}};
  write_file_atomic(dir / "dataset.jsonl", data);
  write_file_atomic(dir / "manifest.jsonl", manifest);
  write_file_atomic(dir / "dedup_report.json", report.dump(2) + "\n");
}

AttributionDataset load_dataset(const std::filesystem::path& dir) {
  AttributionDataset d;
  try {
    const json report = json::parse(read_file(dir / "dedup_report.json"));
    d.class_names = report.at("classes").get<std::vector<std::string>>();
    d.split_seed = report.at("split_seed").get<std::uint64_t>();
    std::ifstream in(dir / "dataset.jsonl", std::ios::binary);
    if (!in) throw IoError("cannot open " + (dir / "dataset.jsonl").string());
    std::string l;
    while (std::getline(in, l)) {
      if (l.empty()) continue;
      const json j = json::parse(l);
      AttributionSample s;
      s.id = j.at("id");
      s.text = j.at("text");
      s.label = j.at("label");
      s.model_id = j.at("model_id");
      s.split = parse_split(j.at("split").get<std::string>());
      if (s.label < 0 || s.label >= d.n_classes()) throw DataError("label out of range in dataset");
      d.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw DataError("malformed dataset in " + dir.string() + ": " + e.what());
  }
  d.validate();
  return d;
}

}  // namespace fingerlab
