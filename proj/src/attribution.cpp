#include "fingerlab/attribution.hpp"

#include <algorithm>

#include "fingerlab/error.hpp"
#include "fingerlab/rng.hpp"

namespace fingerlab {

std::string_view classifier_name(ClassifierKind k) {
  return k == ClassifierKind::kUnigram ? "unigram" : "encoder";
}

ClassifierKind parse_classifier(std::string_view name) {
  if (name == "unigram") return ClassifierKind::kUnigram;
  if (name == "encoder") return ClassifierKind::kEncoder;
  throw ConfigError("unknown classifier '" + std::string(name) + "' (expected unigram or encoder)");
}

namespace {

LabeledTexts gather(const std::vector<const AttributionSample*>& samples) {
  LabeledTexts out;
  for (const auto* s : samples) {
    out.texts.push_back(s->text);
    out.labels.push_back(s->label);
  }
  return out;
}

// Keeps the first k training samples of each class after a seeded shuffle.
std::vector<const AttributionSample*> subsample(std::vector<const AttributionSample*> train, int n_classes,
                                                std::int64_t per_class, std::uint64_t seed) {
  Rng rng("attribution.subsample", {seed, static_cast<std::uint64_t>(per_class)});
  shuffle(train, rng);
  std::vector<std::int64_t> taken(n_classes, 0);
  std::vector<const AttributionSample*> out;
  for (const auto* s : train) {
    if (taken[s->label] < per_class) {
      ++taken[s->label];
      out.push_back(s);
    }
  }
  for (int c = 0; c < n_classes; ++c) {
    if (taken[c] < per_class) {
      throw DataError("class " + std::to_string(c) + " has only " + std::to_string(taken[c]) +
                      " training samples; " + std::to_string(per_class) + " requested");
    }
  }
  // Back to dataset order so that the result does not depend on the shuffle
  // beyond membership.
  std::sort(out.begin(), out.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
  return out;
}

}  // namespace

SeedResult run_split(const AttributionDataset& dataset, ClassifierKind kind,
                     std::uint64_t split_seed, const ClassifierOptions& o,
                     const TokenizerModel& tokenizer) {
  const AttributionDataset ds = resplit(dataset, split_seed, o.val_size, o.test_size);
  auto train_samples = ds.of(Split::kTrain);
  if (o.train_per_class < 0) throw ConfigError("train_per_class must be non-negative");
  if (o.train_per_class > 0) train_samples = subsample(train_samples, ds.n_classes(), o.train_per_class, split_seed);
  const LabeledTexts train = gather(train_samples);
  const LabeledTexts test = gather(ds.of(Split::kTest));
  if (test.texts.empty()) throw ConfigError("test_size must be positive for evaluation");

  SeedResult r;
  r.split_seed = split_seed;
  r.n_train = static_cast<std::int64_t>(train.texts.size());
  std::vector<int> predicted;
  if (kind == ClassifierKind::kUnigram) {
    const auto clf = fit_unigram(train.texts, train.labels, ds.class_names, tokenizer, o.linear);
    predicted = clf.predict(test.texts, tokenizer);
    for (int c = 0; c < ds.n_classes(); ++c) {
      r.top_features[ds.class_names[c]] = top_features(clf.model, c, o.top_k, tokenizer);
    }
  } else {
    EncoderConfig cfg = o.encoder;
    cfg.order_seed = splitmix64(cfg.order_seed ^ split_seed);
    const auto enc = train_encoder(train, gather(ds.of(Split::kVal)), ds.class_names, tokenizer, cfg);
    predicted = enc.predict(test.texts, tokenizer);
  }
  const auto e = evaluate_predictions(test.labels, predicted, ds.n_classes());
  r.accuracy = e.accuracy;
  r.n_test = e.n;
  r.confusion = e.confusion;
  return r;
}

AttributionReport summarize(std::string setting, ClassifierKind kind,
                            const std::vector<std::string>& class_names,
                            std::span<const SeedResult> results) {
  if (results.empty()) throw LogicError("summarize: no results");
  AttributionReport rep;
  rep.setting = std::move(setting);
  rep.classifier = classifier_name(kind);
  rep.class_names = class_names;
  const int m = static_cast<int>(class_names.size());
  rep.confusion.assign(m, std::vector<std::int64_t>(m, 0));
  for (const auto& r : results) {
    rep.split_seeds.push_back(r.split_seed);
    rep.accuracies.push_back(r.accuracy);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) rep.confusion[i][j] += r.confusion.at(i).at(j);
  }
  const auto ms = mean_std(rep.accuracies);
  rep.mean = ms.mean;
  rep.std = ms.std;
  rep.chance_rate = chance_rate(m);
  rep.n_test = results.front().n_test;
  rep.n_train = results.front().n_train;
  rep.p_value = binomial_significance(rep.mean, rep.n_test, rep.chance_rate);
  rep.top_features = results.front().top_features;
  return rep;
}

AttributionReport repeated_eval(const AttributionDataset& dataset, ClassifierKind kind,
                                std::span<const std::uint64_t> split_seeds,
                                const ClassifierOptions& options, const TokenizerModel& tokenizer,
                                std::string setting) {
  if (split_seeds.size() < 2) throw ConfigError("repeated_eval needs at least 2 split seeds");
  std::vector<SeedResult> results;
  for (auto seed : split_seeds) results.push_back(run_split(dataset, kind, seed, options, tokenizer));
  return summarize(std::move(setting), kind, dataset.class_names, results);
}

AttributionDataset shuffle_labels(const AttributionDataset& dataset, std::uint64_t seed) {
  AttributionDataset out = dataset;
  std::vector<int> labels;
  for (const auto& s : out.samples) labels.push_back(s.label);
  Rng rng("attribution.shuffle_labels", {seed});
  shuffle(labels, rng);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out.samples[i].label = labels[i];
    out.samples[i].model_id = out.class_names[labels[i]];
  }
  return out;
}

}  // namespace fingerlab
