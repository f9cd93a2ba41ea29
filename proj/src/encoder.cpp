#include "fingerlab/encoder.hpp"

#include <cmath>
#include <spdlog/spdlog.h>

#include "fingerlab/error.hpp"
#include "fingerlab/io.hpp"
#include "fingerlab/rng.hpp"
#include "fingerlab/serialization.hpp"
#include "fingerlab/trainer.hpp"

namespace fingerlab {

namespace {

template <typename Real>
Eigen::Map<const RowMatrix<Real>> cview(const BasicParams<Real>& p, const TensorSlot& s) {
  return {p.values.data() + s.offset, s.rows, s.cols};
}

template <typename Real>
Eigen::Map<RowMatrix<Real>> gview(std::span<Real> g, const TensorSlot& s) {
  return {g.data() + s.offset, s.rows, s.cols};
}

template <typename Real>
void check_classifier(const BasicParams<Real>& p) {
  if (!p.head_bias || p.head_outputs < 2) throw LogicError("not a classifier parameter set");
}

// Mean over valid positions of each row: [batch, d_model], plus the counts.
template <typename Real>
RowMatrix<Real> mean_pool(const RowMatrix<Real>& z, const TokenBatch& batch, std::vector<int>& counts) {
  const int B = batch.batch_size, T = batch.seq_len;
  RowMatrix<Real> pooled = RowMatrix<Real>::Zero(B, z.cols());
  counts.assign(B, 0);
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < T; ++t) {
      const int n = b * T + t;
      if (!batch.valid.empty() && !batch.valid[n]) continue;
      pooled.row(b) += z.row(n);
      ++counts[b];
    }
    pooled.row(b) /= Real(counts[b]);
  }
  return pooled;
}

}  // namespace

LMConfig EncoderConfig::default_lm() {
  LMConfig c;
  c.n_layers = 4;
  c.d_model = 256;
  c.d_ffn = 688;
  c.n_heads = 4;
  c.n_kv_heads = 4;
  c.max_seq_len = 128;
  c.dropout_rate = 0.1;
  return c;
}

void EncoderConfig::validate() const {
  lm.validate();
  if (!(peak_lr > 0)) throw ConfigError("encoder peak_lr must be positive");
  if (batch_size <= 0) throw ConfigError("encoder batch_size must be positive");
  if (!(warmup_fraction >= 0 && warmup_fraction <= 1)) throw ConfigError("encoder warmup_fraction must be in [0, 1]");
  if (!(epochs >= 0)) throw ConfigError("encoder epochs must be non-negative");
  if (!(weight_decay >= 0)) throw ConfigError("encoder weight_decay must be non-negative");
  if (!(grad_clip > 0)) throw ConfigError("encoder grad_clip must be positive");
  if (evals_per_epoch <= 0) throw ConfigError("encoder evals_per_epoch must be positive");
}

template <typename Real>
RowMatrix<Real> classifier_logits(const BasicParams<Real>& params, const TokenBatch& batch) {
  check_classifier(params);
  TransformerPass<Real> pass(params, false);
  const auto& z = pass.run(batch, nullptr);
  std::vector<int> counts;
  RowMatrix<Real> logits = mean_pool(z, batch, counts) * cview(params, params.layout.head);
  logits.rowwise() += cview(params, params.layout.head_bias).row(0);
  return logits;
}

template <typename Real>
ClassifierLoss<Real> classifier_loss_and_grads(const BasicParams<Real>& params,
                                               const TokenBatch& batch,
                                               std::span<const int> labels, Rng* dropout) {
  check_classifier(params);
  if (static_cast<int>(labels.size()) != batch.batch_size) throw DataError("one label per row required");
  TransformerPass<Real> pass(params, false);
  const auto& z = pass.run(batch, dropout);
  std::vector<int> counts;
  const RowMatrix<Real> pooled = mean_pool(z, batch, counts);
  RowMatrix<Real> logits = pooled * cview(params, params.layout.head);
  logits.rowwise() += cview(params, params.layout.head_bias).row(0);

  const int B = batch.batch_size, T = batch.seq_len, M = params.head_outputs;
  ClassifierLoss<Real> out;
  out.grads.assign(params.values.size(), Real(0));
  RowMatrix<Real> dlogits(B, M);
  double total = 0;
  for (int b = 0; b < B; ++b) {
    if (labels[b] < 0 || labels[b] >= M) throw DataError("label out of range");
    const double mx = double(logits.row(b).maxCoeff());
    double sum = 0;
    for (int j = 0; j < M; ++j) sum += std::exp(double(logits(b, j)) - mx);
    const double lse = mx + std::log(sum);
    total += lse - double(logits(b, labels[b]));
    for (int j = 0; j < M; ++j) dlogits(b, j) = Real(std::exp(double(logits(b, j)) - lse) / B);
    dlogits(b, labels[b]) -= Real(1.0 / B);
  }
  if (!std::isfinite(total)) throw NumericError("non-finite classifier loss");
  out.loss = total / B;

  std::span<Real> g(out.grads);
  gview(g, params.layout.head).noalias() += pooled.transpose() * dlogits;
  gview(g, params.layout.head_bias).row(0) += dlogits.colwise().sum();
  const RowMatrix<Real> dpooled = dlogits * cview(params, params.layout.head).transpose();
  RowMatrix<Real> dz = RowMatrix<Real>::Zero(z.rows(), z.cols());
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < T; ++t) {
      const int n = b * T + t;
      if (!batch.valid.empty() && !batch.valid[n]) continue;
      dz.row(n) = dpooled.row(b) / Real(counts[b]);
    }
  }
  pass.backward(dz, g);
  return out;
}

template RowMatrix<float> classifier_logits<float>(const BasicParams<float>&, const TokenBatch&);
template RowMatrix<double> classifier_logits<double>(const BasicParams<double>&, const TokenBatch&);
template ClassifierLoss<float> classifier_loss_and_grads<float>(const BasicParams<float>&, const TokenBatch&,
                                                                std::span<const int>, Rng*);
template ClassifierLoss<double> classifier_loss_and_grads<double>(const BasicParams<double>&, const TokenBatch&,
                                                                  std::span<const int>, Rng*);

std::vector<TokenId> EncoderAttributor::input_ids(const std::string& text,
                                                  const TokenizerModel& tokenizer) const {
  std::vector<TokenId> ids{tokenizer.bos()};
  const auto body = tokenizer.encode(text);
  const std::size_t room = static_cast<std::size_t>(config.lm.max_seq_len) - 1;
  ids.insert(ids.end(), body.begin(), body.begin() + static_cast<std::ptrdiff_t>(std::min(room, body.size())));
  return ids;
}

namespace {

std::vector<int> predict_rows(const LMParams& params, const std::vector<std::vector<TokenId>>& rows,
                              TokenId pad) {
  std::vector<int> out;
  out.reserve(rows.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t s = 0; s < rows.size(); s += kChunk) {
    const std::span<const std::vector<TokenId>> chunk(rows.data() + s, std::min(kChunk, rows.size() - s));
    const auto logits = classifier_logits(params, TokenBatch::from_rows(chunk, pad));
    for (Eigen::Index b = 0; b < logits.rows(); ++b) {
      Eigen::Index best;
      logits.row(b).maxCoeff(&best);  // first maximum on ties
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

double accuracy_of(const std::vector<int>& pred, const std::vector<int>& truth) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == truth[i];
  return double(ok) / double(pred.size());
}

}  // namespace

std::vector<int> EncoderAttributor::predict(std::span<const std::string> texts,
                                            const TokenizerModel& tokenizer) const {
  std::vector<std::vector<TokenId>> rows;
  rows.reserve(texts.size());
  for (const auto& t : texts) rows.push_back(input_ids(t, tokenizer));
  return predict_rows(params, rows, tokenizer.pad());
}

EncoderAttributor train_encoder(const LabeledTexts& train, const LabeledTexts& val,
                                std::vector<std::string> class_names,
                                const TokenizerModel& tokenizer, EncoderConfig config) {
  config.lm.vocab_size = tokenizer.n_tokens();
  config.validate();
  const int M = static_cast<int>(class_names.size());
  if (M < 2) throw ConfigError("encoder needs at least 2 classes");
  if (train.texts.empty() || train.texts.size() != train.labels.size()) throw DataError("encoder: bad training set");
  if (val.texts.empty()) throw DataError("encoder: the validation split is empty");
  if (val.texts.size() != val.labels.size()) throw DataError("encoder: bad validation set");
  for (int y : train.labels) {
    if (y < 0 || y >= M) throw DataError("encoder: training label out of range");
  }

  EncoderAttributor enc;
  enc.config = config;
  enc.class_names = std::move(class_names);
  enc.params = init_params<float>(config.lm, config.init_seed, M, true);

  std::vector<std::vector<TokenId>> train_rows, val_rows;
  for (const auto& t : train.texts) train_rows.push_back(enc.input_ids(t, tokenizer));
  for (const auto& t : val.texts) val_rows.push_back(enc.input_ids(t, tokenizer));

  const std::size_t n = train_rows.size();
  const auto steps_per_epoch = static_cast<std::int64_t>((n + config.batch_size - 1) / config.batch_size);
  const auto total = static_cast<std::int64_t>(std::ceil(config.epochs * double(steps_per_epoch)));
  const auto warmup = static_cast<std::int64_t>(std::llround(config.warmup_fraction * double(total)));
  const std::int64_t cadence = std::max<std::int64_t>(1, steps_per_epoch / config.evals_per_epoch);
  auto lr_at_step = [&](std::int64_t k) {
    if (k <= warmup) return config.peak_lr * double(k) / double(std::max<std::int64_t>(warmup, 1));
    return config.peak_lr * double(total - k) / double(total - warmup);
  };

  LMParams best = enc.params;
  double best_acc = accuracy_of(predict_rows(enc.params, val_rows, tokenizer.pad()), val.labels);
  const double initial_acc = best_acc;
  enc.best_step = 0;

  AdamW adam(enc.params.values.size(), 0.9, 0.999, 1e-8, config.weight_decay);
  BatchSchedule schedule(config.order_seed, config.batch_size, n);
  std::vector<std::vector<TokenId>> rows;
  std::vector<int> labels;
  for (std::int64_t step = 0; step < total; ++step) {
    rows.clear();
    labels.clear();
    for (auto i : schedule.indices(step)) {
      rows.push_back(train_rows[i]);
      labels.push_back(train.labels[i]);
    }
    const TokenBatch batch = TokenBatch::from_rows(rows, tokenizer.pad());
    Rng dropout("encoder.dropout", {config.order_seed, static_cast<std::uint64_t>(step)});
    auto lg = classifier_loss_and_grads(enc.params, batch, labels, &dropout);
    clip_global_norm(std::span<float>(lg.grads), config.grad_clip);
    adam.step(std::span<float>(enc.params.values), std::span<const float>(lg.grads), enc.params.layout,
              lr_at_step(step + 1));
    const std::int64_t done = step + 1;
    if (done % cadence == 0 || done == total) {
      const double acc = accuracy_of(predict_rows(enc.params, val_rows, tokenizer.pad()), val.labels);
      spdlog::debug("encoder step {} loss {:.4f} val acc {:.4f}", done, lg.loss, acc);
      if (acc > best_acc) {
        best_acc = acc;
        best = enc.params;
        enc.best_step = done;
      }
    }
  }
  enc.steps_trained = total;
  enc.improved = best_acc > initial_acc;
  if (total > 0 && !enc.improved) {
    spdlog::warn("encoder: validation accuracy never improved on the untrained model; keeping final weights");
    enc.best_step = total;
    enc.best_val_accuracy = accuracy_of(predict_rows(enc.params, val_rows, tokenizer.pad()), val.labels);
    return enc;
  }
  enc.params = std::move(best);
  enc.best_val_accuracy = best_acc;
  return enc;
}

void EncoderAttributor::save(const std::filesystem::path& dir) const {
  Checkpoint ck;
  ck.params = params;
  ck.init_seed = config.init_seed;
  ck.order_seed = config.order_seed;
  ck.step = steps_trained;
  ck.save(dir / "encoder.ckpt");
  const nlohmann::json j = {{"kind", "encoder"},
                            {"classes", class_names},
                            {"lm_config", config.lm},
                            {"peak_lr", config.peak_lr},
                            {"batch_size", config.batch_size},
                            {"warmup_fraction", config.warmup_fraction},
                            {"epochs", config.epochs},
                            {"weight_decay", config.weight_decay},
                            {"grad_clip", config.grad_clip},
                            {"evals_per_epoch", config.evals_per_epoch},
                            {"init_seed", config.init_seed},
                            {"order_seed", config.order_seed},
                            {"steps_trained", steps_trained},
                            {"best_step", best_step},
                            {"best_val_accuracy", best_val_accuracy},
                            {"improved", improved}};
  write_file_atomic(dir / "encoder.json", j.dump(2) + "\n");
}

EncoderAttributor EncoderAttributor::load(const std::filesystem::path& dir) {
  EncoderAttributor e;
  try {
    const auto j = nlohmann::json::parse(read_file(dir / "encoder.json"));
    if (j.at("kind") != "encoder") throw DataError(dir.string() + " does not hold an encoder classifier");
    e.class_names = j.at("classes").get<std::vector<std::string>>();
    e.config.lm = j.at("lm_config").get<LMConfig>();
    e.config.peak_lr = j.at("peak_lr");
    e.config.batch_size = j.at("batch_size");
    e.config.warmup_fraction = j.at("warmup_fraction");
    e.config.epochs = j.at("epochs");
    e.config.weight_decay = j.at("weight_decay");
    e.config.grad_clip = j.at("grad_clip");
    e.config.evals_per_epoch = j.at("evals_per_epoch");
    e.config.init_seed = j.at("init_seed");
    e.config.order_seed = j.at("order_seed");
    e.steps_trained = j.at("steps_trained");
    e.best_step = j.at("best_step");
    e.best_val_accuracy = j.at("best_val_accuracy");
    e.improved = j.at("improved");
  } catch (const nlohmann::json::exception& ex) {
    throw DataError("malformed encoder metadata in " + dir.string() + ": " + ex.what());
  }
  e.params = Checkpoint::load(dir / "encoder.ckpt").params;
  if (e.params.head_outputs != e.n_classes() || !(e.params.config == e.config.lm)) {
    throw DataError("encoder checkpoint in " + dir.string() + " does not match its metadata");
  }
  return e;
}

}  // namespace fingerlab
