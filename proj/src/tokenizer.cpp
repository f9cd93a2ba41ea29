#include "fingerlab/tokenizer.hpp"

#include <algorithm>
#include <queue>
#include <tuple>

#include "fingerlab/error.hpp"
#include "fingerlab/io.hpp"

namespace fingerlab {
namespace {

constexpr char kMagic[4] = {'F', 'L', 'T', 'K'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

// Doubly linked symbol list over one document, used by both training and
// encoding. Removed slots have token -1.
struct SymbolList {
  std::vector<TokenId> token;
  std::vector<int> prev, next;

  void reset(std::string_view text) {
    const int n = static_cast<int>(text.size());
    token.resize(n);
    prev.resize(n);
    next.resize(n);
    for (int i = 0; i < n; ++i) {
      token[i] = static_cast<unsigned char>(text[i]);
      prev[i] = i - 1;
      next[i] = i + 1 < n ? i + 1 : -1;
    }
  }
};

}  // namespace

TokenizerModel::TokenizerModel() : TokenizerModel(std::vector<Merge>{}) {}

TokenizerModel::TokenizerModel(std::vector<Merge> merges) : merges_(std::move(merges)) {
  vocab_.reserve(256 + merges_.size());
  for (int b = 0; b < 256; ++b) vocab_.emplace_back(1, static_cast<char>(b));
  for (const auto& [a, b] : merges_) {
    const TokenId id = static_cast<TokenId>(vocab_.size());
    if (a < 0 || b < 0 || a >= id || b >= id) {
      throw DataError("tokenizer: merge " + std::to_string(id) +
                      " references a token that does not exist yet");
    }
    vocab_.push_back(vocab_[a] + vocab_[b]);
    rank_.emplace(pair_key(a, b), id);
  }
}

const std::string& TokenizerModel::token_bytes(TokenId id) const {
  if (id < 0 || id >= vocab_size()) {
    throw DataError("token id " + std::to_string(id) + " out of range [0, " +
                    std::to_string(vocab_size()) + ")");
  }
  return vocab_[id];
}

// Repeatedly merges the lowest-ranked adjacent pair, leftmost first. This is
// equivalent to applying every merge in rank order over the whole text
// because a pair containing a merged token always has a higher rank than the
// merge that produced it.
std::vector<TokenId> TokenizerModel::encode(std::string_view text) const {
  if (text.empty()) return {};
  SymbolList s;
  s.reset(text);
  using Entry = std::tuple<TokenId, int, std::uint64_t>;  // merged id, left pos, pair
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  auto push = [&](int i) {
    if (i < 0) return;
    const int j = s.next[i];
    if (j < 0) return;
    const auto key = pair_key(s.token[i], s.token[j]);
    if (auto it = rank_.find(key); it != rank_.end()) heap.emplace(it->second, i, key);
  };
  for (int i = 0; i + 1 < static_cast<int>(text.size()); ++i) push(i);
  while (!heap.empty()) {
    const auto [merged, i, key] = heap.top();
    heap.pop();
    if (s.token[i] < 0) continue;
    const int j = s.next[i];
    if (j < 0 || pair_key(s.token[i], s.token[j]) != key) continue;
    s.token[i] = merged;
    s.token[j] = -1;
    s.next[i] = s.next[j];
    if (s.next[j] >= 0) s.prev[s.next[j]] = i;
    push(s.prev[i]);
    push(i);
  }
  std::vector<TokenId> out;
  for (int i = 0; i >= 0; i = s.next[i]) out.push_back(s.token[i]);
  return out;
}

std::string TokenizerModel::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += token_bytes(id);
  return out;
}

std::string TokenizerModel::serialize() const {
  ByteWriter w;
  w.bytes(std::string_view(kMagic, 4));
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(vocab_size()));
  w.u32(static_cast<std::uint32_t>(merges_.size()));
  for (const auto& [a, b] : merges_) {
    w.u32(static_cast<std::uint32_t>(a));
    w.u32(static_cast<std::uint32_t>(b));
  }
  for (const auto& tok : vocab_) {
    w.u32(static_cast<std::uint32_t>(tok.size()));
    w.bytes(tok);
  }
  return w.str();
}

TokenizerModel TokenizerModel::deserialize(std::string_view bytes) {
  ByteReader r(bytes, "tokenizer");
  if (r.bytes(4) != std::string_view(kMagic, 4)) throw DataError("tokenizer: bad magic");
  if (const auto v = r.u32(); v != kVersion) {
    throw DataError("tokenizer: unsupported version " + std::to_string(v));
  }
  const auto vocab_size = r.u32();
  const auto n_merges = r.u32();
  if (vocab_size != 256 + n_merges) throw DataError("tokenizer: inconsistent header");
  std::vector<Merge> merges(n_merges);
  for (auto& [a, b] : merges) {
    a = static_cast<TokenId>(r.u32());
    b = static_cast<TokenId>(r.u32());
  }
  TokenizerModel model(std::move(merges));
  for (std::uint32_t i = 0; i < vocab_size; ++i) {
    const auto len = r.u32();
    if (r.bytes(len) != model.vocab_[i]) {
      throw DataError("tokenizer: vocab entry " + std::to_string(i) +
                      " disagrees with merges");
    }
  }
  if (!r.at_end()) throw DataError("tokenizer: trailing bytes");
  return model;
}

void TokenizerModel::save(const std::filesystem::path& path) const {
  write_file_atomic(path, serialize());
}

TokenizerModel TokenizerModel::load(const std::filesystem::path& path) {
  return deserialize(read_file(path));
}

std::uint64_t TokenizerModel::fingerprint() const { return fnv1a(serialize()); }

TokenizerModel train_bpe(std::span<const std::string> corpus, int vocab_size) {
  if (corpus.empty()) throw ConfigError("train_bpe: corpus is empty");
  if (vocab_size < 257) {
    throw ConfigError("train_bpe: vocab_size must be >= 257, got " +
                      std::to_string(vocab_size));
  }

  // Flatten all documents into one symbol list; document ends are hard
  // boundaries (next = -1 / prev = -1).
  std::size_t total = 0;
  for (const auto& d : corpus) total += d.size();
  if (total == 0) throw ConfigError("train_bpe: corpus is empty");
  std::vector<TokenId> token(total);
  std::vector<int> prev(total), next(total);
  {
    std::size_t pos = 0;
    for (const auto& d : corpus) {
      const std::size_t start = pos;
      for (unsigned char c : d) {
        token[pos] = c;
        prev[pos] = pos == start ? -1 : static_cast<int>(pos - 1);
        next[pos] = pos + 1 < start + d.size() ? static_cast<int>(pos + 1) : -1;
        ++pos;
      }
    }
  }

  std::vector<std::string> vocab;
  for (int b = 0; b < 256; ++b) vocab.emplace_back(1, static_cast<char>(b));

  std::unordered_map<std::uint64_t, std::int64_t> count;
  std::unordered_map<std::uint64_t, std::vector<int>> where;
  for (std::size_t i = 0; i < total; ++i) {
    if (next[i] < 0) continue;
    const auto key = pair_key(token[i], token[next[i]]);
    ++count[key];
    where[key].push_back(static_cast<int>(i));
  }

  // Max-heap on count; ties prefer the lexicographically smaller byte pair.
  struct Cand {
    std::int64_t count;
    TokenId a, b;
  };
  auto worse = [&vocab](const Cand& x, const Cand& y) {
    if (x.count != y.count) return x.count < y.count;
    const auto& xa = vocab[x.a];
    const auto& ya = vocab[y.a];
    if (xa != ya) return xa > ya;
    return vocab[x.b] > vocab[y.b];
  };
  std::priority_queue<Cand, std::vector<Cand>, decltype(worse)> heap(worse);
  for (const auto& [key, c] : count) {
    heap.push({c, static_cast<TokenId>(key >> 32), static_cast<TokenId>(key & 0xffffffffu)});
  }

  auto bump = [&](int i, std::int64_t delta) {
    if (i < 0 || next[i] < 0) return;
    const auto key = pair_key(token[i], token[next[i]]);
    auto& c = count[key];
    c += delta;
    if (delta > 0) where[key].push_back(i);
    if (c > 0) heap.push({c, token[i], token[next[i]]});
  };

  std::vector<TokenizerModel::Merge> merges;
  while (static_cast<int>(vocab.size()) < vocab_size) {
    // Pop until the top entry reflects a live count.
    Cand best{};
    bool found = false;
    while (!heap.empty()) {
      best = heap.top();
      heap.pop();
      const auto it = count.find(pair_key(best.a, best.b));
      if (it != count.end() && it->second == best.count && best.count > 0) {
        found = true;
        break;
      }
    }
    if (!found) {
      throw ConfigError("train_bpe: corpus has no pairs left after " +
                        std::to_string(merges.size()) + " merges; vocab_size " +
                        std::to_string(vocab_size) + " unreachable");
    }
    const TokenId merged = static_cast<TokenId>(vocab.size());
    vocab.push_back(vocab[best.a] + vocab[best.b]);
    merges.emplace_back(best.a, best.b);

    const auto key = pair_key(best.a, best.b);
    auto positions = std::move(where[key]);
    where.erase(key);
    std::sort(positions.begin(), positions.end());
    for (int i : positions) {
      if (token[i] != best.a) continue;
      const int j = next[i];
      if (j < 0 || token[j] != best.b) continue;
      bump(prev[i], -1);
      bump(j, -1);
      --count[key];
      token[i] = merged;
      token[j] = -1;
      next[i] = next[j];
      if (next[j] >= 0) prev[next[j]] = i;
      bump(prev[i], +1);
      bump(i, +1);
    }
    count.erase(key);
  }
  return TokenizerModel(std::move(merges));
}

}  // namespace fingerlab
