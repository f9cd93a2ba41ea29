#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace fingerlab {

using TokenId = std::int32_t;

// Byte-level BPE. Ids [0, 256) are raw bytes, ids [256, vocab_size) are
// merges in training order. Three special tokens sit at fixed positions just
// past the BPE vocabulary: BOS = vocab_size, EOS = vocab_size + 1,
// PAD = vocab_size + 2. They never come out of encode() and decode() rejects
// them.
class TokenizerModel {
 public:
  using Merge = std::pair<TokenId, TokenId>;

  TokenizerModel();  // bytes only, vocab_size 256
  TokenizerModel(std::vector<Merge> merges);

  int vocab_size() const { return static_cast<int>(vocab_.size()); }
  // vocab_size() plus the special tokens; the size of an LM's embedding table.
  int n_tokens() const { return vocab_size() + 3; }
  TokenId bos() const { return vocab_size(); }
  TokenId eos() const { return vocab_size() + 1; }
  TokenId pad() const { return vocab_size() + 2; }
  bool is_special(TokenId id) const { return id >= vocab_size(); }

  const std::vector<Merge>& merges() const { return merges_; }
  const std::string& token_bytes(TokenId id) const;

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  // Versioned binary form, see docs/formats.md.
  std::string serialize() const;
  static TokenizerModel deserialize(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static TokenizerModel load(const std::filesystem::path& path);

  // Hash of the serialized form; stamped into checkpoints.
  std::uint64_t fingerprint() const;

  bool operator==(const TokenizerModel& other) const {
    return merges_ == other.merges_;
  }

 private:
  std::vector<Merge> merges_;
  std::vector<std::string> vocab_;
  std::unordered_map<std::uint64_t, TokenId> rank_;  // pair key -> merged id
};

// Learns vocab_size - 256 merges. Ties between equally frequent pairs go to
// the lexicographically smallest (left bytes, right bytes) pair. Merges never
// cross document boundaries.
TokenizerModel train_bpe(std::span<const std::string> corpus, int vocab_size);

}  // namespace fingerlab
