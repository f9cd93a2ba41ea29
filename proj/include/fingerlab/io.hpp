#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fingerlab {

// 64-bit FNV-1a. Used for content hashes, checksums and cache keys.
class Fnv1a {
 public:
  Fnv1a& update(std::span<const std::uint8_t> bytes);
  Fnv1a& update(std::string_view text);
  template <typename T>
  Fnv1a& update_pod(const T& value) {
    return update(std::span(reinterpret_cast<const std::uint8_t*>(&value),
                            sizeof(T)));
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv1a(std::string_view text);
std::string hex64(std::uint64_t value);

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

// Little-endian binary encoding helpers.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void bytes(std::string_view b) { buf_.append(b); }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string what)
      : data_(data), what_(std::move(what)) {}
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string_view bytes(std::size_t n);
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const;
  std::string_view data_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace fingerlab
