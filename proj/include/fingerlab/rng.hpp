#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

namespace fingerlab {

// Every source of randomness in the lab is a named stream keyed by a domain
// tag plus integer keys, so that e.g. initial weights depend only on
// init_seed and data order depends only on (order_seed, epoch).
class Rng {
 public:
  Rng(std::string_view domain, std::initializer_list<std::uint64_t> keys);
  explicit Rng(std::uint64_t raw_seed);

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, n). Unbiased (rejection sampling).
  std::uint64_t below(std::uint64_t n);
  double normal();
  // Normal truncated to [-2 std, 2 std] by resampling.
  double truncated_normal(double std);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t stream_seed(std::string_view domain,
                          std::initializer_list<std::uint64_t> keys);

// In-place Fisher-Yates shuffle.
template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace fingerlab
