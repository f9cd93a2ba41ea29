#include "fingerlab/rng.hpp"

#include <cmath>
#include <numbers>

#include "fingerlab/io.hpp"

namespace fingerlab {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::string_view domain,
                          std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(fnv1a(domain));
  for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k));
  return h;
}

Rng::Rng(std::string_view domain, std::initializer_list<std::uint64_t> keys)
    : engine_(stream_seed(domain, keys)) {}

Rng::Rng(std::uint64_t raw_seed) : engine_(raw_seed) {}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n <= 1) return 0;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

// Box-Muller; std::normal_distribution is implementation-defined and would
// break cross-platform reproducibility of initial weights.
double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double Rng::truncated_normal(double std) {
  double z;
  do {
    z = normal();
  } while (std::abs(z) > 2.0);
  return z * std;
}

}  // namespace fingerlab
