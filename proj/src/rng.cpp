#include "cpvt/rng.hpp"

#include <cmath>
#include <numbers>

namespace cpvt {

std::uint64_t Rng::mix(std::uint64_t z) {
  // SplitMix64 finalizer.
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ull;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebull;
  z ^= z >> 31;
  return z;
}

static std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Rng Rng::stream(std::string_view name) const {
  Rng child(0);
  child.key_ = mix(key_ ^ fnv1a64(name));
  child.counter_ = 0;
  return child;
}

Rng Rng::stream(std::uint64_t index) const {
  Rng child(0);
  child.key_ = mix(key_ + (index + 1) * 0xd1b54a32d192ed03ull);
  child.counter_ = 0;
  return child;
}

std::uint64_t Rng::below(std::uint64_t n) {
  const std::uint64_t limit = n * ((~0ull) / n);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  // u1 in (0, 1] so the log is finite.
  const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::trunc_normal(double stddev, double limit) {
  double z;
  do {
    z = normal();
  } while (std::abs(z) > limit);
  return z * stddev;
}

void Fnv1a::update(const void* data, std::size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    state ^= p[i];
    state *= 1099511628211ull;
  }
}

std::vector<int> Rng::permutation(int n) {
  std::vector<int> p(n);
  for (int i = 0; i < n; ++i) p[i] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(below(static_cast<std::uint64_t>(i) + 1));
    std::swap(p[i], p[j]);
  }
  return p;
}

}  // namespace cpvt
