#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace cpvt {

// Splittable counter-based PRNG. A generator is a (key, counter) pair; the
// i-th output is a fixed 64-bit mix of key + i, so draws do not depend on
// hidden state and streams derived by name are stable across platforms and
// call order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x43504d54u)) {}

  // Derives an independent stream keyed by name ("init", "noise", ...).
  Rng stream(std::string_view name) const;
  // Derives an independent stream keyed by index (per-epoch, per-sample).
  Rng stream(std::uint64_t index) const;

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * kGamma); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  // Standard normal via Box-Muller (no cached spare, two draws per call).
  double normal();

  // Normal(0, stddev) resampled until within +/- limit stddevs.
  double trunc_normal(double stddev, double limit = 2.0);

  // Fisher-Yates permutation of {0, ..., n-1}.
  std::vector<int> permutation(int n);

 private:
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ull;
  static std::uint64_t mix(std::uint64_t z);

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Incremental FNV-1a over raw bytes (file digests, parameter checksums).
struct Fnv1a {
  std::uint64_t state = 14695981039346656037ull;
  void update(const void* data, std::size_t n);
  std::uint64_t digest() const { return state; }
};

}  // namespace cpvt
