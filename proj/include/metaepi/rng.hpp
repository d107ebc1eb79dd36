#pragma once

// Splittable counter-based random stream. A stream is identified by a 64-bit
// key; draws are splitmix64 finalizations of key + counter. Child streams are
// derived by label so that the same (seed, split path) always replays the
// same sequence, independent of what any sibling stream consumed.

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace metaepi {

namespace detail {

inline uint64_t mix64(uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

class RngStream {
 public:
  explicit RngStream(uint64_t seed)
      : base_(detail::mix64(seed ^ 0xD1B54A32D192ED03ULL)) {}

  RngStream child(uint64_t label) const {
    RngStream c(0);
    c.base_ = detail::mix64(base_ ^ detail::mix64(label * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL));
    c.counter_ = 0;
    return c;
  }

  RngStream child(std::string_view label) const { return child(detail::fnv1a64(label)); }

  uint64_t next_u64() {
    ++counter_;
    return detail::mix64(base_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  // Uniform in [0, 1).
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; consumes two draws per call.
  double next_gaussian() {
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;       // [0, 1)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [0, n), n >= 1.
  uint64_t next_below(uint64_t n) {
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // First k entries of a partial Fisher-Yates shuffle of 0..n-1, in draw order.
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    for (int i = 0; i < k; ++i) {
      int j = i + static_cast<int>(next_below(static_cast<uint64_t>(n - i)));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = 0; i + 1 < v.size(); ++i) {
      size_t j = i + static_cast<size_t>(next_below(v.size() - i));
      std::swap(v[i], v[j]);
    }
  }

 private:
  uint64_t base_;
  uint64_t counter_ = 0;
};

}  // namespace metaepi
