#pragma once

#include <cstdint>
#include <initializer_list>
#include <utility>
#include <vector>

namespace espl {

// Deterministic random streams. Every consumer derives its own stream from
// the single global seed plus a purpose tag and indices, so replay is exact
// regardless of evaluation order or concurrency. No std:: distributions are
// used anywhere: the bit-to-double mapping below is fully specified.
namespace stream {
inline constexpr std::uint64_t kSelection = 0x01;
inline constexpr std::uint64_t kProblemBatch = 0x02;
inline constexpr std::uint64_t kRollout = 0x03;
inline constexpr std::uint64_t kCrossoverGate = 0x04;
inline constexpr std::uint64_t kPolicy = 0x05;
inline constexpr std::uint64_t kTest = 0x7f;
} // namespace stream

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}
} // namespace detail

class RngStream {
public:
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return detail::splitmix64(state_); }

  // Uniform in [0, 1), 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  template <class T> void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      using std::swap;
      swap(v[i - 1], v[j]);
    }
  }

private:
  std::uint64_t state_;
};

// Derive a child stream from (seed, path). Each path word is folded through
// splitmix so sibling streams are statistically independent.
inline RngStream derive_stream(std::uint64_t seed,
                               std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = seed ^ 0xa0761d6478bd642full;
  detail::splitmix64(s);
  for (std::uint64_t w : path) {
    s ^= detail::splitmix64(s) ^ (w * 0xe7037ed1a0b428dbull);
    detail::splitmix64(s);
  }
  return RngStream(s);
}

} // namespace espl
