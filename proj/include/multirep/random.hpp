#pragma once

#include <cstdint>
#include <random>

namespace multirep {

/// SplitMix64 finalizer. Used as the mixing function for every counter-based
/// draw in the project.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b));
}

/// Uniform double in [0, 1) from the top 53 bits of a 64-bit word.
constexpr double to_unit(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Counter-based random stream: (seed, stream id, counter). Every stochastic
/// op takes one block from the stream; element e of block c draws
/// hash(seed, stream, c, e). Replaying a stream from the same state replays
/// every mask bit-for-bit.
class SeedStream {
 public:
  SeedStream() = default;
  SeedStream(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter = 0)
      : seed_(seed), stream_(stream), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  /// Reserves the next block and returns its key.
  std::uint64_t next_block() {
    return hash_combine(hash_combine(seed_, stream_), counter_++);
  }

  static double uniform(std::uint64_t block_key, std::uint64_t element) {
    return to_unit(hash_combine(block_key, element));
  }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t counter_ = 0;
};

/// Engine for index-style sampling keyed by (seed, index).
inline std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t index) {
  return std::mt19937_64(hash_combine(seed, index));
}

/// Unbiased draw in [0, n). Avoids std::uniform_int_distribution so the
/// sequence does not depend on the standard library vendor.
template <typename Engine>
std::size_t uniform_index(Engine& engine, std::size_t n) {
  const std::uint64_t range = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
  std::uint64_t x;
  do {
    x = engine();
  } while (x >= limit);
  return static_cast<std::size_t>(x % range);
}

template <typename Engine>
double uniform_real(Engine& engine) {
  return to_unit(engine());
}

/// Fisher-Yates shuffle driven by uniform_index.
template <typename Engine, typename Container>
void shuffle(Container& items, Engine& engine) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::size_t j = uniform_index(engine, i);
    using std::swap;
    swap(items[i - 1], items[j]);
  }
}

}  // namespace multirep
