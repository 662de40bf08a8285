#pragma once

#include <cstdint>
#include <random>

namespace turbuforge {

/// SplitMix64 finalizer; a bijective mix of a 64-bit word.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream key from a master seed and up to three indices.
inline std::uint64_t derive_key(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                std::uint64_t c = 0) {
  std::uint64_t k = splitmix64(seed ^ 0x5851F42D4C957F2DULL);
  k = splitmix64(k ^ a);
  k = splitmix64(k ^ (b + 0x632BE59BD9B4E019ULL));
  k = splitmix64(k ^ (c + 0x2545F4914F6CDD1DULL));
  return k;
}

/// Counter-based draws: the value at (key, counter) does not depend on call order.
struct CounterRng {
  static double uniform(std::uint64_t key, std::uint64_t counter) {
    const std::uint64_t bits = splitmix64(splitmix64(key) ^ splitmix64(counter * 0xD1B54A32D192ED03ULL + 1));
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
  }
  static double normal(std::uint64_t key, std::uint64_t counter);
};

/// Sequential generator with platform-independent uniform/normal transforms
/// (std::normal_distribution is implementation-defined, so it is avoided).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t bits() { return engine_(); }
  /// Uniform on (0, 1).
  double uniform() { return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  int uniform_int(int n) { return static_cast<int>(engine_() % static_cast<std::uint64_t>(n)); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace turbuforge
