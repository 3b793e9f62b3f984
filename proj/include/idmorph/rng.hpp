#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace idmorph {

/// Seeded random source with a serializable state.
///
/// Uniform and normal draws are derived from raw 64-bit engine output with
/// explicit formulas, so a sequence is reproducible from the engine state
/// alone (no hidden distribution caches).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return n == 0 ? 0 : static_cast<std::size_t>(engine_() % n); }

  /// Standard normal via Box-Muller; consumes exactly two engine draws.
  double normal();

  std::string state() const;
  void set_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

/// Stateless 64-bit mixing function, used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

template <typename It>
void shuffle(It first, It last, Rng& rng) {
  auto n = static_cast<std::size_t>(last - first);
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = rng.index(i);
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace idmorph
