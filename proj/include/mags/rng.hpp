#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace mags {

// Random stream with a fully specified output sequence. The engine is
// std::mt19937_64 (its sequence is fixed by the standard); every derived
// quantity (uniform doubles, bounded integers, normals, permutations) is
// computed here rather than through <random> distributions, whose algorithms
// are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();

  // Uniform integer in [0, bound) by rejection; bound must be > 0.
  std::size_t below(std::size_t bound);

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; consumes exactly two uniforms.
  double normal();

  // Fisher-Yates from the last position down to 1.
  template <typename T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(values[i - 1], values[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes);

// Stream splitting: seed(master, name) = splitmix64(master ^ fnv1a(name)).
// Named streams used by the harness: "init", "data", "dropout", "fault",
// "select". Child names compose with '/', e.g. "fault/communication/0.3".
std::uint64_t derive_seed(std::uint64_t master, std::string_view name);
inline Rng derive_stream(std::uint64_t master, std::string_view name) {
  return Rng(derive_seed(master, name));
}

// Identity permutation of [0, n) shuffled by rng.
std::vector<std::size_t> permutation(std::size_t n, Rng& rng);

}  // namespace mags
