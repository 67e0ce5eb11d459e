#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace sapt {

/// Mixes a 64-bit value (splitmix64 finalizer).
std::uint64_t mix64(std::uint64_t x);

/// FNV-1a over the bytes of `text`.
std::uint64_t hash_string(std::string_view text);

/// Derives an independent stream seed from a parent seed and a tag. All
/// per-stage, per-cell and per-utterance seeds flow through these two helpers.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index);

// Random stream with draws defined here rather than by <random> distributions,
// whose output is implementation-specific. Only the mt19937_64 engine is used.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  // k distinct indices from [0, n) in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sapt
