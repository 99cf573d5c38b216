#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>

namespace ebmcal {

// splitmix64 finaliser; used to derive independent child seeds.
std::uint64_t mix64(std::uint64_t x);

// Order-sensitive seed derivation: derive_seed(run, step) != derive_seed(step, run).
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts);

// FNV-1a, for deriving per-parameter init seeds from names.
std::uint64_t hash_name(std::string_view s);

// Deterministic random source. Distribution code is written out here rather
// than using <random> distributions, whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t uniform_index(std::size_t n);  // [0, n)
  bool bernoulli(double p) { return uniform() < p; }
  double normal();
  // Index drawn proportionally to nonnegative weights.
  std::size_t categorical(std::span<const double> weights);

 private:
  std::mt19937_64 engine_;
};

}  // namespace ebmcal
