#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace mvi2p {

/// splitmix64 finalizer folded over the parts; stable across platforms.
std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts);

/// Portable random stream. mt19937_64 output is fixed by the standard; the
/// distribution mappings are written out here because std's are not.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t index(std::size_t n);  // [0, n)
  int integer(int lo, int hi);       // [lo, hi]
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

 private:
  std::mt19937_64 engine_;
};

}  // namespace mvi2p
