#pragma once

#include "ddlm/common.hpp"

#include <random>
#include <vector>

namespace ddlm {

// Deterministic random source. std::mt19937_64 has a fully specified bit
// stream, and all derived draws below use fixed algorithms, so results are
// reproducible across platforms and standard libraries. std::* distributions
// are deliberately avoided; their outputs are implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : base_seed_(seed), eng_(splitmix64(seed)) {}

  uint64_t next_u64() { return eng_(); }

  /// Uniform on [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [lo, hi], inclusive. Rejection sampling keeps it unbiased.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    require(lo <= hi, "uniform_int: empty range");
    const uint64_t range = uint64_t(hi - lo) + 1;
    if (range == 0) return int64_t(next_u64());  // full 64-bit span
    const uint64_t limit = (~uint64_t(0) / range) * range;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return lo + int64_t(x % range);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Inverse-CDF draw over an explicit probability vector, scanned in index
  /// order so ties and rounding resolve deterministically.
  template <typename V>
  int categorical(const V& probs) {
    double u = uniform();
    double cum = 0.0;
    const int n = int(probs.size());
    for (int i = 0; i < n; ++i) {
      cum += double(probs[i]);
      if (u < cum) return i;
    }
    for (int i = n - 1; i >= 0; --i) {
      if (probs[i] > 0) return i;
    }
    return n - 1;
  }

  /// Fisher-Yates, fixed traversal order.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(uniform_int(0, int64_t(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Independent stream keyed off the constructor seed, not the evolved
  /// state, so child(k) is stable regardless of draw order.
  Rng child(uint64_t key) const { return Rng(hash_combine(base_seed_, key)); }

  uint64_t base_seed() const { return base_seed_; }

 private:
  uint64_t base_seed_;
  std::mt19937_64 eng_;
};

}  // namespace ddlm
