#pragma once

#include <cstdint>
#include <cmath>

namespace recguard {

// Deterministic 64-bit generator (splitmix64 core). We roll our own
// distributions because the std:: ones are implementation-defined and
// reruns must be byte-identical.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, n), unbiased via rejection
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  int index(int n) { return static_cast<int>(below(static_cast<std::uint64_t>(n))); }

  // uniform in [0, 1)
  double real() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi]
  int range(int lo, int hi) { return lo + index(hi - lo + 1); }

  // standard normal, Box-Muller (polar-free variant, deterministic)
  double normal() {
    double u1 = real();
    double u2 = real();
    while (u1 <= 1e-300) u1 = real();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  bool coin(double p) { return real() < p; }

 private:
  std::uint64_t state_;
};

// Independent stream for a (seed, tag) pair; used for per-item / per-user
// derived seeds so parallel work stays reproducible.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL + tag * 0xd1342543de82ef95ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace recguard
