#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace patchflow {

// Deterministic RNG used everywhere randomness is needed. mt19937_64 plus
// hand-rolled distributions so that streams are identical across platforms
// (std::normal_distribution et al. are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0,1)
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // {0, 1, ..., n-1}
  int uniform_int(int n) {
    if (n <= 1) return 0;
    int v = static_cast<int>(uniform01() * n);
    return v < n ? v : n - 1;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    // Box-Muller; u1 in (0,1]
    double u1 = 1.0 - uniform01();
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives independent child seeds from one root seed (splitmix64 step).
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t salt) {
  std::uint64_t z = root + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace patchflow
