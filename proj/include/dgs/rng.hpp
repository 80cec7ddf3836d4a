#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace dgs {

// Deterministic RNG: mt19937_64 core with hand-rolled distributions so that
// streams are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next() { return gen_(); }

  double uniform01() {
    // 53 random bits -> [0,1)
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  float uniform(float lo, float hi) {
    return lo + static_cast<float>(uniform01()) * (hi - lo);
  }

  float normal(float mean = 0.0f, float stddev = 1.0f) {
    // Box-Muller, no spare caching.
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 1e-300) u1 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + stddev * static_cast<float>(r);
  }

  // Uniform integer in [lo, hi] via rejection-free modulo (bias negligible for
  // our range sizes, and fully deterministic).
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(gen_() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates.
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(gen_() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace dgs
