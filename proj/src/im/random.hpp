#pragma once

#include <cmath>
#include <cstdint>

#include "im/tensor.hpp"

namespace im {

// splitmix64 generator with hand-rolled distributions so that streams are
// reproducible independent of the standard library implementation.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
    return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
  }
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  Tensor tensor_normal(Shape s, double mean, double stddev, DType dt = DType::f32) {
    Tensor t = Tensor::zeros(s, dt);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, normal(mean, stddev));
    return t;
  }
  Tensor tensor_uniform(Shape s, double lo, double hi, DType dt = DType::f32) {
    Tensor t = Tensor::zeros(s, dt);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, uniform(lo, hi));
    return t;
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0;
};

}  // namespace im
