#pragma once

#include <cstdint>
#include <random>

namespace t2r {

// Seeded generator used everywhere randomness enters (init, batches, dropout).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double Normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double Uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  // Uniform integer in [0, n).
  int UniformInt(int n) { return std::uniform_int_distribution<int>(0, n - 1)(engine_); }
  std::uint64_t NextSeed() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace t2r
