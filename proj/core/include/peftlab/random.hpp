#pragma once

#include <cstdint>
#include <random>

#include "peftlab/tensor.hpp"

namespace peftlab {

/// Seeded generator used for every weight init and data draw.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
    std::uint64_t next() { return engine_(); }
    std::mt19937_64& engine() { return engine_; }

    Tensor normal_tensor(Shape shape, double stddev, bool requires_grad = false);
    Tensor uniform_tensor(Shape shape, double bound, bool requires_grad = false);

private:
    std::mt19937_64 engine_;
};

/// Stable 64-bit mix of two values (splitmix64 finalizer); used for
/// deriving child seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace peftlab
