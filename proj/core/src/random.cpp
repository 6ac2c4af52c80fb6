#include "peftlab/random.hpp"

namespace peftlab {

Tensor Rng::normal_tensor(Shape shape, double stddev, bool requires_grad) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = normal(0.0, stddev);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

Tensor Rng::uniform_tensor(Shape shape, double bound, bool requires_grad) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = uniform(-bound, bound);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace peftlab
