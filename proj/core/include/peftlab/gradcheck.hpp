#pragma once

#include <functional>

#include "peftlab/tensor.hpp"

namespace peftlab {

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences (f(x+eps*e_i) - f(x-eps*e_i)) / 2eps. Returns the largest
/// coordinate-wise relative error, with denominator
/// max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double eps);

}  // namespace peftlab
