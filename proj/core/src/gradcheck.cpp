#include "peftlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace peftlab {

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double eps) {
    if (!(eps >= 1e-6 && eps <= 1e-3)) throw ContractError("finite_diff_check: eps must lie in [1e-6, 1e-3]");

    Tensor x = point.clone(true);
    Tensor out = f(x);
    if (out.size() != 1) throw ContractError("finite_diff_check: f must return a scalar");
    out.backward();
    const auto analytic = x.grad();

    std::vector<double> base(point.data().begin(), point.data().end());
    double worst = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        auto probe = [&](double delta) {
            auto v = base;
            v[i] += delta;
            return f(Tensor::from(point.shape(), std::move(v))).item();
        };
        const double numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace peftlab
