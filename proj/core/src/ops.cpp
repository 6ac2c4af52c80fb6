#include "peftlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <Eigen/Core>

namespace peftlab {
namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMajor>;
using CMatMap = Eigen::Map<const RowMajor>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

// Input i's grad buffer, or nullptr when it does not take gradients.
std::vector<double>* grad_of(Node& n, std::size_t i) {
    Node& in = *n.inputs[i];
    return in.requires_grad ? &in.grad_buffer() : nullptr;
}

const std::vector<double>& value_of(Node& n, std::size_t i) { return n.inputs[i]->value; }

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, std::string_view op, Fwd fwd, Bwd bwd) {
    std::vector<double> out(a.size());
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
    return make_result(a.shape(), std::move(out), {a},
                       [bwd](Node& n) {
                           auto* ga = grad_of(n, 0);
                           if (!ga) return;
                           const auto& x = value_of(n, 0);
                           for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += n.grad[i] * bwd(x[i], n.value[i]);
                       },
                       op);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    MatMap(out.data(), m, n).noalias() = CMatMap(a.data().data(), m, k) * CMatMap(b.data().data(), k, n);
    return make_result({m, n}, std::move(out), {a, b},
                       [m, k, n](Node& node) {
                           CMatMap G(node.grad.data(), m, n);
                           if (auto* ga = grad_of(node, 0)) {
                               MatMap(ga->data(), m, k).noalias() +=
                                   G * CMatMap(value_of(node, 1).data(), k, n).transpose();
                           }
                           if (auto* gb = grad_of(node, 1)) {
                               MatMap(gb->data(), k, n).noalias() +=
                                   CMatMap(value_of(node, 0).data(), m, k).transpose() * G;
                           }
                       },
                       "matmul");
}

Tensor transpose(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    auto x = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
    return make_result({n, m}, std::move(out), {a},
                       [m, n](Node& node) {
                           auto* ga = grad_of(node, 0);
                           if (!ga) return;
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += node.grad[j * m + i];
                       },
                       "transpose");
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [](Node& n) {
                           for (std::size_t k = 0; k < 2; ++k)
                               if (auto* g = grad_of(n, k))
                                   for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
                       },
                       "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [](Node& n) {
                           if (auto* g = grad_of(n, 0))
                               for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
                           if (auto* g = grad_of(n, 1))
                               for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= n.grad[i];
                       },
                       "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [](Node& n) {
                           const auto& x = value_of(n, 0);
                           const auto& y = value_of(n, 1);
                           if (auto* g = grad_of(n, 0))
                               for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * y[i];
                           if (auto* g = grad_of(n, 1))
                               for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * x[i];
                       },
                       "mul");
}

Tensor scale(const Tensor& a, double s) {
    return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) throw DimensionError("scale_by: factor must hold one value, got " + shape_str(s.shape()));
    const double f = s.item();
    std::vector<double> out(a.size());
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f * x[i];
    return make_result(a.shape(), std::move(out), {a, s},
                       [](Node& n) {
                           const auto& x = value_of(n, 0);
                           const double f = value_of(n, 1)[0];
                           if (auto* g = grad_of(n, 0))
                               for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * f;
                           if (auto* g = grad_of(n, 1)) {
                               double acc = 0.0;
                               for (std::size_t i = 0; i < x.size(); ++i) acc += n.grad[i] * x[i];
                               (*g)[0] += acc;
                           }
                       },
                       "scale_by");
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
    const std::size_t m = a.rows(), n = a.cols();
    if (bias.size() != n) {
        throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " does not match width of " +
                             shape_str(a.shape()));
    }
    std::vector<double> out(a.size());
    auto x = a.data();
    auto b = bias.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
    return make_result(a.shape(), std::move(out), {a, bias},
                       [m, n](Node& node) {
                           if (auto* g = grad_of(node, 0))
                               for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i];
                           if (auto* g = grad_of(node, 1))
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) (*g)[j] += node.grad[i * n + j];
                       },
                       "add_row");
}

Tensor mul_rows(const Tensor& a, const Tensor& w) {
    const std::size_t m = a.rows(), n = a.cols();
    if (w.size() != m) {
        throw DimensionError("mul_rows: weights " + shape_str(w.shape()) + " do not match rows of " +
                             shape_str(a.shape()));
    }
    std::vector<double> out(a.size());
    auto x = a.data();
    auto s = w.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * s[i];
    return make_result(a.shape(), std::move(out), {a, w},
                       [m, n](Node& node) {
                           const auto& x = value_of(node, 0);
                           const auto& s = value_of(node, 1);
                           if (auto* g = grad_of(node, 0))
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += node.grad[i * n + j] * s[i];
                           if (auto* g = grad_of(node, 1))
                               for (std::size_t i = 0; i < m; ++i) {
                                   double acc = 0.0;
                                   for (std::size_t j = 0; j < n; ++j) acc += node.grad[i * n + j] * x[i * n + j];
                                   (*g)[i] += acc;
                               }
                       },
                       "mul_rows");
}

Tensor relu(const Tensor& a) {
    // Subgradient at 0 is 0.
    return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
    return unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
    return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor softmax_rows(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(a.size());
    auto x = a.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.data() + i * n;
        double* y = out.data() + i * n;
        const double mx = *std::max_element(row, row + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < n; ++j) y[j] /= z;
    }
    return make_result(a.shape(), std::move(out), {a},
                       [m, n](Node& node) {
                           auto* g = grad_of(node, 0);
                           if (!g) return;
                           for (std::size_t i = 0; i < m; ++i) {
                               const double* y = node.value.data() + i * n;
                               const double* gy = node.grad.data() + i * n;
                               double dot = 0.0;
                               for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
                               for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += y[j] * (gy[j] - dot);
                           }
                       },
                       "softmax_rows");
}

namespace {
std::vector<double> row_logsumexp(std::span<const double> x, std::size_t m, std::size_t n) {
    std::vector<double> lse(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.data() + i * n;
        const double mx = *std::max_element(row, row + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
        lse[i] = mx + std::log(z);
    }
    return lse;
}
}  // namespace

Tensor log_softmax_rows(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    auto x = a.data();
    auto lse = row_logsumexp(x, m, n);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] - lse[i];
    return make_result(a.shape(), std::move(out), {a},
                       [m, n](Node& node) {
                           auto* g = grad_of(node, 0);
                           if (!g) return;
                           for (std::size_t i = 0; i < m; ++i) {
                               const double* y = node.value.data() + i * n;
                               const double* gy = node.grad.data() + i * n;
                               double total = 0.0;
                               for (std::size_t j = 0; j < n; ++j) total += gy[j];
                               for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += gy[j] - std::exp(y[j]) * total;
                           }
                       },
                       "log_softmax_rows");
}

Tensor logsumexp_rows(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    auto lse = row_logsumexp(a.data(), m, n);
    return make_result({m, 1}, std::move(lse), {a},
                       [m, n](Node& node) {
                           auto* g = grad_of(node, 0);
                           if (!g) return;
                           const auto& x = value_of(node, 0);
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                   (*g)[i * n + j] += node.grad[i] * std::exp(x[i * n + j] - node.value[i]);
                       },
                       "logsumexp_rows");
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t m = a.rows(), d = a.cols();
    if (gain.size() != d || bias.size() != d) {
        throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                             " do not match width of " + shape_str(a.shape()));
    }
    if (eps < 0.0) throw ContractError("layer_norm: eps must be non-negative");
    auto x = a.data();
    auto gm = gain.data();
    auto bt = bias.data();
    std::vector<double> out(a.size());
    // Saved per-row normalized values and inverse std for the backward rule.
    auto xhat = std::make_shared<std::vector<double>>(a.size());
    auto inv_std = std::make_shared<std::vector<double>>(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        const double denom = var + eps;
        const double is = denom > 0.0 ? 1.0 / std::sqrt(denom) : 0.0;
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (row[j] - mu) * is;
            (*xhat)[i * d + j] = h;
            out[i * d + j] = h * gm[j] + bt[j];
        }
    }
    return make_result(a.shape(), std::move(out), {a, gain, bias},
                       [m, d, xhat, inv_std](Node& node) {
                           const auto& gm = value_of(node, 1);
                           const auto& G = node.grad;
                           if (auto* ga = grad_of(node, 0)) {
                               const double dd = static_cast<double>(d);
                               for (std::size_t i = 0; i < m; ++i) {
                                   double s1 = 0.0, s2 = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const double dh = G[i * d + j] * gm[j];
                                       s1 += dh;
                                       s2 += dh * (*xhat)[i * d + j];
                                   }
                                   const double is = (*inv_std)[i];
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const double dh = G[i * d + j] * gm[j];
                                       (*ga)[i * d + j] += is / dd * (dd * dh - s1 - (*xhat)[i * d + j] * s2);
                                   }
                               }
                           }
                           if (auto* gg = grad_of(node, 1))
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < d; ++j) (*gg)[j] += G[i * d + j] * (*xhat)[i * d + j];
                           if (auto* gb = grad_of(node, 2))
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < d; ++j) (*gb)[j] += G[i * d + j];
                       },
                       "layer_norm");
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    const Tensor parts[] = {a, b};
    return concat_rows(parts);
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_rows: nothing to concatenate");
    const std::size_t width = parts.front().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != width) {
            throw DimensionError("concat_rows: width mismatch " + shape_str(parts.front().shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        rows += p.size() / std::max<std::size_t>(width, 1);
    }
    std::vector<double> out;
    out.reserve(rows * width);
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(out.size());
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return make_result({rows, width}, std::move(out), std::move(inputs),
                       [offsets](Node& node) {
                           for (std::size_t k = 0; k < node.inputs.size(); ++k)
                               if (auto* g = grad_of(node, k))
                                   for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[offsets[k] + i];
                       },
                       "concat_rows");
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_cols: nothing to concatenate");
    const std::size_t m = parts.front().rows();
    std::size_t width = 0;
    std::vector<std::size_t> offsets, widths;
    for (const auto& p : parts) {
        if (p.rows() != m) {
            throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        offsets.push_back(width);
        widths.push_back(p.cols());
        width += p.cols();
    }
    std::vector<double> out(m * width);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto x = parts[k].data();
        for (std::size_t i = 0; i < m; ++i)
            std::copy_n(x.data() + i * widths[k], widths[k], out.data() + i * width + offsets[k]);
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return make_result({m, width}, std::move(out), std::move(inputs),
                       [m, width, offsets, widths](Node& node) {
                           for (std::size_t k = 0; k < node.inputs.size(); ++k)
                               if (auto* g = grad_of(node, k))
                                   for (std::size_t i = 0; i < m; ++i)
                                       for (std::size_t j = 0; j < widths[k]; ++j)
                                           (*g)[i * widths[k] + j] += node.grad[i * width + offsets[k] + j];
                       },
                       "concat_cols");
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
    const std::size_t n = a.cols();
    if (begin + count > a.rows()) {
        throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                             ") outside " + shape_str(a.shape()));
    }
    auto x = a.data();
    std::vector<double> out(x.begin() + begin * n, x.begin() + (begin + count) * n);
    return make_result({count, n}, std::move(out), {a},
                       [begin, n](Node& node) {
                           if (auto* g = grad_of(node, 0))
                               for (std::size_t i = 0; i < node.grad.size(); ++i) (*g)[begin * n + i] += node.grad[i];
                       },
                       "slice_rows");
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
    const std::size_t m = a.rows(), n = a.cols();
    if (begin + count > n) {
        throw DimensionError("slice_cols: columns [" + std::to_string(begin) + ", " +
                             std::to_string(begin + count) + ") outside " + shape_str(a.shape()));
    }
    auto x = a.data();
    std::vector<double> out(m * count);
    for (std::size_t i = 0; i < m; ++i) std::copy_n(x.data() + i * n + begin, count, out.data() + i * count);
    return make_result({m, count}, std::move(out), {a},
                       [m, n, begin, count](Node& node) {
                           if (auto* g = grad_of(node, 0))
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < count; ++j)
                                       (*g)[i * n + begin + j] += node.grad[i * count + j];
                       },
                       "slice_cols");
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
    const std::size_t n = a.cols(), rows = a.rows();
    std::vector<double> out(index.size() * n);
    auto x = a.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= rows) {
            throw DimensionError("gather_rows: index " + std::to_string(index[i]) + " outside " +
                                 shape_str(a.shape()));
        }
        std::copy_n(x.data() + index[i] * n, n, out.data() + i * n);
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return make_result({index.size(), n}, std::move(out), {a},
                       [idx = std::move(idx), n](Node& node) {
                           auto* g = grad_of(node, 0);
                           if (!g) return;
                           for (std::size_t i = 0; i < idx.size(); ++i)
                               for (std::size_t j = 0; j < n; ++j) (*g)[idx[i] * n + j] += node.grad[i * n + j];
                       },
                       "gather_rows");
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_result({}, {s}, {a},
                       [](Node& node) {
                           if (auto* g = grad_of(node, 0))
                               for (auto& v : *g) v += node.grad[0];
                       },
                       "sum");
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ContractError("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor dropout(const Tensor& a, double rate, std::uint64_t seed) {
    if (rate <= 0.0) return a;
    if (rate >= 1.0) throw ContractError("dropout rate must be below 1");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(a.size());
    for (auto& v : mask) v = u(rng) >= rate ? keep_scale : 0.0;
    return mul(a, Tensor::from(a.shape(), std::move(mask)));
}

Tensor empty_rows(std::size_t width) { return Tensor::from({0, width}, {}); }

}  // namespace peftlab
