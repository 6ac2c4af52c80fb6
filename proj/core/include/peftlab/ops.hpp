#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "peftlab/tensor.hpp"

namespace peftlab {

// Matrix algebra. Rank-0/1 operands are treated as a single row.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double c);
/// a * s where s is a one-element tensor (e.g. a trainable scaling factor).
Tensor scale_by(const Tensor& a, const Tensor& s);

/// a[m x n] + bias[n] broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& bias);
/// a[m x n] scaled row-wise by w (m values, any shape holding m entries).
Tensor mul_rows(const Tensor& a, const Tensor& w);

Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);

Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
/// [m x n] -> [m x 1]
Tensor logsumexp_rows(const Tensor& a);

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps);

Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
/// Rows of a picked by index; repeated indices accumulate on the way back.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);

/// Sum of all entries, rank-0 result.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Inverted dropout with keep mask drawn from `seed`; identity when rate is 0.
Tensor dropout(const Tensor& a, double rate, std::uint64_t seed);

/// Empty tensor with zero rows and `width` columns (concat identity).
Tensor empty_rows(std::size_t width);

}  // namespace peftlab
