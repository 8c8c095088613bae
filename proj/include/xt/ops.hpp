#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "xt/tensor.hpp"

namespace xt {

// Identity forward, zero backward.
Tensor stop_gradient(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
// Reorders axes; out.shape[i] = x.shape[axes[i]].
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
// Swaps the last two axes.
Tensor transpose(const Tensor& x);

// Binary elementwise ops. `b` must match `a` exactly or equal a trailing
// suffix of a's shape (leading-axis batch broadcast). Nothing else broadcasts.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor square(const Tensor& x);

/// a: [..., n, k]. b: [k, m] (shared across leading axes) or [..., k, m] with
/// the same leading axes as a. With transpose_b, b is [m, k] / [..., m, k].
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Max-subtracted softmax. Throws InvalidNumerics on NaN input.
Tensor softmax(const Tensor& x, std::ptrdiff_t axis = -1);

// Normalizes over the last axis; gamma/beta have the last-axis extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Mean over one axis (the axis is removed).
Tensor mean(const Tensor& x, std::ptrdiff_t axis);
// Mean over axis 1 of [B, T, D] restricted to tokens with keep[t] != 0.
Tensor masked_mean_tokens(const Tensor& x, std::span<const std::uint8_t> keep);
// Sum of all elements (rank-0 result).
Tensor sum(const Tensor& x);

Tensor concat(const std::vector<Tensor>& xs, std::ptrdiff_t axis);
Tensor slice(const Tensor& x, std::ptrdiff_t axis, std::size_t begin, std::size_t end);

/// Views x as rows of `row_width` scalars and builds out_shape from the listed
/// rows; index -1 produces a zero row. Backward scatter-adds.
Tensor gather_rows(const Tensor& x, std::size_t row_width,
                   std::shared_ptr<const std::vector<std::ptrdiff_t>> rows, Shape out_shape);
/// Elementwise gather with the same -1 convention.
Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<std::ptrdiff_t>> index,
              Shape out_shape);

// Mean softmax cross-entropy over the batch. logits: [B, K].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Exact multi-head softmax attention. q: [B, Tq, H*dh], k, v: [B, Tk, H*dh]
/// (rank-2 inputs are treated as B = 1). Heads split the last axis.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 double scale);

// Throws InvalidNumerics if any value is NaN or infinite.
void require_finite(const Tensor& x, const char* what);

}  // namespace xt
