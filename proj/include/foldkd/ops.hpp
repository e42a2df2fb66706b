#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "foldkd/tensor.hpp"

// Differentiable operations. Every function validates shapes and throws
// DimensionError naming the offending shapes.
namespace foldkd::ad {

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x[..., n] + bias[n], broadcast over leading dims.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);

Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
// tanh approximation used by GPT-2 style MLPs.
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
// Throws NumericError on non-positive input.
Tensor log(const Tensor& x);
// Gradient is zero where the input was clipped.
Tensor clamp(const Tensor& x, double lo, double hi);
// log(1 - tanh(x)^2), evaluated stably for large |x|.
Tensor log1m_tanh_sq(const Tensor& x);

// Normalizes over the last dimension; gamma and beta have that length.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Rows of a [r x c] matrix selected by index (embedding lookup).
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
// Stacks [r_i x c] matrices vertically.
Tensor concat_rows(const std::vector<Tensor>& parts);
// Joins [r x c_i] matrices side by side.
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& x, Shape shape);
// 2-D transpose.
Tensor transpose(const Tensor& x);

// x [N,C,H,W], weight [O,C,KH,KW], bias [O] -> [N,O,Ho,Wo]
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t pad);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Max-subtracted softmax along `axis`. Throws NumericError on NaN input.
Tensor softmax(const Tensor& x, std::size_t axis);

// Fused multi-head causal self-attention over a packed projection.
//   qkv:       [batch*seq x 3*d], columns are q | k | v, heads split d evenly
//   key_valid: per-token flag (batch*seq) or empty for all valid
// Query i attends to keys j <= i that are valid; a query with no admissible
// key attends only to itself. Returns [batch*seq x d]. When `probs` is
// non-null it receives the attention weights laid out [batch][head][i][j].
Tensor causal_attention(const Tensor& qkv, std::size_t batch, std::size_t seq,
                        std::size_t heads,
                        std::span<const std::uint8_t> key_valid = {},
                        std::vector<double>* probs = nullptr);

// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

}  // namespace foldkd::ad
