#pragma once

#include "owps/tensor.hpp"

namespace owps::ops {

enum class BinaryOp { Add, Sub, Mul, Div };
enum class UnaryOp { Relu, Sigmoid, Log, Square, Negate };

// Equal shapes only; there is no broadcasting.
Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(UnaryOp op, const Tensor& x);

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Div, a, b); }
inline Tensor relu(const Tensor& x) { return elementwise(UnaryOp::Relu, x); }
inline Tensor sigmoid(const Tensor& x) { return elementwise(UnaryOp::Sigmoid, x); }
inline Tensor log(const Tensor& x) { return elementwise(UnaryOp::Log, x); }
inline Tensor square(const Tensor& x) { return elementwise(UnaryOp::Square, x); }
inline Tensor negate(const Tensor& x) { return elementwise(UnaryOp::Negate, x); }

// x * s + c with constant s, c.
Tensor affine_scalar(const Tensor& x, Real scale, Real shift);
inline Tensor add_scalar(const Tensor& x, Real c) { return affine_scalar(x, 1.0f, c); }
inline Tensor mul_scalar(const Tensor& x, Real s) { return affine_scalar(x, s, 0.0f); }
// x^e for x > 0 (x == 0 allowed when e >= 1).
Tensor pow_scalar(const Tensor& x, Real exponent);
// Gradient passes only where lo < x < hi.
Tensor clamp(const Tensor& x, Real lo, Real hi);
// x scaled by a learnable one-element tensor.
Tensor scale(const Tensor& x, const Tensor& s);

Tensor reduce_sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& shape);

// NCHW cross-correlation. `bias` may be undefined. Kernel layout O x C x k x k.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int padding);
// Stride-2, 2x2 transposed convolution; kernel layout C_in x C_out x 2 x 2.
Tensor transposed_conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride = 2);
// 2x2 window, stride 2. Ties route the gradient to the first index in
// row-major order.
Tensor maxpool2d(const Tensor& x, int window = 2, int stride = 2);

// Channel concatenation of two NCHW tensors; an undefined `b` returns `a`.
Tensor concat_channels(const Tensor& a, const Tensor& b);

// Batched product over rank-3 tensors: out[n] = op(a[n]) * op(b[n]).
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);
// Softmax along the last axis.
Tensor softmax_lastdim(const Tensor& x);

// Fused dot-product attention over positions without materializing the
// L x L affinity: query/key are N x d x L, value is N x c x L, and
//   out[n, :, i] = sum_j softmax_j(query[n, :, i] . key[n, :, j]) value[n, :, j].
// Same result as matmul -> softmax_lastdim -> matmul, computed in row blocks.
Tensor fused_attention(const Tensor& query, const Tensor& key, const Tensor& value);

}  // namespace owps::ops
