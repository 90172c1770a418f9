#pragma once

#include <cstddef>

#include "canet/tensor.hpp"

// Differentiable tensor ops. No implicit broadcasting: operands of binary ops
// must have equal shapes, and expand_rows/expand_cols make repetition explicit.
namespace canet::ops {

enum class ElementwiseKind { add, sub, mul, relu, tanh, sigmoid };

template <typename T>
Tensor<T> elementwise(Tape<T>& tape, ElementwiseKind kind, const Tensor<T>& a, const Tensor<T>& b = {});

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(tape, ElementwiseKind::add, a, b);
}
template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(tape, ElementwiseKind::sub, a, b);
}
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(tape, ElementwiseKind::mul, a, b);
}
template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& a) {
  return elementwise(tape, ElementwiseKind::relu, a);
}
template <typename T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& a) {
  return elementwise(tape, ElementwiseKind::tanh, a);
}
template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& a) {
  return elementwise(tape, ElementwiseKind::sigmoid, a);
}

// scale * a + shift, elementwise.
template <typename T>
Tensor<T> affine_scalar(Tape<T>& tape, const Tensor<T>& a, T scale, T shift);

// [m x k] . [k x n] -> [m x n]
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> concat(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, std::size_t axis);

template <typename T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length);

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape shape);

// [1 x n] -> [rows x n]
template <typename T>
Tensor<T> expand_rows(Tape<T>& tape, const Tensor<T>& a, std::size_t rows);

// [m x 1] -> [m x cols]
template <typename T>
Tensor<T> expand_cols(Tape<T>& tape, const Tensor<T>& a, std::size_t cols);

/// Softmax of a vector, or of each row of a matrix. Max-subtracted, so any
/// finite input is safe; NaN input throws NumericError.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a);

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a);

/// Row-wise angle arccos(a.b / |a||b|) between [N x 3] inputs, shape [N].
/// The cosine is clamped to [-1 + eps, 1 - eps] before arccos; eps = 0 turns
/// the clamp off. Zero-norm rows throw NumericError.
template <typename T>
Tensor<T> angular_distance_rows(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, T clamp_eps);

}  // namespace canet::ops
