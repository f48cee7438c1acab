#pragma once

#include <vector>

#include "tstcnn/tape.hpp"
#include "tstcnn/tensor.hpp"

/// Differentiable tensor arithmetic. Tensor-tensor forms require identical
/// shapes; the only broadcast is the scalar form.
namespace tstcnn::ops {

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// Element-wise (Hadamard) product.
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// Adds `s` to every component.
template <typename T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& a, T s);

template <typename T>
Tensor<T> mul_scalar(Tape<T>& tape, const Tensor<T>& a, T s);

/// Sums over `axes` and removes them; reducing every axis yields shape (1).
template <typename T>
Tensor<T> reduce_sum(Tape<T>& tape, const Tensor<T>& x, std::vector<std::size_t> axes);

template <typename T>
Tensor<T> reduce_mean(Tape<T>& tape, const Tensor<T>& x, std::vector<std::size_t> axes);

/// Sum of all elements, shape (1).
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);

/// Same values under a new shape with equal element count.
template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape);

/// Inner product of all elements with a constant weight tensor: sum(x * w).
/// Used to reduce an arbitrary output to a scalar for gradient checks.
template <typename T>
Tensor<T> weighted_sum(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w);

}  // namespace tstcnn::ops
