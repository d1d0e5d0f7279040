#pragma once

// Differentiable primitives. Every function is instantiated for float and
// double; double is what the finite-difference checks run against.
//
// Shapes are checked eagerly and mismatches throw std::invalid_argument with
// both shapes in the message. There is no implicit broadcasting.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mococxr/diffcore/tensor.hpp"

namespace mococxr::diffcore {

template <class T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
template <class T> BasicTensor<T> relu(const BasicTensor<T>& a);
template <class T> BasicTensor<T> sigmoid(const BasicTensor<T>& a);

template <class T> BasicTensor<T> sum(const BasicTensor<T>& a);
template <class T> BasicTensor<T> mean(const BasicTensor<T>& a);

template <class T> BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);

// [M x K] * [K x N]
template <class T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
// [M x K] * [N x K]^T
template <class T> BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);
// x [N x In], weight [Out x In], bias [Out] (may be undefined) -> [N x Out]
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias);

// Row-wise inner products of two [N x D] matrices -> [N x 1].
template <class T> BasicTensor<T> row_dot(const BasicTensor<T>& a, const BasicTensor<T>& b);
// [N x A] ++ [N x B] -> [N x (A + B)]
template <class T> BasicTensor<T> concat_cols(const BasicTensor<T>& a, const BasicTensor<T>& b);
// Divides each row of [N x D] by max(||row||, eps).
template <class T> BasicTensor<T> l2_normalize_rows(const BasicTensor<T>& a, T eps = T(1e-12));

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// x [N x C x H x W], weight [O x C x K x K], bias [O] or undefined.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      Conv2dOptions options);

// Per-sample normalization over channel groups; never mixes batch rows.
template <class T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          std::size_t groups, T eps = T(1e-5));

// [N x C x H x W] -> [N x C]
template <class T> BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

// Mean softmax cross-entropy of logits [N x C] against class indices.
template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const std::vector<std::size_t>& targets);

// Mean binary cross-entropy of sigmoid(logits) against {0,1} labels;
// logits have N elements in any shape.
template <class T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, const std::vector<std::uint8_t>& labels);

}  // namespace mococxr::diffcore
