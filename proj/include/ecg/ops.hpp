#pragma once

#include <vector>

#include "ecg/rng.hpp"
#include "ecg/tensor.hpp"

// Differentiable primitives. Shape errors throw ecg::ShapeError naming the
// operation and the offending dimensions.

namespace ecg::ad {

// Elementwise arithmetic. `b` must have the same shape as `a`, or a shape equal
// to a trailing suffix of `a`'s shape (broadcast over the leading axes).
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// scale * x + shift
template <class T> Tensor<T> affine(const Tensor<T>& x, T scale, T shift);

template <class T> Tensor<T> relu(const Tensor<T>& x);
template <class T> Tensor<T> elu(const Tensor<T>& x, T alpha = T(1));
template <class T> Tensor<T> sigmoid(const Tensor<T>& x);
template <class T> Tensor<T> tanh(const Tensor<T>& x);
/// Softmax over the last axis.
template <class T> Tensor<T> softmax(const Tensor<T>& x);

/// Sum / mean of all elements, shape (1,).
template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> mean(const Tensor<T>& x);
/// Mean over one axis; the axis is removed.
template <class T> Tensor<T> mean_axis(const Tensor<T>& x, int axis);

/// a: (..., M, K). b: (K, N) shared, or (..., K, N) with the same leading dims.
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x: (..., in), weight: (out, in), bias: (out) or undefined.
template <class T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

struct Conv1dOptions {
  int stride = 1;
  int pad_begin = 0;
  int pad_end = 0;
  int groups = 1;

  static Conv1dOptions symmetric(int stride, int padding, int groups = 1) {
    return {stride, padding, padding, groups};
  }
  /// Output length equals ceil(length / stride); extra padding goes at the end.
  static Conv1dOptions same(int kernel, int groups = 1) {
    return {1, (kernel - 1) / 2, kernel / 2, groups};
  }
};

/// x: (B, C, L), weight: (O, C/groups, K), bias: (O) or undefined.
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv1dOptions opt);

struct Conv2dOptions {
  int stride_h = 1;
  int stride_w = 1;
  int pad_top = 0;
  int pad_bottom = 0;
  int pad_left = 0;
  int pad_right = 0;
  int groups = 1;
};

/// x: (B, C, H, W), weight: (O, C/groups, KH, KW). groups == C gives a
/// depthwise convolution.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt);

/// Running statistics owned by a batch-norm layer.
template <class T>
struct BatchNormStats {
  std::vector<T> mean;
  std::vector<T> var;
  std::int64_t batches_tracked = 0;
};

/// Normalizes over every axis except axis 1 (channels): works for (B, C, L)
/// and (B, C, H, W). Train mode uses batch statistics and updates `stats`
/// (if given); eval mode requires `stats` with one entry per channel.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>* stats, bool training, T momentum = T(0.1), T eps = T(1e-5));

/// Normalizes over the last axis.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

/// x: (B, C, L). Padding positions never win the max.
template <class T> Tensor<T> max_pool1d(const Tensor<T>& x, int kernel, int stride, int padding = 0);
/// x: (B, C, L). Padding positions count as zeros in the average.
template <class T> Tensor<T> avg_pool1d(const Tensor<T>& x, int kernel, int stride, int padding = 0);
/// Mean over every axis after the channel axis: (B, C, ...) -> (B, C).
template <class T> Tensor<T> global_avg_pool(const Tensor<T>& x);

/// Inverted dropout. Identity when !training or p == 0.
template <class T> Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng);

template <class T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <class T> Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length);
template <class T> Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1);
/// One dimension may be -1 (inferred).
template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

}  // namespace ecg::ad
