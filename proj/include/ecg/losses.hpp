#pragma once

#include <vector>

#include "ecg/signal.hpp"
#include "ecg/tensor.hpp"

namespace ecg::learn {

using ad::Tensor;

struct FocalLossParams {
  double gamma = 2.0;
  double alpha = 0.7;
  void validate() const;
};

/// Mean over elements of -alpha_t (1 - p_t)^gamma log p_t with p = sigmoid(logit).
/// Evaluated through softplus so that large logits do not overflow.
template <class T>
Tensor<T> focal_loss(const Tensor<T>& logits, const Tensor<T>& targets, const FocalLossParams& params);

/// Mean over elements of w_c y softplus(-z) + (1 - y) softplus(z).
template <class T>
Tensor<T> weighted_bce(const Tensor<T>& logits, const Tensor<T>& targets, const std::vector<double>& class_weights);

/// n_total / n_positive per class, rescaled to mean 1. Throws DataError for a
/// class without positives.
std::vector<double> class_weights_from_labels(const std::vector<LabelVector>& labels);

/// Numerically stable log(1 + exp(x)).
double softplus(double x);
double sigmoid(double x);

}  // namespace ecg::learn
