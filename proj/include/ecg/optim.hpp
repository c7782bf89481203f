#pragma once

#include <cstdint>
#include <vector>

#include "ecg/nn.hpp"

namespace ecg::learn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// L2 penalty folded into the gradient before the moment updates.
  double weight_decay = 0.0;
  void validate() const;
};

/// Adam with bias correction. Moments are kept in double precision; the
/// update is applied to the parameter values in place.
template <class T>
class Adam {
 public:
  Adam(std::vector<nn::NamedTensor<T>> params, AdamConfig config);

  /// Throws NumericError naming the first parameter with a non-finite
  /// gradient; no parameter is modified in that case.
  void step();
  void zero_grad();
  std::int64_t steps() const { return t_; }
  const std::vector<nn::NamedTensor<T>>& params() const { return params_; }

 private:
  std::vector<nn::NamedTensor<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace ecg::learn
