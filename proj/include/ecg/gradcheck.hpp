#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ecg/tensor.hpp"

namespace ecg::ad {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor for the relative error, so that gradients which are
  /// zero up to rounding are compared absolutely (|a - n| < tolerance * floor).
  /// Finite-difference cancellation noise is about eps * |loss| / step.
  double floor = 1e-4;
  /// Elements probed per tensor; 0 probes all. Probed positions are spread
  /// evenly across the tensor.
  std::size_t max_elements = 0;
};

struct GradcheckEntry {
  std::string name;
  std::size_t probed = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = false;

  std::string summary() const;
};

/// Compares reverse-mode gradients of the scalar `loss()` with respect to the
/// leaf tensors `wrt` against central finite differences. The leaves are
/// perturbed in place and restored. `loss` must be deterministic: a graph
/// containing a stochastic node (train-mode dropout) is rejected.
GradcheckReport gradcheck(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> wrt,
                          const GradcheckOptions& options = {}, std::vector<std::string> names = {});

/// Convenience form: f(x) must return a scalar.
GradcheckReport gradcheck(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
                          const GradcheckOptions& options = {});

}  // namespace ecg::ad
