#include "ecg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ecg/error.hpp"

namespace ecg::ad {

std::string GradcheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " max_rel_err=" << max_rel_error;
  for (const auto& e : entries) {
    if (e.max_rel_error == max_rel_error && max_rel_error > 0) {
      os << " worst=" << e.name << "[" << e.worst_index << "] analytic=" << e.worst_analytic
         << " numeric=" << e.worst_numeric;
      break;
    }
  }
  return os.str();
}

namespace {

double eval_scalar(const std::function<Tensor<double>()>& loss) {
  NoGradGuard guard;
  const Tensor<double> out = loss();
  if (out.numel() != 1) {
    throw ShapeError("gradcheck: function output has shape " + to_string(out.shape()) +
                     "; reduce it to a scalar (e.g. sum) first");
  }
  return out.item();
}

}  // namespace

GradcheckReport gradcheck(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> wrt,
                          const GradcheckOptions& options, std::vector<std::string> names) {
  for (auto& t : wrt) {
    if (!t.node()->is_leaf()) throw Error("gradcheck: can only differentiate with respect to leaf tensors");
    t.set_requires_grad(true);
    t.zero_grad();
  }
  const Tensor<double> out = loss();
  if (out.numel() != 1) {
    throw ShapeError("gradcheck: function output has shape " + to_string(out.shape()) +
                     "; reduce it to a scalar (e.g. sum) first");
  }
  if (graph_has_stochastic(out)) {
    throw Error("gradcheck: graph contains a stochastic op (dropout in train mode); freeze it (eval mode or p=0)");
  }
  out.backward();

  GradcheckReport report;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto& t = wrt[k];
    GradcheckEntry entry;
    entry.name = k < names.size() ? names[k] : "input" + std::to_string(k);
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    const std::size_t n = static_cast<std::size_t>(t.numel());
    const std::size_t probes = options.max_elements == 0 ? n : std::min(n, options.max_elements);
    auto data = t.mutable_data();
    for (std::size_t p = 0; p < probes; ++p) {
      const std::size_t i = probes == n ? p : (p * n) / probes + (n / probes) / 2;
      const double saved = data[i];
      data[i] = saved + options.step;
      const double up = eval_scalar(loss);
      data[i] = saved - options.step;
      const double down = eval_scalar(loss);
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.floor});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      if (entry.probed == 0 || rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
        entry.worst_analytic = analytic[i];
        entry.worst_numeric = numeric;
      }
      ++entry.probed;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(entry);
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

GradcheckReport gradcheck(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
                          const GradcheckOptions& options) {
  return gradcheck([&f, &x]() { return f(x); }, {x}, options, {"x"});
}

}  // namespace ecg::ad
