#include "ecg/optim.hpp"

#include <cmath>

#include "ecg/error.hpp"

namespace ecg::learn {

void AdamConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("adam: lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("adam: betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("adam: eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("adam: weight_decay must be >= 0");
}

template <class T>
Adam<T>::Adam(std::vector<nn::NamedTensor<T>> params, AdamConfig config) : params_(std::move(params)), cfg_(config) {
  cfg_.validate();
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
  }
}

template <class T>
void Adam<T>::step() {
  for (const auto& p : params_) {
    for (T g : p.tensor.grad())
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("adam: non-finite gradient in parameter " + p.name);
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k].tensor;
    const auto grad = p.grad();
    auto value = p.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
      g += cfg_.weight_decay * static_cast<double>(value[i]);
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double update = cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      value[i] = static_cast<T>(static_cast<double>(value[i]) - update);
    }
  }
}

template <class T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template class Adam<float>;
template class Adam<double>;

}  // namespace ecg::learn
