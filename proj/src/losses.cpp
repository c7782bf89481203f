#include "ecg/losses.hpp"

#include <cmath>
#include <string>

#include "ecg/error.hpp"

namespace ecg::learn {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void FocalLossParams::validate() const {
  if (!(gamma >= 0.0)) throw ConfigError("focal loss: gamma must be >= 0");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("focal loss: alpha must be in (0, 1)");
}

namespace {

template <class T>
void check_targets(const char* op, const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape())
    throw ShapeError(std::string(op) + ": logits " + ad::to_string(logits.shape()) + " and targets " +
                     ad::to_string(targets.shape()) + " differ");
  for (T y : targets.data())
    if (y != T(0) && y != T(1)) throw DataError(std::string(op) + ": targets must be 0 or 1");
}

}  // namespace

template <class T>
Tensor<T> focal_loss(const Tensor<T>& logits, const Tensor<T>& targets, const FocalLossParams& params) {
  params.validate();
  check_targets("focal_loss", logits, targets);
  const auto z = logits.data();
  const auto y = targets.data();
  const std::size_t n = z.size();
  const double gamma = params.gamma;
  // With s = z for positives and -z for negatives: p_t = sigmoid(s),
  // q = 1 - p_t = sigmoid(-s), loss = alpha_t q^gamma softplus(-s).
  std::vector<double> dlds(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = y[i] == T(1);
    const double s = pos ? double(z[i]) : -double(z[i]);
    const double a = pos ? params.alpha : 1.0 - params.alpha;
    const double q = sigmoid(-s);
    const double sp = softplus(-s);
    const double qg = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
    total += a * qg * sp;
    dlds[i] = -a * qg * (gamma * (1.0 - q) * sp + q);
    if (!pos) dlds[i] = -dlds[i];
  }
  const double inv = 1.0 / static_cast<double>(n);
  return ad::make_result<T>("focal_loss", {1}, {static_cast<T>(total * inv)}, {logits, targets},
                            [dlds = std::move(dlds), inv](ad::Node<T>& self) {
                              auto& in = *self.inputs[0];
                              if (in.grad.empty()) return;
                              const double g = double(self.grad[0]) * inv;
                              for (std::size_t i = 0; i < dlds.size(); ++i) in.grad[i] += static_cast<T>(g * dlds[i]);
                            });
}

template <class T>
Tensor<T> weighted_bce(const Tensor<T>& logits, const Tensor<T>& targets, const std::vector<double>& class_weights) {
  check_targets("weighted_bce", logits, targets);
  const auto k = static_cast<std::size_t>(logits.dim(-1));
  if (class_weights.size() != k)
    throw ShapeError("weighted_bce: " + std::to_string(class_weights.size()) + " class weights for " +
                     std::to_string(k) + " outputs");
  for (double w : class_weights)
    if (!(w > 0.0)) throw ConfigError("weighted_bce: class weights must be positive");
  const auto z = logits.data();
  const auto y = targets.data();
  const std::size_t n = z.size();
  std::vector<double> dldz(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = class_weights[i % k];
    const double zi = z[i];
    if (y[i] == T(1)) {
      total += w * softplus(-zi);
      dldz[i] = w * (sigmoid(zi) - 1.0);
    } else {
      total += softplus(zi);
      dldz[i] = sigmoid(zi);
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  return ad::make_result<T>("weighted_bce", {1}, {static_cast<T>(total * inv)}, {logits, targets},
                            [dldz = std::move(dldz), inv](ad::Node<T>& self) {
                              auto& in = *self.inputs[0];
                              if (in.grad.empty()) return;
                              const double g = double(self.grad[0]) * inv;
                              for (std::size_t i = 0; i < dldz.size(); ++i) in.grad[i] += static_cast<T>(g * dldz[i]);
                            });
}

std::vector<double> class_weights_from_labels(const std::vector<LabelVector>& labels) {
  if (labels.empty()) throw DataError("class weights: no labels");
  const std::size_t k = labels.front().size();
  std::vector<double> pos(k, 0.0);
  for (const auto& l : labels) {
    if (l.size() != k) throw DataError("class weights: label vectors differ in length");
    for (std::size_t c = 0; c < k; ++c) pos[c] += l[c];
  }
  std::vector<double> w(k);
  double sum = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    if (pos[c] == 0.0) throw DataError("class weights: class " + std::to_string(c) + " has no positive examples");
    w[c] = static_cast<double>(labels.size()) / pos[c];
    sum += w[c];
  }
  for (auto& v : w) v *= static_cast<double>(k) / sum;
  return w;
}

template Tensor<float> focal_loss(const Tensor<float>&, const Tensor<float>&, const FocalLossParams&);
template Tensor<double> focal_loss(const Tensor<double>&, const Tensor<double>&, const FocalLossParams&);
template Tensor<float> weighted_bce(const Tensor<float>&, const Tensor<float>&, const std::vector<double>&);
template Tensor<double> weighted_bce(const Tensor<double>&, const Tensor<double>&, const std::vector<double>&);

}  // namespace ecg::learn
