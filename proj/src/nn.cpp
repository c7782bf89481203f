#include "ecg/nn.hpp"

#include <cmath>

#include "ecg/error.hpp"

namespace ecg::nn {

namespace {
std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}
}  // namespace

// ------------------------------------------------------------------ Module

template <class T>
std::vector<NamedTensor<T>> Module<T>::named_parameters(const std::string& prefix) const {
  std::vector<NamedTensor<T>> out;
  for (const auto& p : params_) out.push_back({join(prefix, p.name), p.tensor});
  for (const auto& [name, child] : children_) {
    auto sub = child->named_parameters(join(prefix, name));
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

template <class T>
std::vector<NamedBuffer<T>> Module<T>::named_buffers(const std::string& prefix) {
  std::vector<NamedBuffer<T>> out;
  for (auto& b : buffers_) out.push_back({join(prefix, b.name), b.values});
  for (auto& [name, child] : children_) {
    auto sub = child->named_buffers(join(prefix, name));
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

template <class T>
void Module<T>::initialize(std::uint64_t seed, const std::string& prefix) {
  const Rng root(seed);
  for (auto& p : params_) {
    Rng rng = root.substream(join(prefix, p.name));
    auto data = p.tensor.mutable_data();
    switch (p.init) {
      case Init::Zeros:
        std::fill(data.begin(), data.end(), T(0));
        break;
      case Init::Ones:
        std::fill(data.begin(), data.end(), T(1));
        break;
      case Init::HeUniform: {
        const double bound = std::sqrt(6.0 / p.fan_in);
        for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
      case Init::XavierUniform: {
        const double bound = std::sqrt(6.0 / (p.fan_in + p.fan_out));
        for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
      case Init::Normal002:
        for (auto& v : data) v = static_cast<T>(0.02 * rng.normal());
        break;
    }
    p.tensor.zero_grad();
  }
  for (auto& b : buffers_) std::fill(b.values->begin(), b.values->end(), b.reset_value);
  for (auto& [name, child] : children_) child->initialize(seed, join(prefix, name));
}

template <class T>
void Module<T>::train(bool on) {
  training_ = on;
  for (auto& [name, child] : children_) child->train(on);
}

template <class T>
void Module<T>::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& [name, child] : children_) child->set_frozen(frozen);
}

template <class T>
void Module<T>::attach_rng(Rng* rng) {
  rng_ = rng;
  for (auto& [name, child] : children_) child->attach_rng(rng);
}

template <class T>
Tensor<T> Module<T>::add_parameter(std::string name, Shape shape, Init init, int fan_in, int fan_out) {
  auto t = Tensor<T>::zeros(shape, true);
  params_.push_back({std::move(name), t, init, fan_in, fan_out});
  return t;
}

template <class T>
void Module<T>::add_buffer(std::string name, std::vector<T>* values, T reset_value) {
  buffers_.push_back({std::move(name), values, reset_value});
}

// ------------------------------------------------------------------ layers

template <class T>
Linear<T>::Linear(int in_features, int out_features, bool bias, Init init) : in_(in_features), out_(out_features) {
  if (in_features <= 0 || out_features <= 0) throw ShapeError("linear: feature counts must be positive");
  weight_ = this->add_parameter("weight", {out_features, in_features}, init, in_features, out_features);
  if (bias) bias_ = this->add_parameter("bias", {out_features}, Init::Zeros);
}

template <class T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  return ad::linear(x, weight_, bias_);
}

template <class T>
Conv1d<T>::Conv1d(int in_channels, int out_channels, int kernel, ad::Conv1dOptions options, bool bias, Init init)
    : options_(options) {
  if (options.groups <= 0 || in_channels % options.groups != 0 || out_channels % options.groups != 0)
    throw ShapeError("conv1d: channels not divisible by groups");
  const int fan_in = in_channels / options.groups * kernel;
  weight_ = this->add_parameter("weight", {out_channels, in_channels / options.groups, kernel}, init, fan_in,
                                out_channels / options.groups * kernel);
  if (bias) bias_ = this->add_parameter("bias", {out_channels}, Init::Zeros);
}

template <class T>
Tensor<T> Conv1d<T>::forward(const Tensor<T>& x) const {
  return ad::conv1d(x, weight_, bias_, options_);
}

template <class T>
Conv2d<T>::Conv2d(int in_channels, int out_channels, int kernel_h, int kernel_w, ad::Conv2dOptions options, bool bias,
                  Init init)
    : options_(options) {
  if (options.groups <= 0 || in_channels % options.groups != 0 || out_channels % options.groups != 0)
    throw ShapeError("conv2d: channels not divisible by groups");
  const int fan_in = in_channels / options.groups * kernel_h * kernel_w;
  weight_ = this->add_parameter("weight", {out_channels, in_channels / options.groups, kernel_h, kernel_w}, init,
                                fan_in, out_channels / options.groups * kernel_h * kernel_w);
  if (bias) bias_ = this->add_parameter("bias", {out_channels}, Init::Zeros);
}

template <class T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  return ad::conv2d(x, weight_, bias_, options_);
}

template <class T>
BatchNorm<T>::BatchNorm(int channels, T momentum, T eps) : momentum_(momentum), eps_(eps) {
  weight_ = this->add_parameter("weight", {channels}, Init::Ones);
  bias_ = this->add_parameter("bias", {channels}, Init::Zeros);
  stats_.mean.assign(static_cast<std::size_t>(channels), T(0));
  stats_.var.assign(static_cast<std::size_t>(channels), T(1));
  this->add_buffer("running_mean", &stats_.mean, T(0));
  this->add_buffer("running_var", &stats_.var, T(1));
}

template <class T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x) {
  return ad::batch_norm(x, weight_, bias_, &stats_, this->is_training(), momentum_, eps_);
}

template <class T>
LayerNorm<T>::LayerNorm(int features, T eps) : eps_(eps) {
  weight_ = this->add_parameter("weight", {features}, Init::Ones);
  bias_ = this->add_parameter("bias", {features}, Init::Zeros);
}

template <class T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x) const {
  return ad::layer_norm(x, weight_, bias_, eps_);
}

template <class T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x) const {
  if (!this->is_training() || p_ == 0.0) return x;
  if (this->rng() == nullptr) throw Error("dropout: no random source attached in train mode");
  return ad::dropout(x, p_, true, *this->rng());
}

// --------------------------------------------------------------- recurrent

namespace {

template <class T>
void check_cell(const char* op, const Tensor<T>& x, const Tensor<T>& h, const RecurrentWeights<T>& w, int gates) {
  const auto hidden = w.w_hh.dim(1);
  if (w.w_ih.dim(0) != gates * hidden || w.w_hh.dim(0) != gates * hidden)
    throw ShapeError(std::string(op) + ": weights " + ad::to_string(w.w_ih.shape()) + " / " + ad::to_string(w.w_hh.shape()) +
                     " inconsistent with hidden size " + std::to_string(hidden));
  if (x.rank() != 2 || x.dim(1) != w.w_ih.dim(1))
    throw ShapeError(std::string(op) + ": input " + ad::to_string(x.shape()) + " does not match input size " +
                     std::to_string(w.w_ih.dim(1)));
  if (h.rank() != 2 || h.dim(1) != hidden || h.dim(0) != x.dim(0))
    throw ShapeError(std::string(op) + ": state " + ad::to_string(h.shape()) + " does not match (" +
                     std::to_string(x.dim(0)) + "," + std::to_string(hidden) + ")");
}

// One step given the precomputed input projection gi = W_ih x + b_ih.
template <class T>
Tensor<T> gru_step(const Tensor<T>& gi, const Tensor<T>& h, const RecurrentWeights<T>& w) {
  const std::int64_t hs = h.dim(1);
  const auto gh = ad::linear(h, w.w_hh, w.b_hh);
  const auto r = ad::sigmoid(ad::add(ad::slice(gi, 1, 0, hs), ad::slice(gh, 1, 0, hs)));
  const auto z = ad::sigmoid(ad::add(ad::slice(gi, 1, hs, hs), ad::slice(gh, 1, hs, hs)));
  const auto n = ad::tanh(ad::add(ad::slice(gi, 1, 2 * hs, hs), ad::mul(r, ad::slice(gh, 1, 2 * hs, hs))));
  return ad::add(n, ad::mul(z, ad::sub(h, n)));
}

template <class T>
LstmState<T> lstm_step(const Tensor<T>& gi, const LstmState<T>& s, const RecurrentWeights<T>& w) {
  const std::int64_t hs = s.h.dim(1);
  const auto gates = ad::add(gi, ad::linear(s.h, w.w_hh, w.b_hh));
  const auto i = ad::sigmoid(ad::slice(gates, 1, 0, hs));
  const auto f = ad::sigmoid(ad::slice(gates, 1, hs, hs));
  const auto g = ad::tanh(ad::slice(gates, 1, 2 * hs, hs));
  const auto o = ad::sigmoid(ad::slice(gates, 1, 3 * hs, hs));
  const auto c = ad::add(ad::mul(f, s.c), ad::mul(i, g));
  return {ad::mul(o, ad::tanh(c)), c};
}

}  // namespace

template <class T>
Tensor<T> gru_cell(const Tensor<T>& x, const Tensor<T>& h, const RecurrentWeights<T>& w) {
  check_cell("gru_cell", x, h, w, 3);
  return gru_step(ad::linear(x, w.w_ih, w.b_ih), h, w);
}

template <class T>
LstmState<T> lstm_cell(const Tensor<T>& x, const LstmState<T>& state, const RecurrentWeights<T>& w) {
  check_cell("lstm_cell", x, state.h, w, 4);
  if (state.c.shape() != state.h.shape()) throw ShapeError("lstm_cell: cell state shape differs from hidden state");
  return lstm_step(ad::linear(x, w.w_ih, w.b_ih), state, w);
}

template <class T>
SequenceOutput<T> recurrent_sequence(CellKind kind, const Tensor<T>& x, const std::vector<RecurrentWeights<T>>& layers) {
  if (x.rank() != 3) throw ShapeError("recurrent_sequence: input must be (B, T, I), got " + ad::to_string(x.shape()));
  if (layers.empty()) throw ShapeError("recurrent_sequence: no layers");
  const int gates = kind == CellKind::Gru ? 3 : 4;
  const std::int64_t batch = x.dim(0);
  const std::int64_t steps = x.dim(1);
  SequenceOutput<T> result;
  Tensor<T> input = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& w = layers[l];
    const std::int64_t hidden = w.w_hh.dim(1);
    if (w.w_ih.dim(1) != input.dim(2)) {
      throw ShapeError("recurrent_sequence: layer " + std::to_string(l) + " expects input size " +
                       std::to_string(w.w_ih.dim(1)) + " but receives " + std::to_string(input.dim(2)) +
                       (l > 0 ? " (hidden size of the previous layer)" : ""));
    }
    if (w.w_ih.dim(0) != gates * hidden || w.w_hh.dim(0) != gates * hidden)
      throw ShapeError("recurrent_sequence: layer " + std::to_string(l) + " gate rows inconsistent with hidden size");
    // Input projections for every step at once: (B, T, G*H).
    const auto projected = ad::linear(input, w.w_ih, w.b_ih);
    Tensor<T> h = Tensor<T>::zeros({batch, hidden});
    Tensor<T> c = Tensor<T>::zeros({batch, hidden});
    std::vector<Tensor<T>> outs;
    outs.reserve(static_cast<std::size_t>(steps));
    for (std::int64_t t = 0; t < steps; ++t) {
      const auto gi = ad::reshape(ad::slice(projected, 1, t, 1), {batch, gates * hidden});
      if (kind == CellKind::Gru) {
        h = gru_step(gi, h, w);
      } else {
        auto s = lstm_step(gi, LstmState<T>{h, c}, w);
        h = s.h;
        c = s.c;
      }
      outs.push_back(ad::reshape(h, {batch, 1, hidden}));
    }
    input = ad::concat(outs, 1);
    result.final_h.push_back(h);
    if (kind == CellKind::Lstm) result.final_c.push_back(c);
  }
  result.outputs = input;
  return result;
}

template <class T>
Recurrent<T>::Recurrent(CellKind kind, int input_size, int hidden_size, int num_layers)
    : kind_(kind), hidden_(hidden_size) {
  if (num_layers <= 0 || hidden_size <= 0 || input_size <= 0) throw ShapeError("recurrent: sizes must be positive");
  const int gates = kind == CellKind::Gru ? 3 : 4;
  for (int l = 0; l < num_layers; ++l) {
    const int in = l == 0 ? input_size : hidden_size;
    const std::string p = "l" + std::to_string(l) + ".";
    RecurrentWeights<T> w;
    w.w_ih = this->add_parameter(p + "w_ih", {gates * hidden_size, in}, Init::XavierUniform, in, gates * hidden_size);
    w.w_hh = this->add_parameter(p + "w_hh", {gates * hidden_size, hidden_size}, Init::XavierUniform, hidden_size,
                                 gates * hidden_size);
    w.b_ih = this->add_parameter(p + "b_ih", {gates * hidden_size}, Init::Zeros);
    w.b_hh = this->add_parameter(p + "b_hh", {gates * hidden_size}, Init::Zeros);
    layers_.push_back(w);
  }
}

template <class T>
SequenceOutput<T> Recurrent<T>::forward(const Tensor<T>& x) const {
  return recurrent_sequence(kind_, x, layers_);
}

// --------------------------------------------------------------- attention

namespace {

// (B, T, E) -> (B*heads, T, E/heads)
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, int heads) {
  const auto b = x.dim(0), t = x.dim(1), e = x.dim(2);
  return ad::reshape(ad::transpose(ad::reshape(x, {b, t, heads, e / heads}), 1, 2), {b * heads, t, e / heads});
}

}  // namespace

template <class T>
AttentionOutput<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                                       const AttentionWeights<T>& w) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
    throw ShapeError("multihead_attention: q, k, v must be (B, T, E)");
  const auto e = q.dim(2);
  if (heads <= 0 || e % heads != 0)
    throw ShapeError("multihead_attention: embed dim " + std::to_string(e) + " not divisible by " + std::to_string(heads) + " heads");
  if (k.dim(2) != e || v.dim(2) != e)
    throw ShapeError("multihead_attention: q/k/v embed dims differ: " + ad::to_string(q.shape()) + ", " +
                     ad::to_string(k.shape()) + ", " + ad::to_string(v.shape()));
  if (k.dim(0) != q.dim(0) || v.dim(0) != q.dim(0) || k.dim(1) != v.dim(1))
    throw ShapeError("multihead_attention: batch or key/value lengths differ");
  const auto b = q.dim(0), tq = q.dim(1);
  const auto qh = split_heads(ad::linear(q, w.w_q, w.b_q), heads);
  const auto kh = split_heads(ad::linear(k, w.w_k, w.b_k), heads);
  const auto vh = split_heads(ad::linear(v, w.w_v, w.b_v), heads);
  const T scale = T(1) / std::sqrt(static_cast<T>(e / heads));
  const auto scores = ad::affine(ad::matmul(qh, ad::transpose(kh, 1, 2)), scale, T(0));
  const auto attn = ad::softmax(scores);
  const auto ctx = ad::matmul(attn, vh);  // (B*h, Tq, dh)
  const auto merged = ad::reshape(ad::transpose(ad::reshape(ctx, {b, heads, tq, e / heads}), 1, 2), {b, tq, e});
  return {ad::linear(merged, w.w_o, w.b_o), attn};
}

template <class T>
MultiheadAttention<T>::MultiheadAttention(int embed_dim, int heads) : heads_(heads) {
  if (heads <= 0 || embed_dim % heads != 0)
    throw ShapeError("multihead_attention: embed dim " + std::to_string(embed_dim) + " not divisible by " +
                     std::to_string(heads) + " heads");
  auto proj = [&](const char* name) {
    return this->add_parameter(name, {embed_dim, embed_dim}, Init::XavierUniform, embed_dim, embed_dim);
  };
  w_.w_q = proj("w_q");
  w_.w_k = proj("w_k");
  w_.w_v = proj("w_v");
  w_.w_o = proj("w_o");
  w_.b_q = this->add_parameter("b_q", {embed_dim}, Init::Zeros);
  w_.b_k = this->add_parameter("b_k", {embed_dim}, Init::Zeros);
  w_.b_v = this->add_parameter("b_v", {embed_dim}, Init::Zeros);
  w_.b_o = this->add_parameter("b_o", {embed_dim}, Init::Zeros);
}

template <class T>
AttentionOutput<T> MultiheadAttention<T>::forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) const {
  return multihead_attention(q, k, v, heads_, w_);
}

template <class T>
TransformerEncoderLayer<T>::TransformerEncoderLayer(int embed_dim, int heads, int ff_dim, double dropout)
    : attn_(this->template add_module<MultiheadAttention<T>>("attn", embed_dim, heads)),
      norm1_(this->template add_module<LayerNorm<T>>("norm1", embed_dim)),
      ff1_(this->template add_module<Linear<T>>("ff1", embed_dim, ff_dim, true, Init::HeUniform)),
      ff2_(this->template add_module<Linear<T>>("ff2", ff_dim, embed_dim, true, Init::XavierUniform)),
      norm2_(this->template add_module<LayerNorm<T>>("norm2", embed_dim)),
      drop_(this->template add_module<Dropout<T>>("dropout", dropout)) {}

template <class T>
Tensor<T> TransformerEncoderLayer<T>::forward(const Tensor<T>& x) {
  const auto a = attn_.forward(x, x, x).output;
  const auto h = norm1_.forward(ad::add(x, drop_.forward(a)));
  const auto f = ff2_.forward(drop_.forward(ad::relu(ff1_.forward(h))));
  return norm2_.forward(ad::add(h, drop_.forward(f)));
}

#define ECG_NN_INSTANTIATE(T)                                                                               \
  template class Module<T>;                                                                                 \
  template class Linear<T>;                                                                                 \
  template class Conv1d<T>;                                                                                 \
  template class Conv2d<T>;                                                                                 \
  template class BatchNorm<T>;                                                                              \
  template class LayerNorm<T>;                                                                              \
  template class Dropout<T>;                                                                                \
  template class Recurrent<T>;                                                                              \
  template class MultiheadAttention<T>;                                                                     \
  template class TransformerEncoderLayer<T>;                                                                \
  template Tensor<T> gru_cell(const Tensor<T>&, const Tensor<T>&, const RecurrentWeights<T>&);              \
  template LstmState<T> lstm_cell(const Tensor<T>&, const LstmState<T>&, const RecurrentWeights<T>&);       \
  template SequenceOutput<T> recurrent_sequence(CellKind, const Tensor<T>&, const std::vector<RecurrentWeights<T>>&); \
  template AttentionOutput<T> multihead_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, \
                                                  const AttentionWeights<T>&);

ECG_NN_INSTANTIATE(float)
ECG_NN_INSTANTIATE(double)

}  // namespace ecg::nn
