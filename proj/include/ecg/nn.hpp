#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ecg/ops.hpp"
#include "ecg/rng.hpp"
#include "ecg/tensor.hpp"

namespace ecg::nn {

using ad::Shape;
using ad::Tensor;

/// Parameter initialization rule. Fans are taken from the layer geometry.
enum class Init {
  Zeros,
  Ones,
  HeUniform,      // U(-sqrt(6/fan_in), +sqrt(6/fan_in)); layers feeding ReLU/ELU
  XavierUniform,  // U(-sqrt(6/(fan_in+fan_out)), ...); recurrent, attention, heads
  Normal002,      // N(0, 0.02^2); positional embeddings
};

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* values;
};

/// Base of every layer: owns parameters, buffers and child modules under
/// hierarchical dotted names ("backbone.layer1.0.conv1.weight").
template <class T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  /// Parameters in registration order (depth first), with full names.
  std::vector<NamedTensor<T>> named_parameters(const std::string& prefix = "") const;
  std::vector<NamedBuffer<T>> named_buffers(const std::string& prefix = "");

  /// Re-draws every parameter from its rule; each parameter uses an
  /// independent stream keyed by (seed, full name).
  void initialize(std::uint64_t seed, const std::string& prefix = "");

  void train(bool on);
  /// A frozen module runs in eval mode regardless of train().
  void set_frozen(bool frozen);
  bool is_training() const { return training_ && !frozen_; }
  /// Random source for dropout, shared with all children.
  void attach_rng(Rng* rng);

  /// Direct children in registration order.
  std::vector<std::pair<std::string, Module*>> children() const {
    std::vector<std::pair<std::string, Module*>> out;
    for (const auto& [name, child] : children_) out.emplace_back(name, child.get());
    return out;
  }

 protected:
  Tensor<T> add_parameter(std::string name, Shape shape, Init init, int fan_in = 1, int fan_out = 1);
  void add_buffer(std::string name, std::vector<T>* values, T reset_value);

  template <class M, class... Args>
  M& add_module(std::string name, Args&&... args) {
    auto child = std::make_unique<M>(std::forward<Args>(args)...);
    M& ref = *child;
    children_.emplace_back(std::move(name), std::move(child));
    return ref;
  }

  Rng* rng() const { return rng_; }

 private:
  struct Param {
    std::string name;
    Tensor<T> tensor;
    Init init;
    int fan_in;
    int fan_out;
  };
  struct Buffer {
    std::string name;
    std::vector<T>* values;
    T reset_value;
  };
  std::vector<Param> params_;
  std::vector<Buffer> buffers_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
  bool training_ = true;
  bool frozen_ = false;
  Rng* rng_ = nullptr;
};

// ------------------------------------------------------------------ layers

template <class T>
class Linear : public Module<T> {
 public:
  Linear(int in_features, int out_features, bool bias = true, Init init = Init::HeUniform);
  Tensor<T> forward(const Tensor<T>& x) const;
  int in_features() const { return in_; }
  int out_features() const { return out_; }

 private:
  int in_, out_;
  Tensor<T> weight_, bias_;
};

template <class T>
class Conv1d : public Module<T> {
 public:
  Conv1d(int in_channels, int out_channels, int kernel, ad::Conv1dOptions options, bool bias = true,
         Init init = Init::HeUniform);
  Tensor<T> forward(const Tensor<T>& x) const;

 private:
  ad::Conv1dOptions options_;
  Tensor<T> weight_, bias_;
};

template <class T>
class Conv2d : public Module<T> {
 public:
  Conv2d(int in_channels, int out_channels, int kernel_h, int kernel_w, ad::Conv2dOptions options,
         bool bias = true, Init init = Init::HeUniform);
  Tensor<T> forward(const Tensor<T>& x) const;

 private:
  ad::Conv2dOptions options_;
  Tensor<T> weight_, bias_;
};

/// Batch normalization over channel axis 1 (1D and 2D inputs).
template <class T>
class BatchNorm : public Module<T> {
 public:
  explicit BatchNorm(int channels, T momentum = T(0.1), T eps = T(1e-5));
  Tensor<T> forward(const Tensor<T>& x);
  const ad::BatchNormStats<T>& stats() const { return stats_; }

 private:
  T momentum_, eps_;
  Tensor<T> weight_, bias_;
  ad::BatchNormStats<T> stats_;
};

template <class T>
class LayerNorm : public Module<T> {
 public:
  explicit LayerNorm(int features, T eps = T(1e-5));
  Tensor<T> forward(const Tensor<T>& x) const;

 private:
  T eps_;
  Tensor<T> weight_, bias_;
};

template <class T>
class Dropout : public Module<T> {
 public:
  explicit Dropout(double p) : p_(p) {}
  Tensor<T> forward(const Tensor<T>& x) const;

 private:
  double p_;
};

// --------------------------------------------------------------- recurrent

/// Weights of one recurrent layer, PyTorch layout: gates stacked along rows,
/// GRU order (reset, update, new), LSTM order (input, forget, cell, output).
template <class T>
struct RecurrentWeights {
  Tensor<T> w_ih;  // (G*H, I)
  Tensor<T> w_hh;  // (G*H, H)
  Tensor<T> b_ih;  // (G*H)
  Tensor<T> b_hh;  // (G*H)
};

/// h' = (1 - z) * n + z * h with r, z = sigmoid(.), n = tanh(W_in x + b_in + r * (W_hn h + b_hn)).
template <class T>
Tensor<T> gru_cell(const Tensor<T>& x, const Tensor<T>& h, const RecurrentWeights<T>& w);

template <class T>
struct LstmState {
  Tensor<T> h;
  Tensor<T> c;
};

/// c' = f * c + i * g, h' = o * tanh(c').
template <class T>
LstmState<T> lstm_cell(const Tensor<T>& x, const LstmState<T>& state, const RecurrentWeights<T>& w);

template <class T>
struct SequenceOutput {
  Tensor<T> outputs;               // (B, T, H) of the last layer
  std::vector<Tensor<T>> final_h;  // one (B, H) per layer
  std::vector<Tensor<T>> final_c;  // LSTM only
};

enum class CellKind { Gru, Lstm };

/// Multi-layer unroll over x: (B, T, I). Initial states are zero. Throws if
/// consecutive layers disagree on hidden size.
template <class T>
SequenceOutput<T> recurrent_sequence(CellKind kind, const Tensor<T>& x, const std::vector<RecurrentWeights<T>>& layers);

template <class T>
class Recurrent : public Module<T> {
 public:
  Recurrent(CellKind kind, int input_size, int hidden_size, int num_layers);
  SequenceOutput<T> forward(const Tensor<T>& x) const;
  const std::vector<RecurrentWeights<T>>& layers() const { return layers_; }
  int hidden_size() const { return hidden_; }

 private:
  CellKind kind_;
  int hidden_;
  std::vector<RecurrentWeights<T>> layers_;
};

// --------------------------------------------------------------- attention

template <class T>
struct AttentionWeights {
  Tensor<T> w_q, w_k, w_v, w_o;  // (E, E)
  Tensor<T> b_q, b_k, b_v, b_o;  // (E)
};

template <class T>
struct AttentionOutput {
  Tensor<T> output;   // (B, Tq, E)
  Tensor<T> weights;  // (B * heads, Tq, Tk)
};

/// Scaled dot-product attention per head, concatenated and projected.
template <class T>
AttentionOutput<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                                       const AttentionWeights<T>& w);

template <class T>
class MultiheadAttention : public Module<T> {
 public:
  MultiheadAttention(int embed_dim, int heads);
  AttentionOutput<T> forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) const;
  const AttentionWeights<T>& weights() const { return w_; }

 private:
  int heads_;
  AttentionWeights<T> w_;
};

/// Post-norm encoder layer: x = LN(x + MHA(x)); x = LN(x + FF(x)).
template <class T>
class TransformerEncoderLayer : public Module<T> {
 public:
  TransformerEncoderLayer(int embed_dim, int heads, int ff_dim, double dropout);
  Tensor<T> forward(const Tensor<T>& x);

 private:
  MultiheadAttention<T>& attn_;
  LayerNorm<T>& norm1_;
  Linear<T>& ff1_;
  Linear<T>& ff2_;
  LayerNorm<T>& norm2_;
  Dropout<T>& drop_;
};

}  // namespace ecg::nn
