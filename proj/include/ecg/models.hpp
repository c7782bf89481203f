#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "ecg/nn.hpp"
#include "ecg/rng.hpp"
#include "json.hpp"

namespace ecg::models {

using ad::Shape;
using ad::Tensor;

enum class Architecture {
  AlexNet1D,
  VGG11bn1D,
  ResNet18_1D,
  EEGNet2D,
  CRNN_LSTM,
  CRNN_GRU,
  AttResNet,
  TransformerEnc,
  ResTransformer,
};

inline constexpr std::array<Architecture, 9> kAllArchitectures = {
    Architecture::AlexNet1D,   Architecture::VGG11bn1D, Architecture::ResNet18_1D,
    Architecture::EEGNet2D,    Architecture::CRNN_LSTM, Architecture::CRNN_GRU,
    Architecture::AttResNet,   Architecture::TransformerEnc, Architecture::ResTransformer,
};

std::string_view to_string(Architecture a);
Architecture parse_architecture(std::string_view name);

/// Architecture hyperparameters. Fields irrelevant to an architecture are
/// ignored but still serialized, so the fingerprint covers the full record.
struct Hyperparams {
  int base_width = 64;                 // first conv width of AlexNet/VGG/ResNet
  std::array<int, 4> resnet_blocks{2, 2, 2, 2};
  int fc_width = 4096;                 // AlexNet/VGG classifier width
  double dropout = 0.5;                // AlexNet/VGG classifier dropout
  int rnn_hidden = 256;
  int rnn_layers = 2;
  int embed_dim = 512;
  int heads = 4;
  int encoder_layers = 4;
  int ff_dim = 2048;
  double attn_dropout = 0.1;           // transformer layers
  int patch = 32;                      // TransformerEnc stem kernel = stride
  int max_positions = 512;
  int eeg_f1 = 8;
  int eeg_depth = 2;
  int eeg_f2 = 16;
  int eeg_kernel = 250;                // temporal kernel, fs/2 at 500 Hz
  int eeg_separable_kernel = 16;
  double eeg_dropout = 0.25;
};

struct ModelSpec {
  Architecture architecture = Architecture::ResNet18_1D;
  int outputs = 1;
  Hyperparams hyper;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
  /// Sorted-key compact JSON; the fingerprint input.
  std::string canonical() const;
  /// FNV-1a 64 of canonical(), as 16 hex digits.
  std::string fingerprint() const;
};

/// Paper-scale defaults for an architecture with k outputs.
ModelSpec default_spec(Architecture a, int outputs);
/// Narrow, shallow variant used for gradient checks and desk-scale runs.
ModelSpec reduced_spec(Architecture a, int outputs);

inline constexpr std::string_view kHeadPrefix = "head.";

struct ParameterRow {
  std::string name;
  Shape shape;
  std::int64_t count;
};

struct ParameterSummary {
  std::vector<ParameterRow> rows;
  std::int64_t total = 0;
  std::string to_string() const;
};

/// Maps (B, 12, l) signals to (B, k) logits. Every parameter lives under a
/// child module; the final linear layer is always the child "head".
template <class T>
class Model : public nn::Module<T> {
 public:
  explicit Model(ModelSpec spec);

  /// Checks the input shape and runs the architecture.
  Tensor<T> forward(const Tensor<T>& x);
  const ModelSpec& spec() const { return spec_; }
  /// Smallest signal length with a non-empty feature map.
  std::int64_t min_length() const;

  /// Freezes every child except the head (eval mode, no updates).
  void freeze_backbone(bool frozen);
  std::vector<nn::NamedTensor<T>> head_parameters() const;
  std::vector<nn::NamedTensor<T>> backbone_parameters() const;
  ParameterSummary summary() const;

  /// Reseeds the dropout stream; normally called once per epoch.
  void seed_dropout(std::uint64_t seed, std::uint64_t stream) { dropout_rng_ = Rng(seed, stream); }

 protected:
  virtual Tensor<T> run(const Tensor<T>& x) = 0;
  /// Feature length after the backbone for input length l; <= 0 when invalid.
  virtual std::int64_t feature_length(std::int64_t l) const = 0;

 private:
  ModelSpec spec_;
  Rng dropout_rng_;
};

/// Instantiates and initializes the architecture. Parameters are drawn from
/// streams keyed by (seed, parameter name).
template <class T>
std::unique_ptr<Model<T>> build(const ModelSpec& spec, std::uint64_t seed);

/// Conv output length: floor((l + pad - k) / s) + 1, or 0 if l + pad < k.
std::int64_t conv_out(std::int64_t l, int kernel, int stride, int pad_total);

}  // namespace ecg::models
