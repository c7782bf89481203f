#include "ecg/models.hpp"

#include <iomanip>
#include <sstream>

#include "ecg/error.hpp"
#include "ecg/signal.hpp"

namespace ecg::models {

using nlohmann::json;
using nn::Init;

namespace {

constexpr std::array<std::string_view, 9> kNames = {"AlexNet1D", "VGG11bn1D", "ResNet18_1D", "EEGNet2D",
                                                     "CRNN_LSTM", "CRNN_GRU",  "AttResNet",   "TransformerEnc",
                                                     "ResTransformer"};

}  // namespace

std::string_view to_string(Architecture a) { return kNames[static_cast<std::size_t>(a)]; }

Architecture parse_architecture(std::string_view name) {
  for (std::size_t i = 0; i < kNames.size(); ++i)
    if (kNames[i] == name) return static_cast<Architecture>(i);
  std::string known;
  for (auto n : kNames) known += (known.empty() ? "" : ", ") + std::string(n);
  throw ConfigError("unknown architecture '" + std::string(name) + "' (expected one of " + known + ")");
}

std::int64_t conv_out(std::int64_t l, int kernel, int stride, int pad_total) {
  if (l <= 0 || l + pad_total < kernel) return 0;
  return (l + pad_total - kernel) / stride + 1;
}

// ------------------------------------------------------------------ spec

void ModelSpec::validate() const {
  const auto& h = hyper;
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model: ") + name + " must be positive");
  };
  auto probability = [](double p, const char* name) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError(std::string("model: ") + name + " must be in [0, 1)");
  };
  positive(outputs, "outputs");
  positive(h.base_width, "base_width");
  for (int b : h.resnet_blocks) positive(b, "resnet_blocks");
  positive(h.fc_width, "fc_width");
  positive(h.rnn_hidden, "rnn_hidden");
  positive(h.rnn_layers, "rnn_layers");
  positive(h.embed_dim, "embed_dim");
  positive(h.heads, "heads");
  positive(h.encoder_layers, "encoder_layers");
  positive(h.ff_dim, "ff_dim");
  positive(h.patch, "patch");
  positive(h.max_positions, "max_positions");
  positive(h.eeg_f1, "eeg_f1");
  positive(h.eeg_depth, "eeg_depth");
  positive(h.eeg_f2, "eeg_f2");
  positive(h.eeg_kernel, "eeg_kernel");
  positive(h.eeg_separable_kernel, "eeg_separable_kernel");
  probability(h.dropout, "dropout");
  probability(h.attn_dropout, "attn_dropout");
  probability(h.eeg_dropout, "eeg_dropout");
  const bool attention = architecture == Architecture::AttResNet || architecture == Architecture::TransformerEnc ||
                         architecture == Architecture::ResTransformer;
  if (attention && h.embed_dim % h.heads != 0)
    throw ConfigError("model: embed_dim " + std::to_string(h.embed_dim) + " not divisible by heads " +
                      std::to_string(h.heads));
}

json ModelSpec::to_json() const {
  const auto& h = hyper;
  json hj = {
      {"base_width", h.base_width},
      {"resnet_blocks", h.resnet_blocks},
      {"fc_width", h.fc_width},
      {"dropout", h.dropout},
      {"rnn_hidden", h.rnn_hidden},
      {"rnn_layers", h.rnn_layers},
      {"embed_dim", h.embed_dim},
      {"heads", h.heads},
      {"encoder_layers", h.encoder_layers},
      {"ff_dim", h.ff_dim},
      {"attn_dropout", h.attn_dropout},
      {"patch", h.patch},
      {"max_positions", h.max_positions},
      {"eeg_f1", h.eeg_f1},
      {"eeg_depth", h.eeg_depth},
      {"eeg_f2", h.eeg_f2},
      {"eeg_kernel", h.eeg_kernel},
      {"eeg_separable_kernel", h.eeg_separable_kernel},
      {"eeg_dropout", h.eeg_dropout},
  };
  return {{"architecture", std::string(to_string(architecture))}, {"outputs", outputs}, {"hyper", hj}};
}

ModelSpec ModelSpec::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model: expected an object");
  for (const auto& [key, value] : j.items()) {
    if (key != "architecture" && key != "outputs" && key != "hyper")
      throw ConfigError("model: unknown key '" + key + "'");
  }
  ModelSpec s;
  try {
    s.architecture = parse_architecture(j.at("architecture").get<std::string>());
    s.outputs = j.value("outputs", 1);
    s.hyper = default_spec(s.architecture, s.outputs).hyper;
    if (j.contains("hyper")) {
      json defaults = s.to_json()["hyper"];
      for (const auto& [key, value] : j.at("hyper").items()) {
        if (!defaults.contains(key)) throw ConfigError("model.hyper: unknown key '" + key + "'");
        defaults[key] = value;
      }
      auto& h = s.hyper;
      h.base_width = defaults.at("base_width").get<int>();
      h.resnet_blocks = defaults.at("resnet_blocks").get<std::array<int, 4>>();
      h.fc_width = defaults.at("fc_width").get<int>();
      h.dropout = defaults.at("dropout").get<double>();
      h.rnn_hidden = defaults.at("rnn_hidden").get<int>();
      h.rnn_layers = defaults.at("rnn_layers").get<int>();
      h.embed_dim = defaults.at("embed_dim").get<int>();
      h.heads = defaults.at("heads").get<int>();
      h.encoder_layers = defaults.at("encoder_layers").get<int>();
      h.ff_dim = defaults.at("ff_dim").get<int>();
      h.attn_dropout = defaults.at("attn_dropout").get<double>();
      h.patch = defaults.at("patch").get<int>();
      h.max_positions = defaults.at("max_positions").get<int>();
      h.eeg_f1 = defaults.at("eeg_f1").get<int>();
      h.eeg_depth = defaults.at("eeg_depth").get<int>();
      h.eeg_f2 = defaults.at("eeg_f2").get<int>();
      h.eeg_kernel = defaults.at("eeg_kernel").get<int>();
      h.eeg_separable_kernel = defaults.at("eeg_separable_kernel").get<int>();
      h.eeg_dropout = defaults.at("eeg_dropout").get<double>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  s.validate();
  return s;
}

std::string ModelSpec::canonical() const { return to_json().dump(); }

std::string ModelSpec::fingerprint() const {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(canonical());
  return os.str();
}

ModelSpec default_spec(Architecture a, int outputs) {
  ModelSpec s;
  s.architecture = a;
  s.outputs = outputs;
  return s;
}

ModelSpec reduced_spec(Architecture a, int outputs) {
  ModelSpec s = default_spec(a, outputs);
  auto& h = s.hyper;
  h.base_width = 4;
  h.resnet_blocks = {1, 1, 1, 1};
  h.fc_width = 16;
  h.rnn_hidden = 8;
  h.rnn_layers = 2;
  h.embed_dim = 16;
  h.heads = 2;
  h.encoder_layers = 1;
  h.ff_dim = 32;
  h.patch = 8;
  h.max_positions = 512;
  h.eeg_f1 = 4;
  h.eeg_depth = 2;
  h.eeg_f2 = 8;
  h.eeg_kernel = 9;
  h.eeg_separable_kernel = 5;
  return s;
}

std::string ParameterSummary::to_string() const {
  std::ostringstream os;
  for (const auto& r : rows) os << std::left << std::setw(48) << r.name << std::setw(20) << ad::to_string(r.shape) << r.count << '\n';
  os << "total " << total << '\n';
  return os.str();
}

// ----------------------------------------------------------- components

namespace {

template <class T>
class BasicBlock : public nn::Module<T> {
 public:
  BasicBlock(int in, int out, int stride)
      : conv1_(this->template add_module<nn::Conv1d<T>>("conv1", in, out, 3, ad::Conv1dOptions::symmetric(stride, 1), false)),
        bn1_(this->template add_module<nn::BatchNorm<T>>("bn1", out)),
        conv2_(this->template add_module<nn::Conv1d<T>>("conv2", out, out, 3, ad::Conv1dOptions::symmetric(1, 1), false)),
        bn2_(this->template add_module<nn::BatchNorm<T>>("bn2", out)) {
    if (stride != 1 || in != out) {
      down_conv_ = &this->template add_module<nn::Conv1d<T>>("down_conv", in, out, 1,
                                                            ad::Conv1dOptions::symmetric(stride, 0), false);
      down_bn_ = &this->template add_module<nn::BatchNorm<T>>("down_bn", out);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) {
    auto h = ad::relu(bn1_.forward(conv1_.forward(x)));
    h = bn2_.forward(conv2_.forward(h));
    const auto skip = down_conv_ ? down_bn_->forward(down_conv_->forward(x)) : x;
    return ad::relu(ad::add(h, skip));
  }

 private:
  nn::Conv1d<T>& conv1_;
  nn::BatchNorm<T>& bn1_;
  nn::Conv1d<T>& conv2_;
  nn::BatchNorm<T>& bn2_;
  nn::Conv1d<T>* down_conv_ = nullptr;
  nn::BatchNorm<T>* down_bn_ = nullptr;
};

template <class T>
class Stage : public nn::Module<T> {
 public:
  Stage(int in, int out, int blocks, int stride) {
    for (int b = 0; b < blocks; ++b)
      blocks_.push_back(&this->template add_module<BasicBlock<T>>(std::to_string(b), b == 0 ? in : out, out, b == 0 ? stride : 1));
  }
  Tensor<T> forward(Tensor<T> x) {
    for (auto* b : blocks_) x = b->forward(x);
    return x;
  }

 private:
  std::vector<BasicBlock<T>*> blocks_;
};

/// ResNet18 trunk up to the last residual stage: (B, 12, l) -> (B, 8w, l/32).
template <class T>
class ResNetTrunk : public nn::Module<T> {
 public:
  explicit ResNetTrunk(const Hyperparams& h)
      : width_(h.base_width),
        conv1_(this->template add_module<nn::Conv1d<T>>("conv1", kLeads, h.base_width, 7, ad::Conv1dOptions::symmetric(2, 3), false)),
        bn1_(this->template add_module<nn::BatchNorm<T>>("bn1", h.base_width)) {
    int in = h.base_width;
    for (int s = 0; s < 4; ++s) {
      const int out = h.base_width << s;
      stages_.push_back(&this->template add_module<Stage<T>>("layer" + std::to_string(s + 1), in, out,
                                                             h.resnet_blocks[static_cast<std::size_t>(s)], s == 0 ? 1 : 2));
      in = out;
    }
  }

  Tensor<T> forward(const Tensor<T>& x) {
    auto h = ad::max_pool1d(ad::relu(bn1_.forward(conv1_.forward(x))), 3, 2, 1);
    for (auto* s : stages_) h = s->forward(h);
    return h;
  }

  int channels() const { return width_ * 8; }

  static std::int64_t length(std::int64_t l) {
    l = conv_out(l, 7, 2, 6);
    l = conv_out(l, 3, 2, 2);
    for (int s = 1; s < 4; ++s) l = conv_out(l, 3, 2, 2);
    return l;
  }

 private:
  int width_;
  nn::Conv1d<T>& conv1_;
  nn::BatchNorm<T>& bn1_;
  std::vector<Stage<T>*> stages_;
};

template <class T>
class PositionalEmbedding : public nn::Module<T> {
 public:
  PositionalEmbedding(int max_positions, int dim) {
    weight_ = this->add_parameter("weight", {max_positions, dim}, Init::Normal002);
  }
  Tensor<T> forward(const Tensor<T>& x) const {
    const auto t = x.dim(1);
    if (t > weight_.dim(0))
      throw ShapeError("positional embedding: sequence of " + std::to_string(t) + " tokens exceeds max_positions " +
                       std::to_string(weight_.dim(0)));
    return ad::add(x, ad::slice(weight_, 0, 0, t));
  }

 private:
  Tensor<T> weight_;
};

template <class T>
class Encoder : public nn::Module<T> {
 public:
  Encoder(const Hyperparams& h) {
    for (int i = 0; i < h.encoder_layers; ++i)
      layers_.push_back(&this->template add_module<nn::TransformerEncoderLayer<T>>(std::to_string(i), h.embed_dim, h.heads,
                                                                                  h.ff_dim, h.attn_dropout));
  }
  Tensor<T> forward(Tensor<T> x) {
    for (auto* l : layers_) x = l->forward(x);
    return x;
  }

 private:
  std::vector<nn::TransformerEncoderLayer<T>*> layers_;
};

// --------------------------------------------------------- architectures

template <class T>
class AlexNet : public Model<T> {
 public:
  explicit AlexNet(const ModelSpec& spec) : Model<T>(spec) {
    const auto& h = spec.hyper;
    const int b = h.base_width;
    const std::array<int, 5> widths{b, 3 * b, 6 * b, 4 * b, 4 * b};
    const std::array<int, 5> kernels{11, 5, 3, 3, 3};
    int in = kLeads;
    for (int i = 0; i < 5; ++i) {
      const auto opt = i == 0 ? ad::Conv1dOptions::symmetric(4, 2) : ad::Conv1dOptions::symmetric(1, kernels[static_cast<std::size_t>(i)] / 2);
      convs_.push_back(&this->template add_module<nn::Conv1d<T>>("conv" + std::to_string(i + 1), in,
                                                                 widths[static_cast<std::size_t>(i)], kernels[static_cast<std::size_t>(i)], opt));
      in = widths[static_cast<std::size_t>(i)];
    }
    drop_ = &this->template add_module<nn::Dropout<T>>("dropout", h.dropout);
    fc1_ = &this->template add_module<nn::Linear<T>>("fc1", in, h.fc_width);
    fc2_ = &this->template add_module<nn::Linear<T>>("fc2", h.fc_width, h.fc_width);
    head_ = &this->template add_module<nn::Linear<T>>("head", h.fc_width, spec.outputs, true, Init::XavierUniform);
  }

 protected:
  Tensor<T> run(const Tensor<T>& x) override {
    auto h = x;
    for (int i = 0; i < 5; ++i) {
      h = ad::relu(convs_[static_cast<std::size_t>(i)]->forward(h));
      if (i == 0 || i == 1 || i == 4) h = ad::max_pool1d(h, 3, 2);
    }
    auto f = ad::global_avg_pool(h);
    f = ad::relu(fc1_->forward(drop_->forward(f)));
    f = ad::relu(fc2_->forward(drop_->forward(f)));
    return head_->forward(f);
  }

  std::int64_t feature_length(std::int64_t l) const override {
    l = conv_out(conv_out(l, 11, 4, 4), 3, 2, 0);
    l = conv_out(conv_out(l, 5, 1, 4), 3, 2, 0);
    for (int i = 0; i < 3; ++i) l = conv_out(l, 3, 1, 2);
    return conv_out(l, 3, 2, 0);
  }

 private:
  std::vector<nn::Conv1d<T>*> convs_;
  nn::Dropout<T>* drop_;
  nn::Linear<T>*fc1_, *fc2_, *head_;
};

template <class T>
class VGG11bn : public Model<T> {
 public:
  explicit VGG11bn(const ModelSpec& spec) : Model<T>(spec) {
    const auto& h = spec.hyper;
    // Widths in units of base_width; 0 marks a max-pool.
    static constexpr std::array<int, 13> cfg{1, 0, 2, 0, 4, 4, 0, 8, 8, 0, 8, 8, 0};
    int in = kLeads;
    int n = 0;
    for (int c : cfg) {
      if (c == 0) {
        layers_.push_back({nullptr, nullptr});
        continue;
      }
      const int out = c * h.base_width;
      ++n;
      auto* conv = &this->template add_module<nn::Conv1d<T>>("conv" + std::to_string(n), in, out, 3,
                                                             ad::Conv1dOptions::symmetric(1, 1));
      auto* bn = &this->template add_module<nn::BatchNorm<T>>("bn" + std::to_string(n), out);
      layers_.push_back({conv, bn});
      in = out;
    }
    drop_ = &this->template add_module<nn::Dropout<T>>("dropout", h.dropout);
    fc1_ = &this->template add_module<nn::Linear<T>>("fc1", in, h.fc_width);
    fc2_ = &this->template add_module<nn::Linear<T>>("fc2", h.fc_width, h.fc_width);
    head_ = &this->template add_module<nn::Linear<T>>("head", h.fc_width, spec.outputs, true, Init::XavierUniform);
  }

 protected:
  Tensor<T> run(const Tensor<T>& x) override {
    auto h = x;
    for (auto& [conv, bn] : layers_) {
      h = conv ? ad::relu(bn->forward(conv->forward(h))) : ad::max_pool1d(h, 2, 2);
    }
    auto f = ad::global_avg_pool(h);
    f = drop_->forward(ad::relu(fc1_->forward(f)));
    f = drop_->forward(ad::relu(fc2_->forward(f)));
    return head_->forward(f);
  }

  std::int64_t feature_length(std::int64_t l) const override {
    for (int i = 0; i < 5; ++i) l = conv_out(l, 2, 2, 0);
    return l;
  }

 private:
  std::vector<std::pair<nn::Conv1d<T>*, nn::BatchNorm<T>*>> layers_;
  nn::Dropout<T>* drop_;
  nn::Linear<T>*fc1_, *fc2_, *head_;
};

template <class T>
class ResNet18 : public Model<T> {
 public:
  explicit ResNet18(const ModelSpec& spec) : Model<T>(spec) {
    trunk_ = &this->template add_module<ResNetTrunk<T>>("backbone", spec.hyper);
    head_ = &this->template add_module<nn::Linear<T>>("head", trunk_->channels(), spec.outputs, true, Init::XavierUniform);
  }

 protected:
  Tensor<T> run(const Tensor<T>& x) override { return head_->forward(ad::global_avg_pool(trunk_->forward(x))); }
  std::int64_t feature_length(std::int64_t l) const override { return ResNetTrunk<T>::length(l); }

 private:
  ResNetTrunk<T>* trunk_;
  nn::Linear<T>* head_;
};

template <class T>
class CRNN : public Model<T> {
 public:
  CRNN(const ModelSpec& spec, nn::CellKind kind) : Model<T>(spec) {
    const auto& h = spec.hyper;
    trunk_ = &this->template add_module<ResNetTrunk<T>>("backbone", h);
    rnn_ = &this->template add_module<nn::Recurrent<T>>("rnn", kind, trunk_->channels(), h.rnn_hidden, h.rnn_layers);
    head_ = &this->template add_module<nn::Linear<T>>("head", h.rnn_hidden, spec.outputs, true, Init::XavierUniform);
  }

 protected:
  Tensor<T> run(const Tensor<T>& x) override {
    const auto seq = ad::transpose(trunk_->forward(x), 1, 2);
    const auto out = rnn_->forward(seq);
    return head_->forward(out.final_h.back());
  }
  std::int64_t feature_length(std::int64_t l) const override { return ResNetTrunk<T>::length(l); }

 private:
  ResNetTrunk<T>* trunk_;
  nn::Recurrent<T>* rnn_;
  nn::Linear<T>* head_;
};

template <class T>
class AttResNet : public Model<T> {
 public:
  explicit AttResNet(const ModelSpec& spec) : Model<T>(spec) {
    const auto& h = spec.hyper;
    trunk_ = &this->template add_module<ResNetTrunk<T>>("backbone", h);
    if (trunk_->channels() != h.embed_dim)
      proj_ = &this->template add_module<nn::Linear<T>>("proj", trunk_->channels(), h.embed_dim, true, Init::XavierUniform);
    attn_ = &this->template add_module<nn::MultiheadAttention<T>>("attn", h.embed_dim, h.heads);
    head_ = &this->template add_module<nn::Linear<T>>("head", h.embed_dim, spec.outputs, true, Init::XavierUniform);
  }

 protected:
  Tensor<T> run(const Tensor<T>& x) override {
    auto seq = ad::transpose(trunk_->forward(x), 1, 2);
    if (proj_) seq = proj_->forward(seq);
    const auto a = attn_->forward(seq, seq, seq).output;
    return head_->forward(ad::mean_axis(a, 1));
  }
  std::int64_t feature_length(std::int64_t l) const override { return ResNetTrunk<T>::length(l); }

 private:
  ResNetTrunk<T>* trunk_;
  nn::Linear<T>* proj_ = nullptr;
  nn::MultiheadAttention<T>* attn_;
  nn::Linear<T>* head_;
};

template <class T>
class TransformerEnc : public Model<T> {
 public:
  explicit TransformerEnc(const ModelSpec& spec) : Model<T>(spec), patch_(spec.hyper.patch), max_tokens_(spec.hyper.max_positions) {
    const auto& h = spec.hyper;
    stem_ = &this->template add_module<nn::Conv1d<T>>("stem", kLeads, h.embed_dim, h.patch,
                                                      ad::Conv1dOptions::symmetric(h.patch, 0), true, Init::XavierUniform);
    pos_ = &this->template add_module<PositionalEmbedding<T>>("pos", h.max_positions, h.embed_dim);
    drop_ = &this->template add_module<nn::Dropout<T>>("dropout", h.attn_dropout);
    encoder_ = &this->template add_module<Encoder<T>>("encoder", h);
    head_ = &this->template add_module<nn::Linear<T>>("head", h.embed_dim, spec.outputs, true, Init::XavierUniform);
  }

 protected:
  Tensor<T> run(const Tensor<T>& x) override {
    auto seq = ad::transpose(stem_->forward(x), 1, 2);
    seq = drop_->forward(pos_->forward(seq));
    return head_->forward(ad::mean_axis(encoder_->forward(seq), 1));
  }
  std::int64_t feature_length(std::int64_t l) const override {
    const auto t = conv_out(l, patch_, patch_, 0);
    return t > max_tokens_ ? 0 : t;
  }

 private:
  int patch_, max_tokens_;
  nn::Conv1d<T>* stem_;
  PositionalEmbedding<T>* pos_;
  nn::Dropout<T>* drop_;
  Encoder<T>* encoder_;
  nn::Linear<T>* head_;
};

template <class T>
class ResTransformer : public Model<T> {
 public:
  explicit ResTransformer(const ModelSpec& spec) : Model<T>(spec) {
    const auto& h = spec.hyper;
    trunk_ = &this->template add_module<ResNetTrunk<T>>("backbone", h);
    if (trunk_->channels() != h.embed_dim)
      proj_ = &this->template add_module<nn::Linear<T>>("proj", trunk_->channels(), h.embed_dim, true, Init::XavierUniform);
    pos_ = &this->template add_module<PositionalEmbedding<T>>("pos", h.max_positions, h.embed_dim);
    encoder_ = &this->template add_module<Encoder<T>>("encoder", h);
    head_ = &this->template add_module<nn::Linear<T>>("head", h.embed_dim, spec.outputs, true, Init::XavierUniform);
  }

 protected:
  Tensor<T> run(const Tensor<T>& x) override {
    auto seq = ad::transpose(trunk_->forward(x), 1, 2);
    if (proj_) seq = proj_->forward(seq);
    seq = pos_->forward(seq);
    return head_->forward(ad::mean_axis(encoder_->forward(seq), 1));
  }
  std::int64_t feature_length(std::int64_t l) const override {
    const auto t = ResNetTrunk<T>::length(l);
    return t > this->spec().hyper.max_positions ? 0 : t;
  }

 private:
  ResNetTrunk<T>* trunk_;
  nn::Linear<T>* proj_ = nullptr;
  PositionalEmbedding<T>* pos_;
  Encoder<T>* encoder_;
  nn::Linear<T>* head_;
};

/// The signal is treated as a one-channel image of 12 rows (leads) by l
/// columns (time).
template <class T>
class EEGNet : public Model<T> {
 public:
  explicit EEGNet(const ModelSpec& spec) : Model<T>(spec) {
    const auto& h = spec.hyper;
    const int f1 = h.eeg_f1;
    const int fd = h.eeg_f1 * h.eeg_depth;
    auto same_w = [](int k, int groups) {
      ad::Conv2dOptions o;
      o.pad_left = (k - 1) / 2;
      o.pad_right = k / 2;
      o.groups = groups;
      return o;
    };
    temporal_ = &this->template add_module<nn::Conv2d<T>>("temporal", 1, f1, 1, h.eeg_kernel, same_w(h.eeg_kernel, 1), false);
    bn1_ = &this->template add_module<nn::BatchNorm<T>>("bn1", f1);
    ad::Conv2dOptions dw;
    dw.groups = f1;
    spatial_ = &this->template add_module<nn::Conv2d<T>>("spatial", f1, fd, kLeads, 1, dw, false);
    bn2_ = &this->template add_module<nn::BatchNorm<T>>("bn2", fd);
    sep_depth_ = &this->template add_module<nn::Conv2d<T>>("separable_depth", fd, fd, 1, h.eeg_separable_kernel,
                                                           same_w(h.eeg_separable_kernel, fd), false);
    sep_point_ = &this->template add_module<nn::Conv2d<T>>("separable_point", fd, h.eeg_f2, 1, 1, ad::Conv2dOptions{}, false);
    bn3_ = &this->template add_module<nn::BatchNorm<T>>("bn3", h.eeg_f2);
    drop_ = &this->template add_module<nn::Dropout<T>>("dropout", h.eeg_dropout);
    head_ = &this->template add_module<nn::Linear<T>>("head", h.eeg_f2, spec.outputs, true, Init::XavierUniform);
  }

 protected:
  Tensor<T> run(const Tensor<T>& x) override {
    const auto b = x.dim(0);
    const auto l = x.dim(2);
    auto h = ad::reshape(x, {b, 1, kLeads, l});
    h = bn1_->forward(temporal_->forward(h));
    h = ad::elu(bn2_->forward(spatial_->forward(h)));  // (B, F1*D, 1, l)
    h = pool_width(h, 4);
    h = drop_->forward(h);
    h = bn3_->forward(sep_point_->forward(sep_depth_->forward(h)));
    h = pool_width(ad::elu(h), 8);
    h = drop_->forward(h);
    return head_->forward(ad::global_avg_pool(h));
  }

  std::int64_t feature_length(std::int64_t l) const override { return conv_out(conv_out(l, 4, 4, 0), 8, 8, 0); }

 private:
  // Average pooling along time for a (B, C, 1, W) map.
  static Tensor<T> pool_width(const Tensor<T>& h, int k) {
    const auto b = h.dim(0);
    const auto c = h.dim(1);
    auto p = ad::avg_pool1d(ad::reshape(h, {b, c, h.dim(3)}), k, k);
    return ad::reshape(p, {b, c, 1, p.dim(2)});
  }

  nn::Conv2d<T>*temporal_, *spatial_, *sep_depth_, *sep_point_;
  nn::BatchNorm<T>*bn1_, *bn2_, *bn3_;
  nn::Dropout<T>* drop_;
  nn::Linear<T>* head_;
};

}  // namespace

// ------------------------------------------------------------------ Model

template <class T>
Model<T>::Model(ModelSpec spec) : spec_(std::move(spec)) {}

template <class T>
std::int64_t Model<T>::min_length() const {
  // Valid lengths form an interval (bounded above only by max_positions); scan upward.
  for (std::int64_t l = 1; l <= (std::int64_t{1} << 20); ++l)
    if (feature_length(l) > 0) return l;
  throw ShapeError("model: no valid input length");
}

template <class T>
Tensor<T> Model<T>::forward(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("model: expected input (B, 12, l), got " + ad::to_string(x.shape()));
  if (x.dim(1) != kLeads)
    throw ShapeError("model: expected 12 leads on axis 1, got " + std::to_string(x.dim(1)));
  if (feature_length(x.dim(2)) <= 0) {
    std::int64_t lo = min_length();
    throw ShapeError(std::string(to_string(spec_.architecture)) + ": input length " + std::to_string(x.dim(2)) +
                     " is outside the supported range (minimum " + std::to_string(lo) + ")");
  }
  this->attach_rng(&dropout_rng_);
  return run(x);
}

template <class T>
void Model<T>::freeze_backbone(bool frozen) {
  for (auto& [name, child] : this->children())
    if (name + "." != kHeadPrefix) child->set_frozen(frozen);
}

template <class T>
std::vector<nn::NamedTensor<T>> Model<T>::head_parameters() const {
  std::vector<nn::NamedTensor<T>> out;
  for (auto& p : this->named_parameters())
    if (p.name.starts_with(kHeadPrefix)) out.push_back(p);
  return out;
}

template <class T>
std::vector<nn::NamedTensor<T>> Model<T>::backbone_parameters() const {
  std::vector<nn::NamedTensor<T>> out;
  for (auto& p : this->named_parameters())
    if (!p.name.starts_with(kHeadPrefix)) out.push_back(p);
  return out;
}

template <class T>
ParameterSummary Model<T>::summary() const {
  ParameterSummary s;
  for (const auto& p : this->named_parameters()) {
    s.rows.push_back({p.name, p.tensor.shape(), p.tensor.numel()});
    s.total += p.tensor.numel();
  }
  return s;
}

template <class T>
std::unique_ptr<Model<T>> build(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::unique_ptr<Model<T>> m;
  switch (spec.architecture) {
    case Architecture::AlexNet1D: m = std::make_unique<AlexNet<T>>(spec); break;
    case Architecture::VGG11bn1D: m = std::make_unique<VGG11bn<T>>(spec); break;
    case Architecture::ResNet18_1D: m = std::make_unique<ResNet18<T>>(spec); break;
    case Architecture::EEGNet2D: m = std::make_unique<EEGNet<T>>(spec); break;
    case Architecture::CRNN_LSTM: m = std::make_unique<CRNN<T>>(spec, nn::CellKind::Lstm); break;
    case Architecture::CRNN_GRU: m = std::make_unique<CRNN<T>>(spec, nn::CellKind::Gru); break;
    case Architecture::AttResNet: m = std::make_unique<AttResNet<T>>(spec); break;
    case Architecture::TransformerEnc: m = std::make_unique<TransformerEnc<T>>(spec); break;
    case Architecture::ResTransformer: m = std::make_unique<ResTransformer<T>>(spec); break;
  }
  if (!m) throw ConfigError("unknown architecture");
  m->initialize(seed);
  m->seed_dropout(seed, fnv1a64("dropout"));
  return m;
}

template class Model<float>;
template class Model<double>;
template std::unique_ptr<Model<float>> build(const ModelSpec&, std::uint64_t);
template std::unique_ptr<Model<double>> build(const ModelSpec&, std::uint64_t);

}  // namespace ecg::models
