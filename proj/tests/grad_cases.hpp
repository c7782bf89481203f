#pragma once

// Gradient-check fixtures shared by the unit tests and the acceptance binary.

#include <functional>
#include <string>
#include <vector>

#include "ecg/gradcheck.hpp"
#include "ecg/models.hpp"
#include "ecg/nn.hpp"
#include "ecg/ops.hpp"
#include "ecg/signal.hpp"

namespace grad_cases {

using namespace ecg;
using namespace ecg::ad;
using TD = Tensor<double>;

inline TD random_tensor(const Shape& shape, Rng& rng, bool grad = true, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(ad::numel(shape)));
  for (auto& x : v) x = scale * rng.normal();
  return TD::from(shape, v, grad);
}

// Reduces f(inputs) against a fixed random weighting so that every output
// element contributes a distinct gradient, then runs gradcheck.
inline GradcheckReport check(const std::function<TD(const std::vector<TD>&)>& f, std::vector<TD> inputs,
                      std::uint64_t seed) {
  Rng rng(seed, 99);
  TD weights;
  auto loss = [&]() {
    TD y = f(inputs);
    if (!weights.defined()) weights = random_tensor(y.shape(), rng, false);
    return sum(mul(y, weights));
  };
  return gradcheck(loss, inputs);
}

struct PrimitiveCase {
  std::string name;
  std::vector<Shape> shapes;
  std::function<TD(const std::vector<TD>&)> f;
};

inline std::vector<PrimitiveCase> primitive_cases() {
  std::vector<PrimitiveCase> c;
  c.push_back({"add_broadcast", {{3, 4}, {4}}, [](auto& in) { return add(in[0], in[1]); }});
  c.push_back({"sub", {{3, 4}, {3, 4}}, [](auto& in) { return sub(in[0], in[1]); }});
  c.push_back({"mul_broadcast", {{2, 3, 4}, {3, 4}}, [](auto& in) { return mul(in[0], in[1]); }});
  c.push_back({"affine", {{5}}, [](auto& in) { return affine(in[0], 1.7, -0.3); }});
  c.push_back({"relu", {{4, 5}}, [](auto& in) { return relu(in[0]); }});
  c.push_back({"elu", {{4, 5}}, [](auto& in) { return elu(in[0], 1.0); }});
  c.push_back({"sigmoid", {{4, 5}}, [](auto& in) { return sigmoid(in[0]); }});
  c.push_back({"tanh", {{4, 5}}, [](auto& in) { return ad::tanh(in[0]); }});
  c.push_back({"softmax", {{3, 6}}, [](auto& in) { return softmax(in[0]); }});
  c.push_back({"mean", {{3, 6}}, [](auto& in) { return mean(in[0]); }});
  c.push_back({"mean_axis", {{3, 4, 5}}, [](auto& in) { return mean_axis(in[0], 1); }});
  c.push_back({"matmul", {{3, 4}, {4, 5}}, [](auto& in) { return matmul(in[0], in[1]); }});
  c.push_back({"matmul_batched", {{2, 3, 4}, {2, 4, 5}}, [](auto& in) { return matmul(in[0], in[1]); }});
  c.push_back({"linear", {{3, 4}, {5, 4}, {5}}, [](auto& in) { return linear(in[0], in[1], in[2]); }});
  c.push_back({"conv1d_stride_pad", {{2, 4, 11}, {6, 4, 3}, {6}},
               [](auto& in) { return conv1d(in[0], in[1], in[2], Conv1dOptions{2, 1, 2, 1}); }});
  c.push_back({"conv1d_grouped", {{2, 4, 9}, {4, 2, 3}, {4}},
               [](auto& in) { return conv1d(in[0], in[1], in[2], Conv1dOptions::same(3, 2)); }});
  c.push_back({"conv2d", {{2, 2, 5, 7}, {3, 2, 2, 3}, {3}},
               [](auto& in) { return conv2d(in[0], in[1], in[2], Conv2dOptions{1, 2, 1, 0, 1, 1, 1}); }});
  c.push_back({"conv2d_depthwise", {{2, 3, 4, 6}, {6, 1, 4, 1}, {6}},
               [](auto& in) { return conv2d(in[0], in[1], in[2], Conv2dOptions{1, 1, 0, 0, 0, 0, 3}); }});
  c.push_back({"batch_norm_train", {{4, 3, 5}, {3}, {3}}, [](auto& in) {
                 return batch_norm<double>(in[0], in[1], in[2], nullptr, true);
               }});
  c.push_back({"batch_norm_eval", {{4, 3, 5}, {3}, {3}}, [](auto& in) {
                 static BatchNormStats<double> stats{{0.1, -0.2, 0.3}, {1.5, 0.7, 2.0}, 1};
                 return batch_norm<double>(in[0], in[1], in[2], &stats, false);
               }});
  c.push_back({"batch_norm_2d", {{3, 2, 3, 4}, {2}, {2}}, [](auto& in) {
                 return batch_norm<double>(in[0], in[1], in[2], nullptr, true);
               }});
  c.push_back({"layer_norm", {{3, 4, 6}, {6}, {6}}, [](auto& in) { return layer_norm(in[0], in[1], in[2]); }});
  c.push_back({"max_pool1d", {{2, 3, 10}}, [](auto& in) { return max_pool1d(in[0], 3, 2, 1); }});
  c.push_back({"avg_pool1d", {{2, 3, 10}}, [](auto& in) { return avg_pool1d(in[0], 3, 2, 1); }});
  c.push_back({"global_avg_pool", {{2, 3, 7}}, [](auto& in) { return global_avg_pool(in[0]); }});
  c.push_back({"dropout_eval", {{3, 4}}, [](auto& in) {
                 Rng rng(0);
                 return dropout(in[0], 0.5, false, rng);
               }});
  c.push_back({"concat", {{2, 3}, {2, 4}}, [](auto& in) { return concat<double>({in[0], in[1]}, 1); }});
  c.push_back({"slice", {{3, 8}}, [](auto& in) { return slice(in[0], 1, 2, 4); }});
  c.push_back({"transpose", {{2, 3, 4}}, [](auto& in) { return transpose(in[0], 1, 2); }});
  c.push_back({"reshape", {{2, 6}}, [](auto& in) { return reshape(in[0], {3, 4}); }});
  c.push_back({"gru_cell", {{2, 3}, {2, 4}, {12, 3}, {12, 4}, {12}, {12}}, [](auto& in) {
                 return nn::gru_cell(in[0], in[1], nn::RecurrentWeights<double>{in[2], in[3], in[4], in[5]});
               }});
  c.push_back({"lstm_cell", {{2, 3}, {2, 4}, {2, 4}, {16, 3}, {16, 4}, {16}, {16}}, [](auto& in) {
                 auto s = nn::lstm_cell(in[0], nn::LstmState<double>{in[1], in[2]},
                                        nn::RecurrentWeights<double>{in[3], in[4], in[5], in[6]});
                 return concat<double>({s.h, s.c}, 1);
               }});
  c.push_back({"gru_sequence", {{2, 5, 3}, {12, 3}, {12, 4}, {12}, {12}, {12, 4}, {12, 4}, {12}, {12}}, [](auto& in) {
                 std::vector<nn::RecurrentWeights<double>> layers{{in[1], in[2], in[3], in[4]},
                                                                  {in[5], in[6], in[7], in[8]}};
                 auto out = nn::recurrent_sequence(nn::CellKind::Gru, in[0], layers);
                 return add(reshape(out.outputs, {2, 20}), concat<double>({out.final_h[0], out.final_h[1], out.final_h[0],
                                                                           out.final_h[1], out.final_h[0]}, 1));
               }});
  c.push_back({"lstm_sequence", {{2, 4, 3}, {16, 3}, {16, 4}, {16}, {16}}, [](auto& in) {
                 std::vector<nn::RecurrentWeights<double>> layers{{in[1], in[2], in[3], in[4]}};
                 return nn::recurrent_sequence(nn::CellKind::Lstm, in[0], layers).outputs;
               }});
  c.push_back({"multihead_attention", {{2, 3, 4}, {2, 5, 4}, {4, 4}, {4, 4}, {4, 4}, {4, 4}, {4}, {4}, {4}, {4}},
               [](auto& in) {
                 nn::AttentionWeights<double> w{in[2], in[3], in[4], in[5], in[6], in[7], in[8], in[9]};
                 return nn::multihead_attention(in[0], in[1], in[1], 2, w).output;
               }});
  return c;
}

// Whole-model check at reduced width, double precision, train mode (batch
// statistics) with dropout off. `dead` collects parameters that receive no
// gradient at all.
inline GradcheckReport architecture_gradcheck(models::Architecture arch, std::vector<std::string>* dead = nullptr) {
  auto spec = models::reduced_spec(arch, 3);
  spec.hyper.dropout = spec.hyper.attn_dropout = spec.hyper.eeg_dropout = 0.0;
  auto m = models::build<double>(spec, 21);
  m->train(true);
  const std::int64_t l = std::max<std::int64_t>(m->min_length(), 64);
  Rng rng(22, 5);
  auto x = random_tensor({2, kLeads, l}, rng);
  Rng wr(23);
  const auto weights = random_tensor({2, 3}, wr, false);
  auto loss = [&]() { return sum(mul(m->forward(x), weights)); };

  std::vector<TD> wrt{x};
  std::vector<std::string> names{"input"};
  for (auto& p : m->named_parameters()) {
    wrt.push_back(p.tensor);
    names.push_back(p.name);
  }
  GradcheckOptions opt;
  opt.max_elements = 16;
  auto report = gradcheck(loss, wrt, opt, names);

  if (dead) {
    for (auto& p : m->named_parameters()) p.tensor.zero_grad();
    x.zero_grad();
    loss().backward();
    for (auto& p : m->named_parameters()) {
      double mag = 0.0;
      for (double g : p.tensor.grad()) mag += std::abs(g);
      if (mag == 0.0) dead->push_back(p.name);
    }
  }
  return report;
}

}  // namespace grad_cases
