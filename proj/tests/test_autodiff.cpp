#include <gtest/gtest.h>

#include <cmath>

#include "ecg/error.hpp"
#include "ecg/gradcheck.hpp"
#include "ecg/nn.hpp"
#include "ecg/ops.hpp"
#include "grad_cases.hpp"
#include "oracles.hpp"

using namespace ecg;
using namespace ecg::ad;
using TD = Tensor<double>;
using namespace grad_cases;

namespace {

constexpr double kTol = 1e-4;

}  // namespace

// ------------------------------------------------------------------ values

TEST(Ops, ConvShapeArithmetic) {
  Rng rng(1);
  auto x = TD::zeros({2, 12, 2048});
  auto w = random_tensor({64, 12, 7}, rng, false);
  auto b = TD::zeros({64});
  EXPECT_EQ(conv1d(x, w, b, Conv1dOptions::symmetric(2, 3)).shape(), (Shape{2, 64, 1024}));
}

TEST(Ops, ReluAndSoftmaxValues) {
  auto r = relu(TD::from({3}, {-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{0, 0, 2}));
  auto s = softmax(TD::from({3}, {0, 0, 0}));
  for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Ops, NanPropagates) {
  const double nan = std::nan("");
  const auto r = relu(TD::from({3}, {nan, -1.0, 2.0}));
  EXPECT_TRUE(std::isnan(r.data()[0]));
  const auto m = max_pool1d(TD::from({1, 1, 4}, {1.0, nan, 3.0, 0.5}), 2, 2, 0);
  EXPECT_TRUE(std::isnan(m.data()[0]));
  EXPECT_EQ(m.data()[1], 3.0);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Rng rng(2);
  auto s = softmax(random_tensor({7, 11}, rng, false, 10.0));
  for (int r = 0; r < 7; ++r) {
    double total = 0;
    for (int c = 0; c < 11; ++c) total += s.data()[r * 11 + c];
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Ops, BatchNormTrainNormalizesLargeBatch) {
  Rng rng(3);
  auto x = random_tensor({256, 3, 16}, rng, false, 4.0);
  for (auto& v : x.mutable_data()) v += 2.5;
  auto g = TD::full({3}, 1.0), b = TD::zeros({3});
  BatchNormStats<double> stats{{0, 0, 0}, {1, 1, 1}, 0};
  auto y = batch_norm(x, g, b, &stats, true);
  for (int c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    int n = 0;
    for (int i = 0; i < 256; ++i)
      for (int t = 0; t < 16; ++t) {
        const double v = y.data()[(i * 3 + c) * 16 + t];
        s += v;
        s2 += v * v;
        ++n;
      }
    EXPECT_LT(std::abs(s / n), 1e-5);
    EXPECT_NEAR(s2 / n - (s / n) * (s / n), 1.0, 1e-4);
  }
  EXPECT_EQ(stats.batches_tracked, 1);
  EXPECT_GT(stats.mean[0], 0.2);
}

TEST(Ops, BatchNormEvalNeedsStats) {
  auto x = TD::zeros({2, 3, 4});
  auto g = TD::full({3}, 1.0), b = TD::zeros({3});
  EXPECT_THROW(batch_norm<double>(x, g, b, nullptr, false), Error);
}

TEST(Ops, ShapeErrorsNameTheOp) {
  auto a = TD::zeros({2, 3});
  auto b = TD::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
  }
  EXPECT_THROW(add(a, b), ShapeError);
  // Kernel longer than the padded input.
  EXPECT_THROW(conv1d(TD::zeros({1, 1, 4}), TD::zeros({1, 1, 7}), TD::zeros({1}), Conv1dOptions{}), ShapeError);
  EXPECT_THROW(reshape(a, {5}), ShapeError);
  EXPECT_THROW(slice(a, 1, 2, 2), ShapeError);
}

// ---------------------------------------------------------------- backward

TEST(Backward, SumOfSquares) {
  auto x = TD::from({3}, {1, 2, 3}, true);
  sum(mul(x, x)).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, SigmoidSlopeAtZero) {
  auto w = TD::scalar(0.0, true);
  auto x = TD::scalar(1.0);
  sigmoid(mul(w, x)).backward();
  EXPECT_DOUBLE_EQ(w.grad()[0], 0.25);
}

TEST(Backward, FanOutAccumulates) {
  // y = x + x + ... (n uses) has dy/dx = n.
  for (int n : {1, 2, 5}) {
    auto x = TD::scalar(0.7, true);
    TD y = x;
    for (int i = 1; i < n; ++i) y = add(y, x);
    y.backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], n);
  }
  // z = x*x + 3x: analytic sum of the three contributions.
  auto x = TD::scalar(1.5, true);
  add(mul(x, x), affine(x, 3.0, 0.0)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 1.5 + 3);
}

TEST(Backward, SecondCallAccumulates) {
  auto x = TD::from({2}, {1, -2}, true);
  auto loss = sum(mul(x, x));
  loss.backward();
  loss.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -8.0);
  x.zero_grad();
  sum(mul(x, x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Backward, UnreachableParameterGetsZeroGrad) {
  nn::Linear<double> used(3, 2), unused(3, 2);
  used.initialize(1);
  unused.initialize(2);
  for (auto& p : unused.named_parameters()) p.tensor.zero_grad();
  sum(used.forward(TD::full({4, 3}, 1.0))).backward();
  for (auto& p : unused.named_parameters())
    for (double g : p.tensor.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = TD::scalar(2.0, true);
  NoGradGuard guard;
  auto y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

// ---------------------------------------------------------------- gradcheck

TEST(Gradcheck, SumIsExact) {
  // Dyadic inputs and a power-of-two step keep the difference quotient exact.
  Rng rng(4);
  std::vector<double> v(12);
  for (auto& x : v) x = static_cast<double>(rng.uniform_int(-64, 64)) / 8.0;
  GradcheckOptions opt;
  opt.step = 0x1p-10;
  auto r = gradcheck([](const TD& x) { return sum(x); }, TD::from({3, 4}, v, true), opt);
  EXPECT_EQ(r.max_rel_error, 0.0);
  EXPECT_TRUE(r.passed);
}

TEST(Gradcheck, RejectsNonScalarAndStochastic) {
  Rng rng(5);
  EXPECT_THROW(gradcheck([](const TD& x) { return relu(x); }, random_tensor({3}, rng)), ShapeError);
  Rng drop(1);
  EXPECT_THROW(gradcheck([&](const TD& x) { return sum(dropout(x, 0.5, true, drop)); }, random_tensor({8}, rng)),
               Error);
}

TEST(Gradcheck, ConvReluLinearChain) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    auto x = random_tensor({2, 3, 12}, rng);
    auto w = random_tensor({4, 3, 3}, rng);
    auto b = random_tensor({4}, rng);
    auto lw = random_tensor({2, 24}, rng);
    auto lb = random_tensor({2}, rng);
    auto r = check(
        [](const std::vector<TD>& in) {
          auto h = relu(conv1d(in[0], in[1], in[2], Conv1dOptions::symmetric(2, 1)));
          return linear(reshape(h, {2, 24}), in[3], in[4]);
        },
        {x, w, b, lw, lb}, seed);
    EXPECT_LT(r.max_rel_error, kTol) << r.summary();
  }
}

class PrimitiveGradcheck : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradcheck, MatchesFiniteDifferences) {
  const auto cases = primitive_cases();
  const auto& pc = cases[static_cast<std::size_t>(GetParam())];
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed, static_cast<std::uint64_t>(GetParam()));
    std::vector<TD> inputs;
    for (const auto& s : pc.shapes) inputs.push_back(random_tensor(s, rng));
    const auto r = check(pc.f, inputs, seed);
    EXPECT_LT(r.max_rel_error, kTol) << pc.name << " seed " << seed << "\n" << r.summary();
  }
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradcheck,
                         ::testing::Range(0, static_cast<int>(primitive_cases().size())),
                         [](const ::testing::TestParamInfo<int>& info) {
                           return primitive_cases()[static_cast<std::size_t>(info.param)].name;
                         });

// ---------------------------------------------------------------- dropout

TEST(Dropout, InvertedScalingAndEvalIdentity) {
  Rng rng(8);
  auto x = TD::full({10000}, 1.0);
  auto y = dropout(x, 0.25, true, rng);
  double total = 0;
  int zeros = 0;
  for (double v : y.data()) {
    total += v;
    if (v == 0.0) {
      ++zeros;
    } else {
      EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
    }
  }
  EXPECT_NEAR(zeros / 10000.0, 0.25, 0.02);
  EXPECT_NEAR(total / 10000.0, 1.0, 0.03);
  auto e = dropout(x, 0.25, false, rng);
  for (double v : e.data()) EXPECT_EQ(v, 1.0);
}

// ---------------------------------------------------------------- recurrent

TEST(Recurrent, ZeroGruStaysAtZero) {
  nn::RecurrentWeights<double> w{TD::zeros({12, 3}), TD::zeros({12, 4}), TD::zeros({12}), TD::zeros({12})};
  Rng rng(1);
  auto h = TD::zeros({2, 4});
  for (int t = 0; t < 5; ++t) h = nn::gru_cell(random_tensor({2, 3}, rng, false), h, w);
  for (double v : h.data()) EXPECT_EQ(v, 0.0);
}

TEST(Recurrent, LstmStepMatchesHandComputation) {
  Rng rng(12);
  const int I = 3, H = 2;
  auto x = random_tensor({1, I}, rng, false);
  auto h0 = random_tensor({1, H}, rng, false);
  auto c0 = random_tensor({1, H}, rng, false);
  auto w_ih = random_tensor({4 * H, I}, rng, false), w_hh = random_tensor({4 * H, H}, rng, false);
  auto b_ih = random_tensor({4 * H}, rng, false), b_hh = random_tensor({4 * H}, rng, false);
  auto s = nn::lstm_cell(x, nn::LstmState<double>{h0, c0}, nn::RecurrentWeights<double>{w_ih, w_hh, b_ih, b_hh});

  auto vec = [](const TD& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
  auto h = vec(h0), c = vec(c0);
  oracle::lstm_step(vec(x), h, c, vec(w_ih), vec(w_hh), vec(b_ih), vec(b_hh));
  for (int u = 0; u < H; ++u) {
    EXPECT_NEAR(s.h.data()[u], h[u], 1e-15);
    EXPECT_NEAR(s.c.data()[u], c[u], 1e-15);
  }
}

TEST(Recurrent, MismatchedLayerSizesRejected) {
  std::vector<nn::RecurrentWeights<double>> layers{
      {TD::zeros({12, 3}), TD::zeros({12, 4}), TD::zeros({12}), TD::zeros({12})},
      {TD::zeros({15, 3}), TD::zeros({15, 5}), TD::zeros({15}), TD::zeros({15})}};
  EXPECT_THROW(nn::recurrent_sequence(nn::CellKind::Gru, TD::zeros({1, 2, 3}), layers), Error);
}

TEST(Recurrent, PaperScaleUnrollShape) {
  NoGradGuard guard;
  nn::Recurrent<float> rnn(nn::CellKind::Gru, 12, 256, 2);
  rnn.initialize(1);
  auto out = rnn.forward(Tensor<float>::zeros({2, 2048, 12}));
  EXPECT_EQ(out.outputs.shape(), (Shape{2, 2048, 256}));
  EXPECT_EQ(out.final_h.size(), 2u);
}

// ---------------------------------------------------------------- attention

TEST(Attention, SingleTokenHasUnitWeight) {
  nn::MultiheadAttention<double> mha(8, 2);
  mha.initialize(3);
  Rng rng(3);
  auto q = random_tensor({2, 1, 8}, rng, false);
  auto out = mha.forward(q, q, q);
  for (double w : out.weights.data()) EXPECT_EQ(w, 1.0);
}

TEST(Attention, IdenticalKeysAverageValues) {
  const int E = 4;
  std::vector<double> eye(E * E, 0.0);
  for (int i = 0; i < E; ++i) eye[i * E + i] = 1.0;
  auto I = [&] { return TD::from({E, E}, eye); };
  nn::AttentionWeights<double> w{I(), I(), I(), I(), TD::zeros({E}), TD::zeros({E}), TD::zeros({E}), TD::zeros({E})};
  Rng rng(4);
  auto q = random_tensor({1, 2, E}, rng, false);
  std::vector<double> key_row{0.3, -1.0, 0.5, 2.0}, kv;
  for (int t = 0; t < 5; ++t) kv.insert(kv.end(), key_row.begin(), key_row.end());
  auto k = TD::from({1, 5, E}, kv);
  auto v = random_tensor({1, 5, E}, rng, false);
  auto out = nn::multihead_attention(q, k, v, 2, w).output;
  for (int t = 0; t < 2; ++t)
    for (int e = 0; e < E; ++e) {
      double m = 0;
      for (int s = 0; s < 5; ++s) m += v.data()[s * E + e];
      EXPECT_NEAR(out.data()[t * E + e], m / 5, 1e-12);
    }
}

TEST(Attention, PaperScaleShapeAndHeadCheck) {
  NoGradGuard guard;
  nn::MultiheadAttention<float> mha(512, 4);
  mha.initialize(5);
  auto x = Tensor<float>::zeros({2, 64, 512});
  EXPECT_EQ(mha.forward(x, x, x).output.shape(), (Shape{2, 64, 512}));
  EXPECT_THROW(nn::MultiheadAttention<float>(10, 4), Error);
}
