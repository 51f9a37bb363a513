#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ushl/autodiff.hpp"
#include "ushl/errors.hpp"
#include "ushl/gradcheck.hpp"
#include "ushl/skeleton.hpp"

using namespace ushl;
using ad::Tape;
using ad::Var;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// sum(f(x) * R) for a fixed random R, so every output element matters.
Var<double> probe(Tape<double>& tape, const Var<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(y, tape.constant(random_tensor(y.shape(), rng))));
}

void expect_gradients(const Objective& f, std::vector<NamedTensor<double>> params) {
  const auto report = check_gradients(f, std::move(params), {1e-5, 1e-5, 1e-6});
  for (const auto& p : report.params) {
    EXPECT_LE(p.max_rel_error, 1e-5) << p.name;
  }
  EXPECT_GT(report.checked, 0u);
}

}  // namespace

TEST(Autodiff, SoftmaxOfZerosIsUniform) {
  Tape<float> tape;
  auto s = ad::softmax(tape.constant(Tensor<float>({3}, 0.0f)), 0);
  for (float v : s.value().values()) EXPECT_NEAR(v, 1.0f / 3.0f, 1e-7);
}

TEST(Autodiff, IdentityMatmul) {
  std::mt19937_64 rng(1);
  Tape<double> tape;
  Tensor<double> eye({3, 3}, 0.0);
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  const auto X = random_tensor({3, 5}, rng);
  auto y = ad::matmul(tape.constant(eye), tape.constant(X));
  EXPECT_EQ(y.value(), X);
}

TEST(Autodiff, Conv3dOnesKernelSumsTo27) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 1, 3, 3, 3}, 1.0));
  auto w = tape.constant(Tensor<double>({1, 1, 3, 3, 3}, 1.0));
  auto y = ad::conv3d(x, w, {});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1, 1}));
  EXPECT_EQ(y.value()[0], 27.0);
}

TEST(Autodiff, Conv3dMatchesDirectSummation) {
  std::mt19937_64 rng(2);
  Tape<double> tape;
  const auto X = random_tensor({2, 2, 4, 5, 5}, rng);
  const auto W = random_tensor({3, 2, 3, 3, 3}, rng);
  ad::Conv3dOptions opt;
  opt.stride = {1, 2, 2};
  opt.pad = {1, 1, 1};
  auto y = ad::conv3d(tape.constant(X), tape.constant(W), opt);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 4, 3, 3}));
  auto at = [&](std::size_t n, std::size_t c, long t, long h, long w) {
    if (t < 0 || h < 0 || w < 0 || t >= 4 || h >= 5 || w >= 5) return 0.0;
    return X[(((n * 2 + c) * 4 + t) * 5 + h) * 5 + w];
  };
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t co = 0; co < 3; ++co)
      for (long t = 0; t < 4; ++t)
        for (long h = 0; h < 3; ++h)
          for (long w = 0; w < 3; ++w) {
            double acc = 0;
            for (std::size_t ci = 0; ci < 2; ++ci)
              for (long a = 0; a < 3; ++a)
                for (long b = 0; b < 3; ++b)
                  for (long c = 0; c < 3; ++c)
                    acc += W[(((co * 2 + ci) * 3 + a) * 3 + b) * 3 + c] *
                           at(n, ci, t + a - 1, 2 * h + b - 1, 2 * w + c - 1);
            EXPECT_NEAR(y.value()[(((n * 3 + co) * 4 + t) * 3 + h) * 3 + w], acc, 1e-12);
          }
}

TEST(Autodiff, SumGradientIsOnes) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({5}, 2.0));
  const auto g = tape.backward(ad::sum(x));
  EXPECT_EQ(g[x], Tensor<double>({5}, 1.0));
}

TEST(Autodiff, SigmoidGradientAtZero) {
  Tape<double> tape;
  auto w = tape.variable(Tensor<double>({1}, 0.0));
  const auto g = tape.backward(ad::sum(ad::sigmoid(w)));
  EXPECT_DOUBLE_EQ(g[w][0], 0.25);
}

TEST(Autodiff, NonScalarRootIsRejected) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({2}, 1.0));
  EXPECT_THROW(tape.backward(x), ContractViolation);
}

TEST(Autodiff, ShapeMismatchNamesBothShapes) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}, 1.0));
  auto b = tape.constant(Tensor<double>({4, 2}, 1.0));
  try {
    ad::matmul(a, b);
    FAIL() << "expected a contract violation";
  } catch (const ContractViolation& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 2]"), std::string::npos) << msg;
  }
}

TEST(Autodiff, NonFiniteOutputIsNumericFault) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1}, 0.0));
  try {
    ad::log(x);
    FAIL() << "expected a numeric fault";
  } catch (const NumericFault& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
  }
}

TEST(Autodiff, NodesAreTopologicallyOrdered) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({3}, 1.0));
  auto y = ad::relu(ad::scale(x, 2.0));
  auto z = ad::sum(ad::mul(y, x));
  EXPECT_LT(x.id(), y.id());
  EXPECT_LT(y.id(), z.id());
  EXPECT_EQ(tape.size(), z.id() + 1);
}

TEST(Autodiff, SoftmaxSumsToOneAndIgnoresShifts) {
  std::mt19937_64 rng(3);
  Tape<double> tape;
  const auto X = random_tensor({4, 6}, rng, -5, 5);
  Tensor<double> shifted = X;
  for (auto& v : shifted.values()) v += 7.5;
  for (std::size_t axis : {0u, 1u}) {
    auto a = ad::softmax(tape.constant(X), axis);
    auto b = ad::softmax(tape.constant(shifted), axis);
    for (std::size_t i = 0; i < X.size(); ++i) EXPECT_NEAR(a.value()[i], b.value()[i], 1e-6);
    if (axis == 1) {
      for (std::size_t r = 0; r < 4; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 6; ++c) s += a.value()[r * 6 + c];
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST(Autodiff, AdjointsAreLinear) {
  std::mt19937_64 rng(4);
  const auto X = random_tensor({3, 4}, rng);
  const auto W = random_tensor({4, 2}, rng);
  auto build = [&](Tape<double>& tape, int which) {
    auto x = tape.variable(X);
    auto w = tape.variable(W);
    auto h = ad::sigmoid(ad::matmul(x, w));
    auto r1 = ad::sum(h);
    auto r2 = ad::sum(ad::mul(h, h));
    Var<double> root = which == 0 ? r1 : which == 1 ? r2 : ad::add(r1, r2);
    return std::make_pair(x, tape.backward(root));
  };
  Tape<double> t1, t2, t3;
  auto [x1, g1] = build(t1, 0);
  auto [x2, g2] = build(t2, 1);
  auto [x3, g3] = build(t3, 2);
  for (std::size_t i = 0; i < X.size(); ++i) EXPECT_NEAR(g3[x3][i], g1[x1][i] + g2[x2][i], 1e-12);
}

TEST(Autodiff, UnreachedLeafGetsZeroGradient) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({2}, 1.0));
  auto unused = tape.variable(Tensor<double>({3}, 1.0));
  const auto g = tape.backward(ad::sum(x));
  EXPECT_EQ(g[unused], Tensor<double>({3}, 0.0));
}

// Finite-difference checks, one per primitive --------------------------------

class PrimitiveGradients : public ::testing::Test {
 protected:
  std::mt19937_64 rng{11};
};

TEST_F(PrimitiveGradients, Matmul) {
  expect_gradients([](auto& t, auto p) { return probe(t, ad::matmul(p[0], p[1]), 1); },
                   {{"a", random_tensor({3, 4}, rng)}, {"b", random_tensor({4, 2}, rng)}});
}

TEST_F(PrimitiveGradients, Linear) {
  expect_gradients([](auto& t, auto p) { return probe(t, ad::linear(p[0], p[1], p[2]), 2); },
                   {{"x", random_tensor({5, 3}, rng)}, {"w", random_tensor({3, 2}, rng)},
                    {"b", random_tensor({2}, rng)}});
}

TEST_F(PrimitiveGradients, Conv3dStridedPadded) {
  ad::Conv3dOptions opt;
  opt.stride = {1, 2, 2};
  opt.pad = {1, 1, 1};
  expect_gradients([opt](auto& t, auto p) { return probe(t, ad::conv3d(p[0], p[1], opt), 3); },
                   {{"x", random_tensor({2, 2, 3, 4, 4}, rng)}, {"w", random_tensor({3, 2, 3, 3, 3}, rng)}});
}

TEST_F(PrimitiveGradients, BatchnormTrainAndEval) {
  const ad::BatchStats<double> running{random_tensor({3}, rng), random_tensor({3}, rng, 0.5, 2.0)};
  for (auto mode : {ad::NormMode::kTrain, ad::NormMode::kEval}) {
    expect_gradients(
        [&, mode](auto& t, auto p) {
          return probe(t, ad::batchnorm3d(p[0], p[1], p[2], mode, running, 1e-5,
                                            static_cast<ad::BatchStats<double>*>(nullptr)),
                       4);
        },
        {{"x", random_tensor({2, 3, 2, 2, 2}, rng)}, {"gamma", random_tensor({3}, rng)},
         {"beta", random_tensor({3}, rng)}});
  }
}

TEST_F(PrimitiveGradients, Elementwise) {
  expect_gradients(
      [](auto& t, auto p) {
        auto s = ad::sigmoid(p[0]);
        auto v = ad::add(ad::mul(s, p[1]), ad::sub(p[1], ad::scale(p[0], 0.3)));
        return probe(t, ad::add_scalar(ad::relu(v), 0.1), 5);
      },
      {{"a", random_tensor({4, 3}, rng)}, {"b", random_tensor({4, 3}, rng)}});
}

TEST_F(PrimitiveGradients, LogAndClamp) {
  expect_gradients([](auto& t, auto p) { return probe(t, ad::log(ad::clamp(p[0], 0.2, 0.8)), 6); },
                   {{"x", random_tensor({10}, rng, 0.05, 0.95)}});
}

TEST_F(PrimitiveGradients, SoftmaxBothAxes) {
  for (std::size_t axis : {0u, 1u}) {
    expect_gradients([axis](auto& t, auto p) { return probe(t, ad::softmax(p[0], axis), 7); },
                     {{"x", random_tensor({3, 5}, rng, -2, 2)}});
  }
}

TEST_F(PrimitiveGradients, ConcatSumMean) {
  expect_gradients(
      [](auto& t, auto p) {
        std::vector<Var<double>> xs{p[0], p[1]};
        auto c = ad::concat<double>(xs, 1);
        return ad::add(probe(t, ad::mean_axis(c, 0), 8), ad::add(ad::mean(p[0]), ad::sum(ad::mul(p[1], p[1]))));
      },
      {{"a", random_tensor({3, 2}, rng)}, {"b", random_tensor({3, 4}, rng)}});
}

TEST_F(PrimitiveGradients, MaskedSelect) {
  const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1};
  expect_gradients([&](auto& t, auto p) { return probe(t, ad::masked_select(p[0], mask), 9); },
                   {{"x", random_tensor({6}, rng)}});
}

TEST_F(PrimitiveGradients, GraphConv) {
  const auto A = skeleton::normalized_adjacency<double>();
  expect_gradients([&](auto& t, auto p) { return probe(t, ad::graph_conv(p[0], A, p[1]), 10); },
                   {{"x", random_tensor({2, 17, 3}, rng)}, {"w", random_tensor({3, 4}, rng)}});
}

TEST_F(PrimitiveGradients, WeightedSumAndScaleRows) {
  expect_gradients(
      [](auto& t, auto p) {
        auto pooled = ad::weighted_sum(p[0], p[1]);  // [2, 4]
        return probe(t, ad::scale_rows(pooled, p[2]), 11);
      },
      {{"c", random_tensor({2, 3}, rng)}, {"x", random_tensor({2, 3, 4}, rng)}, {"w", random_tensor({2}, rng)}});
}

TEST_F(PrimitiveGradients, ReshapePermute) {
  const std::vector<std::size_t> perm{2, 0, 1};
  expect_gradients(
      [&](auto& t, auto p) { return probe(t, ad::permute(ad::reshape(p[0], Shape{2, 3, 4}), perm), 12); },
      {{"x", random_tensor({6, 4}, rng)}});
}

TEST_F(PrimitiveGradients, Slice) {
  expect_gradients(
      [](auto& t, auto p) {
        auto a = ad::slice(p[0], 0, 1, 3);
        auto b = ad::slice(p[0], 1, 2, 4);
        return ad::add(probe(t, a, 13), probe(t, b, 14));
      },
      {{"x", random_tensor({3, 4, 2}, rng)}});
}

TEST(Autodiff, SliceCopiesTheRequestedRange) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({2, 3}, {0, 1, 2, 3, 4, 5}));
  const auto s = ad::slice(x, 1, 1, 3).value();
  EXPECT_EQ(s.shape(), (Shape{2, 2}));
  EXPECT_EQ(std::vector<double>(s.values().begin(), s.values().end()), (std::vector<double>{1, 2, 4, 5}));
  EXPECT_THROW(ad::slice(x, 0, 1, 3), ContractViolation);
}
