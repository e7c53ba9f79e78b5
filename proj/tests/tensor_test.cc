#include "skewsplit/tensor.h"

#include <cmath>
#include <limits>
#include <random>

#include "grad_check.h"
#include "gtest/gtest.h"
#include "skewsplit/errors.h"
#include "skewsplit/optim.h"

namespace skewsplit {
namespace {

using testing::NumericalGradients;
using testing::RelativeError;

Tensor RandomTensor(Shape shape, std::mt19937_64& rng, bool grad = true,
                    double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(NumElements(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::FromData(std::move(shape), std::move(v), grad);
}

TEST(TensorTest, AddElementwise) {
  Tensor a = Tensor::FromData({2}, {1, 2});
  Tensor b = Tensor::FromData({2}, {3, 4});
  Tensor c = Add(a, b);
  EXPECT_EQ(c.data()[0], 4);
  EXPECT_EQ(c.data()[1], 6);
  EXPECT_FALSE(c.requires_grad());
}

TEST(TensorTest, MatMulIdentity) {
  Tensor eye = Tensor::FromData({2, 2}, {1, 0, 0, 1});
  Tensor x = Tensor::FromData({2, 1}, {3.5, -7.25});
  Tensor y = MatMul(eye, x);
  EXPECT_EQ(y.shape(), (Shape{2, 1}));
  EXPECT_EQ(y.data()[0], 3.5);
  EXPECT_EQ(y.data()[1], -7.25);
}

TEST(TensorTest, Conv2dAllOnesValidPadding) {
  Tensor img = Tensor::Full({1, 3, 3, 1}, 1.0);
  Tensor k = Tensor::Full({2, 2, 1, 1}, 1.0);
  Tensor out = Conv2d(img, k);
  ASSERT_EQ(out.shape(), (Shape{1, 2, 2, 1}));
  for (double v : out.data()) EXPECT_EQ(v, 4.0);
}

TEST(TensorTest, Conv2dStrideAndPaddingShape) {
  Tensor img = Tensor::Full({2, 16, 16, 1}, 1.0);
  Tensor k = Tensor::Full({3, 3, 1, 5}, 1.0);
  Tensor out = Conv2d(img, k, {.stride = 2, .padding = 1});
  EXPECT_EQ(out.shape(), (Shape{2, 8, 8, 5}));
  // Top-left output sees a 2x2 window of ones, interior sees 3x3.
  EXPECT_EQ(out.data()[0], 4.0);
  EXPECT_EQ(out.data()[(1 * 8 + 1) * 5], 9.0);
}

TEST(TensorTest, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::Zeros({2, 3});
  Tensor b = Tensor::Zeros({4, 2});
  try {
    MatMul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4,2]"), std::string::npos);
  }
  EXPECT_THROW(Add(Tensor::Zeros({2}), Tensor::Zeros({3})), ShapeError);
}

TEST(TensorTest, NonFiniteInputRejected) {
  Tensor a = Tensor::FromData({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  EXPECT_THROW(Relu(a), NonFiniteError);
  Tensor b = Tensor::FromData({1}, {std::numeric_limits<double>::infinity()});
  EXPECT_THROW(Add(b, b), NonFiniteError);
}

TEST(TensorTest, BackwardSquare) {
  Tensor w = Tensor::FromData({2}, {1, -2}, true);
  Backward(Sum(Mul(w, w)));
  EXPECT_DOUBLE_EQ(w.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], -4.0);
}

TEST(TensorTest, BackwardSigmoidAtZero) {
  Tensor x = Tensor::Scalar(0.0, true);
  Tensor y = Sigmoid(x);
  EXPECT_DOUBLE_EQ(y.item(), 0.5);
  Backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(TensorTest, BackwardRejectsNonScalar) {
  Tensor w = Tensor::FromData({2}, {1, 2}, true);
  EXPECT_THROW(Backward(Scale(w, 2.0)), ShapeError);
}

TEST(TensorTest, GradientsAccumulateAcrossUses) {
  Tensor w = Tensor::Scalar(3.0, true);
  // y = w*w + w -> dy/dw = 2w + 1 = 7.
  Backward(Add(Mul(w, w), w));
  EXPECT_DOUBLE_EQ(w.grad()[0], 7.0);
  // A second backward adds on top.
  Backward(Scale(w, 2.0));
  EXPECT_DOUBLE_EQ(w.grad()[0], 9.0);
}

TEST(TensorTest, TapeVisitsSharedNodeOnce) {
  Tensor w = Tensor::FromData({3}, {1, 2, 3}, true);
  Tensor h = Relu(w);
  Tensor loss = Add(Sum(h), Sum(Mul(h, h)));
  GradientTape tape = GradientTape::Record(loss);
  // w, h, sum(h), mul, sum(mul), add.
  EXPECT_EQ(tape.size(), 6u);
  tape.Replay(loss);
  EXPECT_DOUBLE_EQ(w.grad()[2], 1.0 + 2 * 3.0);
}

TEST(TensorTest, MaxMinTieBreakLowestIndex) {
  Tensor x = Tensor::FromData({1, 4}, {2, 5, 5, 1}, true);
  Tensor m = Max(x, 1);
  EXPECT_EQ(m.item(), 5.0);
  Backward(Sum(m));
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 0.0);
  Tensor y = Tensor::FromData({3}, {1, 1, 4}, true);
  Backward(Sum(Min(y, 0)));
  EXPECT_EQ(y.grad()[0], 1.0);
  EXPECT_EQ(y.grad()[1], 0.0);
}

TEST(TensorTest, SelectAndConcatRoundTrip) {
  std::mt19937_64 rng(3);
  Tensor f = RandomTensor({2, 3, 3, 5}, rng, false);
  const std::vector<int> head{0, 1}, tail{2, 3, 4};
  Tensor back = ConcatChannels(SelectChannels(f, head), SelectChannels(f, tail));
  ASSERT_EQ(back.shape(), f.shape());
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(back.at(i), f.at(i));
}

TEST(TensorTest, SgdStepExamples) {
  Tensor p = Tensor::Scalar(1.0, true);
  Backward(p);  // grad = 1
  SgdStep({&p}, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(p.item(), 0.9);
  EXPECT_EQ(p.grad()[0], 0.0);

  Tensor q = Tensor::Scalar(1.0, true);
  Backward(Scale(q, 0.0));  // grad = 0
  SgdStep({&q}, 0.1, 5e-4);
  EXPECT_DOUBLE_EQ(q.item(), 0.99995);

  Tensor r = Tensor::Scalar(2.0, true);
  Backward(Scale(r, 0.5));  // grad = 0.5
  SgdStep({&r}, 0.1, 5e-4);
  // 2 - 0.1 * (0.5 + 5e-4 * 2) = 1.9499
  EXPECT_NEAR(r.item(), 1.9499, 1e-12);
}

TEST(TensorTest, SgdStepMissingGradThrows) {
  Tensor p = Tensor::Scalar(1.0, true);
  EXPECT_THROW(SgdStep({&p}, 0.1, 0.0), Error);
}

// Each differentiable op against central differences.
TEST(TensorTest, OpGradientsMatchFiniteDifferences) {
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor a = RandomTensor({3, 4}, rng);
    Tensor b = RandomTensor({3, 4}, rng);
    Tensor m = RandomTensor({4, 2}, rng);
    Tensor img = RandomTensor({2, 5, 5, 2}, rng);
    Tensor ker = RandomTensor({3, 3, 2, 3}, rng, true, 0.5);
    Tensor bias = RandomTensor({3}, rng);
    Tensor s = Tensor::Scalar(1.5 + static_cast<double>(rng() % 100) / 100.0, true);
    const std::vector<int> labels{0, 1, 1};
    const std::vector<int> chans{2, 0};
    auto f = [&]() {
      Tensor t1 = Div(Mul(Sigmoid(a), Add(b, s)), s);
      Tensor t2 = Softmax(MatMul(Sub(a, Abs(b)), m));
      Tensor conv = AddBias(Conv2d(img, ker, {.stride = 2, .padding = 1}), bias);
      Tensor pooled = GlobalAveragePool(Sigmoid(conv));
      Tensor picked = SelectChannels(pooled, chans);
      Tensor ce = SoftmaxCrossEntropy(MatMul(a, m), labels);
      Tensor norm = NormalizeRows(AddScalar(Abs(b), 0.1));
      Tensor mx = Max(Reshape(t1, {12}));
      return Add(Add(Add(Sum(t1), Mean(Scale(t2, 3.0))),
                     Add(Sum(Mul(picked, picked)), ce)),
                 Add(Sum(Mul(norm, a)), Add(mx, Sum(Min(t2, 1)))));
    };
    std::vector<Tensor*> params{&a, &b, &m, &img, &ker, &bias, &s};
    Backward(f());
    auto numeric = NumericalGradients([&] { return f().item(); }, params);
    for (std::size_t p = 0; p < params.size(); ++p) {
      EXPECT_LT(RelativeError(params[p]->grad(), numeric[p]), 1e-4)
          << "seed " << seed << " param " << p;
    }
  }
}

TEST(TensorTest, DetachedForwardIsBitwiseIdentical) {
  std::mt19937_64 rng(11);
  Tensor x = RandomTensor({2, 6, 6, 1}, rng, false);
  Tensor k = RandomTensor({3, 3, 1, 4}, rng, true);
  Tensor taped = Relu(Conv2d(x, k, {.stride = 1, .padding = 1}));
  Tensor plain = Relu(Conv2d(x, k.Detach(), {.stride = 1, .padding = 1}));
  EXPECT_TRUE(taped.requires_grad());
  EXPECT_FALSE(plain.requires_grad());
  ASSERT_EQ(taped.size(), plain.size());
  for (std::size_t i = 0; i < taped.size(); ++i) {
    EXPECT_EQ(taped.at(i), plain.at(i));
  }
}

TEST(TensorTest, BackwardIsDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(5);
    Tensor x = RandomTensor({4, 3}, rng);
    Tensor w = RandomTensor({3, 3}, rng);
    Backward(SoftmaxCrossEntropy(MatMul(Relu(x), w), std::vector<int>{0, 1, 2, 0}));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace skewsplit
