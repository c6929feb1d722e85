// Copyright 2026 The qsn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include "qsn/error.hpp"
#include "qsn/nn.hpp"
#include "test_util.hpp"

namespace qsn::nn {
namespace {

using M = Mat<double>;

double Sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

using testing::CodeOf;

// ---- dense -------------------------------------------------------------------

TEST(Dense, WorkedExamples) {
  M w(2, 2), b(2, 1), x(2, 1);
  w << 1, 2, 3, 4;
  b << 0.5, -20;
  x << 1, 1;
  const M y = Dense<double>(x, w, b, Activation::kNone);
  EXPECT_DOUBLE_EQ(y(0), 3.5);
  EXPECT_DOUBLE_EQ(y(1), -13.0);
  const M r = Dense<double>(x, w, b, Activation::kRelu);
  EXPECT_DOUBLE_EQ(r(0), 3.5);
  EXPECT_DOUBLE_EQ(r(1), 0.0);
  const M s = Dense<double>(M::Zero(2, 1), w, M::Zero(2, 1), Activation::kSigmoid);
  EXPECT_DOUBLE_EQ(s(0), 0.5);
  EXPECT_EQ(CodeOf([&] { Dense<double>(M::Zero(3, 1), w, b, Activation::kNone); }),
            ErrorCode::kShapeMismatch);
}

TEST(Dense, QuadraticLossHandGradient) {
  // L = 0.5 * |W x + b|^2, so dL/dW = y x^T, dL/db = y, dL/dx = W^T y.
  DenseLayer<double> layer("d", 2, 2);
  layer.w.value << 1, -1, 2, 0.5;
  layer.b.value << 0.1, -0.2;
  M x(2, 1);
  x << 0.3, -0.7;
  const M y = layer.Forward(x);
  const M dx = layer.Backward(x, y);
  const double y0 = 1 * 0.3 - 1 * -0.7 + 0.1, y1 = 2 * 0.3 + 0.5 * -0.7 - 0.2;
  EXPECT_NEAR(layer.w.grad(0, 0), y0 * 0.3, 1e-15);
  EXPECT_NEAR(layer.w.grad(0, 1), y0 * -0.7, 1e-15);
  EXPECT_NEAR(layer.w.grad(1, 0), y1 * 0.3, 1e-15);
  EXPECT_NEAR(layer.w.grad(1, 1), y1 * -0.7, 1e-15);
  EXPECT_NEAR(layer.b.grad(0), y0, 1e-15);
  EXPECT_NEAR(layer.b.grad(1), y1, 1e-15);
  EXPECT_NEAR(dx(0), 1 * y0 + 2 * y1, 1e-15);
  EXPECT_NEAR(dx(1), -1 * y0 + 0.5 * y1, 1e-15);
}

// ---- batch norm ------------------------------------------------------------------

TEST(BatchNorm, TrainModeNormalizesAndTracksStats) {
  BatchNorm<double> bn("bn", 2);
  M x(2, 4);
  x << 1, 2, 3, 4, 5, 5, 5, 5;
  BatchNorm<double>::Cache cache;
  const M y = bn.Forward(x, Mode::kTrain, 0.9, &cache);
  EXPECT_NEAR(y.row(0).mean(), 0.0, 1e-12);
  EXPECT_NEAR(y.row(0).squaredNorm() / 4, 1.25 / (1.25 + 1e-5), 1e-12);
  EXPECT_EQ(y.row(1).cwiseAbs().maxCoeff(), 0.0);  // constant feature
  EXPECT_NEAR(bn.running_mean(0), 0.1 * 2.5, 1e-12);
  EXPECT_NEAR(bn.running_var(0), 0.9 + 0.1 * 1.25, 1e-12);
  EXPECT_NEAR(bn.running_mean(1), 0.5, 1e-12);
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
  BatchNorm<double> bn("bn", 1);
  bn.running_mean << 2.0;
  bn.running_var << 4.0;
  bn.gamma.value << 3.0;
  bn.beta.value << 1.0;
  M x(1, 2);
  x << 2.0, 4.0;
  const M y = bn.Forward(x, Mode::kEval, 0.9, nullptr);
  EXPECT_DOUBLE_EQ(y(0), 1.0);
  EXPECT_NEAR(y(1), 1.0 + 3.0 * 2.0 / std::sqrt(4.0 + 1e-5), 1e-12);
  // A single example is fine in eval mode but rejected in train mode.
  EXPECT_NO_THROW(bn.Forward(M::Ones(1, 1), Mode::kEval, 0.9, nullptr));
  EXPECT_EQ(CodeOf([&] { bn.Forward(M::Ones(1, 1), Mode::kTrain, 0.9, nullptr); }),
            ErrorCode::kBatchTooSmall);
}

TEST(BatchNorm, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  BatchNorm<double> bn("bn", 3);
  InitUniform(bn.gamma, 1.0, rng);
  InitUniform(bn.beta, 1.0, rng);
  M x(3, 5), r(3, 5);
  for (long i = 0; i < x.size(); ++i) {
    x(i) = UniformRange(rng, -2, 2);
    r(i) = UniformRange(rng, -1, 1);
  }
  // L = sum(r .* BN(x)), so dL/dy = r.
  auto loss = [&](const M& in) { return (r.array() * bn.Forward(in, Mode::kTrain, 0.5, nullptr).array()).sum(); };
  BatchNorm<double>::Cache cache;
  bn.Forward(x, Mode::kTrain, 0.5, &cache);
  bn.gamma.ZeroGrad();
  bn.beta.ZeroGrad();
  const M dx = bn.Backward(cache, r);
  const double h = 1e-6;
  for (long i = 0; i < x.size(); ++i) {
    M a = x, b = x;
    a(i) += h;
    b(i) -= h;
    EXPECT_NEAR(dx(i), (loss(a) - loss(b)) / (2 * h), 1e-7);
  }
  for (long f = 0; f < 3; ++f) {
    const double g0 = bn.gamma.value(f);
    bn.gamma.value(f) = g0 + h;
    const double lp = loss(x);
    bn.gamma.value(f) = g0 - h;
    const double lm = loss(x);
    bn.gamma.value(f) = g0;
    EXPECT_NEAR(bn.gamma.grad(f), (lp - lm) / (2 * h), 1e-7);
    EXPECT_NEAR(bn.beta.grad(f), r.row(f).sum(), 1e-12);
  }
}

// ---- dropout -----------------------------------------------------------------------

TEST(Dropout, IdentityCases) {
  Rng rng(1);
  const M x = M::Random(4, 6);
  EXPECT_EQ(Dropout<double>(x, 0.0, Mode::kTrain, rng), x);
  EXPECT_EQ(Dropout<double>(x, 0.5, Mode::kEval, rng), x);
  EXPECT_EQ(CodeOf([&] { Dropout<double>(x, 1.0, Mode::kTrain, rng); }), ErrorCode::kInvalidConfig);
}

TEST(Dropout, PreservesMeanAndDropRate) {
  Rng rng(2);
  const M x = M::Ones(100, 1000);
  M mask;
  const M y = Dropout<double>(x, 0.2, Mode::kTrain, rng, &mask);
  EXPECT_NEAR(y.mean(), 1.0, 0.02);
  const double zeros = static_cast<double>((y.array() == 0.0).count()) / y.size();
  EXPECT_NEAR(zeros, 0.2, 0.01);
  EXPECT_EQ(y, x.cwiseProduct(mask));
}

// ---- lstm -------------------------------------------------------------------------

TEST(Lstm, ZeroWeightsGiveZeroOutput) {
  LstmLayer<double> l("l", 3, 4);
  const M h = Lstm<double>(l, M::Random(3, 5 * 2), 5, 2, false);
  EXPECT_EQ(h.rows(), 4);
  EXPECT_EQ(h.cols(), 10);
  EXPECT_EQ(h.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Lstm, HandComputedStep) {
  LstmLayer<double> l("l", 1, 1);
  l.wx.value << 0.5, -0.3, 0.8, 0.2;  // input, forget, cell, output
  l.wh.value << 0.1, 0.4, -0.6, 0.7;
  l.b.value << 0.0, 1.0, 0.1, -0.2;
  M x(1, 2);
  x << 1.5, -1.0;
  const M h = Lstm(l, x, 2, 1, false);
  // Step 0 from zero state.
  const double i0 = Sig(0.75), g0 = std::tanh(1.2 + 0.1), o0 = Sig(0.3 - 0.2);
  const double c0 = i0 * g0, h0 = o0 * std::tanh(c0);
  EXPECT_NEAR(h(0, 0), h0, 1e-15);
  const double i1 = Sig(-0.5 + 0.1 * h0), f1 = Sig(0.3 + 0.4 * h0 + 1.0);
  const double g1 = std::tanh(-0.8 - 0.6 * h0 + 0.1), o1 = Sig(-0.2 + 0.7 * h0 - 0.2);
  const double c1 = f1 * c0 + i1 * g1;
  EXPECT_NEAR(h(0, 1), o1 * std::tanh(c1), 1e-15);
  EXPECT_NEAR(Lstm(l, x, 2, 1, true)(0, 0), o1 * std::tanh(c1), 1e-15);
}

TEST(Lstm, ConstantInputConverges) {
  // Small recurrent weights make the state map contractive, so a constant
  // input drives the hidden state to a fixed point.
  Rng rng(4);
  LstmLayer<double> l("l", 2, 3);
  InitUniform(l.wx, 0.5, rng);
  InitUniform(l.wh, 0.2, rng);
  const int steps = 200;
  M x(2, steps);
  x.row(0).setConstant(0.7);
  x.row(1).setConstant(-0.4);
  const M h = Lstm(l, x, steps, 1, false);
  EXPECT_LT((h.col(steps - 1) - h.col(steps - 2)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Lstm, BatchColumnsAreIndependent) {
  Rng rng(6);
  LstmLayer<double> l("l", 2, 3);
  l.Init(rng);
  const int steps = 20;
  M x = M::Random(2, steps * 3);
  const M all = Lstm(l, x, steps, 3, false);
  M one(2, steps);
  for (int t = 0; t < steps; ++t) one.col(t) = x.col(t * 3 + 1);
  const M single = Lstm(l, one, steps, 1, false);
  for (int t = 0; t < steps; ++t) EXPECT_LT((all.col(t * 3 + 1) - single.col(t)).norm(), 1e-14);
}

TEST(Lstm, BackwardMatchesFiniteDifferences) {
  // Spans more than one internal time block.
  Rng rng(8);
  const int d = 2, hid = 3, steps = 37, batch = 2;
  LstmLayer<double> l("l", d, hid);
  l.Init(rng);
  M x(d, steps * batch), r(hid, steps * batch);
  for (long i = 0; i < x.size(); ++i) x(i) = UniformRange(rng, -1, 1);
  for (long i = 0; i < r.size(); ++i) r(i) = UniformRange(rng, -1, 1);
  auto loss = [&](const M& in) { return (r.array() * Lstm(l, in, steps, batch, false).array()).sum(); };
  LstmLayer<double>::Cache cache;
  l.Forward(x, steps, batch, cache);
  LstmLayer<double>::Grads g;
  g.Reset(l);
  M dx;
  l.Backward(cache, r, false, g, &dx);
  const double h = 1e-6;
  auto check = [&](Param<double>& p, const M& grad) {
    for (long i = 0; i < p.value.size(); i += 3) {
      const double v = p.value(i);
      p.value(i) = v + h;
      const double lp = loss(x);
      p.value(i) = v - h;
      const double lm = loss(x);
      p.value(i) = v;
      ASSERT_NEAR(grad(i), (lp - lm) / (2 * h), 1e-6 * std::max(1.0, std::abs(grad(i)))) << p.name << " " << i;
    }
  };
  check(l.wx, g.dwx);
  check(l.wh, g.dwh);
  check(l.b, g.db);
  for (long i = 0; i < x.size(); i += 5) {
    M a = x, b = x;
    a(i) += h;
    b(i) -= h;
    ASSERT_NEAR(dx(i), (loss(a) - loss(b)) / (2 * h), 1e-6);
  }
  // Last-state-only gradient equals the full gradient with zeros elsewhere.
  M r_last = M::Zero(hid, steps * batch);
  r_last.rightCols(batch) = r.rightCols(batch);
  LstmLayer<double>::Grads g_full, g_last;
  g_full.Reset(l);
  g_last.Reset(l);
  l.Backward(cache, r_last, false, g_full, nullptr);
  l.Backward(cache, M(r.rightCols(batch)), true, g_last, nullptr);
  EXPECT_LT((g_full.dwx - g_last.dwx).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((g_full.dwh - g_last.dwh).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Lstm, ShapeMismatch) {
  LstmLayer<double> l("l", 2, 3);
  EXPECT_EQ(CodeOf([&] { Lstm<double>(l, M::Zero(3, 4), 4, 1, false); }), ErrorCode::kShapeMismatch);
  EXPECT_EQ(CodeOf([&] { Lstm<double>(l, M::Zero(2, 5), 4, 1, false); }), ErrorCode::kShapeMismatch);
}

// ---- triplet loss ---------------------------------------------------------------------

TEST(TripletLoss, WorkedExamples) {
  EXPECT_DOUBLE_EQ(TripletLoss(0.0, 1.0, 0.2), 0.0);
  EXPECT_NEAR(TripletLoss(1.0, 1.0, 0.2), 0.2, 1e-15);
  EXPECT_NEAR(TripletLoss(1.0, 0.5, 0.2), 0.95, 1e-15);
  EXPECT_FALSE(TripletActive(0.0, 1.0, 0.2));
  EXPECT_TRUE(TripletActive(1.0, 1.0, 0.2));
}

TEST(TripletLoss, MonotoneInDistances) {
  for (double dp = 0.0; dp <= 2.0; dp += 0.05) {
    for (double dn = 0.0; dn <= 2.0; dn += 0.05) {
      const double l = TripletLoss(dp, dn, 0.2);
      ASSERT_GE(l, 0.0);
      ASSERT_GE(TripletLoss(dp + 0.05, dn, 0.2), l);
      ASSERT_LE(TripletLoss(dp, dn + 0.05, 0.2), l);
    }
  }
}

// ---- optimizer ---------------------------------------------------------------------------

TEST(Adam, LearningRateSchedule) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(LearningRate(cfg, 0), 1e-3);
  EXPECT_DOUBLE_EQ(LearningRate(cfg, 4999), 1e-3);
  EXPECT_DOUBLE_EQ(LearningRate(cfg, 5000), 0.9e-3);
  EXPECT_NEAR(LearningRate(cfg, 10000), 0.81e-3, 1e-18);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Param<double> p("p", 2, 2);
  p.value << 1, 2, 3, 4;
  const M before = p.value;
  Adam<double> adam(TrainConfig{});
  for (long s = 0; s < 5; ++s) adam.Step({&p}, s);
  EXPECT_EQ(p.value, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Param<double> p("p", 1, 1);
  p.value << 1.0;
  p.grad << 0.37;
  Adam<double> adam(TrainConfig{});
  adam.Step({&p}, 0);
  // Bias-corrected m/sqrt(v) equals sign(g) on the first step.
  EXPECT_NEAR(p.value(0), 1.0 - 1e-3 * 0.37 / (0.37 + 1e-8), 1e-15);
}

TEST(Adam, MinimizesSquare) {
  TrainConfig cfg;
  cfg.lr0 = 0.05;
  Param<double> p("w", 1, 1);
  p.value << 3.0;
  Adam<double> adam(cfg);
  for (long s = 0; s < 2000; ++s) {
    p.grad(0) = 2 * p.value(0);
    adam.Step({&p}, s);
  }
  EXPECT_LT(std::abs(p.value(0)), 1e-2);
}

TEST(Adam, NonFiniteGradientRejectedBeforeUpdate) {
  Param<double> a("a", 1, 1), b("b", 1, 1);
  a.value << 1.0;
  a.grad << 1.0;
  b.grad << std::numeric_limits<double>::quiet_NaN();
  Adam<double> adam(TrainConfig{});
  try {
    adam.Step({&a, &b}, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFiniteGradient);
    EXPECT_NE(std::string(e.what()).find('b'), std::string::npos);
  }
  EXPECT_EQ(a.value(0), 1.0);
}

TEST(TrainConfig, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(Validate(cfg));
  cfg.margin_alpha = 0.0;
  EXPECT_EQ(CodeOf([&] { Validate(cfg); }), ErrorCode::kInvalidConfig);
  cfg = TrainConfig{};
  cfg.dropout_p = 1.0;
  EXPECT_EQ(CodeOf([&] { Validate(cfg); }), ErrorCode::kInvalidConfig);
  cfg = TrainConfig{};
  cfg.decay_factor = 1.5;
  EXPECT_EQ(CodeOf([&] { Validate(cfg); }), ErrorCode::kInvalidConfig);
}

}  // namespace
}  // namespace qsn::nn
