// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "support/op_cases.hpp"
#include "tpd/autodiff/adam.hpp"
#include "tpd/autodiff/gradcheck.hpp"
#include "tpd/autodiff/ops.hpp"

using namespace tpd;
using namespace tpd::ad;

TEST(Ops, MatmulIdentityReturnsOperand) {
  Tape<float> tape;
  Tensor<float> eye(Shape{3, 3});
  eye[0] = eye[4] = eye[8] = 1.0f;
  Tensor<float> a(Shape{3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto y = matmul(tape.constant(eye), tape.constant(a));
  EXPECT_EQ(y.value(), a);
}

TEST(Ops, SoftplusAtZeroIsLn2) {
  Tape<double> tape;
  auto y = softplus(tape.constant(Tensor<double>::scalar(0.0)));
  EXPECT_NEAR(y.value().item(), std::log(2.0), 1e-12);
}

TEST(Ops, SoftplusIsStableForLargeInputs) {
  Tape<float> tape;
  auto y = softplus(tape.constant(Tensor<float>(Shape{2}, {100.0f, -100.0f})));
  EXPECT_FLOAT_EQ(y.value()[0], 100.0f);
  EXPECT_GE(y.value()[1], 0.0f);
  EXPECT_TRUE(y.value().all_finite());
}

TEST(Ops, ConvAllOnesValidPadding) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>(Shape{1, 1, 3, 3}, 1.0f));
  auto w = tape.constant(Tensor<float>(Shape{1, 1, 3, 3}, 1.0f));
  auto y = conv2d(x, w, Var<float>{}, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(y.value()[0], 9.0f);
}

TEST(Ops, ConvStrideTwoHalvesResolution) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>(Shape{2, 3, 8, 8}, 1.0f));
  auto w = tape.constant(Tensor<float>(Shape{4, 3, 3, 3}, 1.0f));
  EXPECT_EQ(conv2d(x, w, Var<float>{}, 2, 1).shape(), (Shape{2, 4, 4, 4}));
}

TEST(Ops, ShapeMismatchNamesOpAndShapes) {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>(Shape{2, 3}));
  auto b = tape.constant(Tensor<float>(Shape{4, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[4, 2]"), std::string::npos);
  }
  EXPECT_THROW(add(a, b), ShapeError);
}

TEST(Ops, BilinearUpsampleOfConstantIsConstant) {
  Tape<float> tape;
  auto y = upsample_bilinear2x(tape.constant(Tensor<float>(Shape{1, 2, 3, 3}, 0.25f)));
  ASSERT_EQ(y.shape(), (Shape{1, 2, 6, 6}));
  for (float v : y.value().data()) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Ops, NoGraphWithoutGradInputs) {
  Tape<float> tape;
  auto y = exp(tape.constant(Tensor<float>(Shape{3}, 0.0f)));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, SumGivesOnes) {
  Tape<double> tape;
  Rng rng(1);
  auto x = tape.input(test::random_tensor(Shape{2, 3}, rng));
  tape.backward(sum(x));
  const auto grad = tape.grad(x);
  for (double g : grad.data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquaredNormGivesTwiceInput) {
  Tape<double> tape;
  Rng rng(2);
  Tensor<double> xv = test::random_tensor(Shape{7}, rng);
  auto x = tape.input(xv);
  tape.backward(sum(square(x)));
  const auto g = tape.grad(x);
  for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_DOUBLE_EQ(g[i], 2.0 * xv[i]);
}

TEST(Backward, NonScalarLossThrows) {
  Tape<double> tape;
  auto x = tape.input(Tensor<double>(Shape{3}, 1.0));
  EXPECT_THROW(tape.backward(exp(x)), ShapeError);
}

TEST(Backward, UnreachableParameterReceivesZero) {
  Parameter used("used", Tensor<float>(Shape{2}, 1.0f));
  Parameter unused("unused", Tensor<float>(Shape{2}, 1.0f));
  unused.grad.fill(5.0f);
  unused.zero_grad();
  Tape<float> tape;
  auto a = tape.parameter(used);
  tape.parameter(unused);
  tape.backward(sum(square(a)));
  EXPECT_FLOAT_EQ(used.grad[0], 2.0f);
  for (float g : unused.grad.data()) EXPECT_EQ(g, 0.0f);
}

TEST(Backward, FrozenParameterGetsNoGradient) {
  Parameter p("p", Tensor<float>(Shape{2}, 3.0f));
  Tape<float> tape;
  auto a = tape.parameter(p, Mode::kFrozen);
  auto b = tape.input(Tensor<float>(Shape{2}, 1.0f));
  tape.backward(sum(mul(a, b)));
  for (float g : p.grad.data()) EXPECT_EQ(g, 0.0f);
  EXPECT_FLOAT_EQ(tape.grad(b)[0], 3.0f);
}

TEST(Backward, TwoConvLayersMatchFiniteDifferences) {
  Rng rng(3);
  std::vector<Tensor<double>> inputs{test::random_tensor(Shape{1, 2, 6, 6}, rng), test::random_tensor(Shape{3, 2, 3, 3}, rng),
                                     test::random_tensor(Shape{2, 3, 3, 3}, rng)};
  auto f = [](Tape<double>&, std::span<const Var<double>> in) {
    auto h = softplus(conv2d(in[0], in[1], Var<double>{}, 1, 1));
    auto y = conv2d(h, in[2], Var<double>{}, 2, 1);
    return sum(square(y));
  };
  const auto report = gradcheck(f, inputs, 1e-4);
  EXPECT_TRUE(report.passed) << report.summary();
}

TEST(Backward, SharedNodeAccumulatesBothPaths) {
  // y = x*x + 3x through a node consumed twice, against the single-path form 2x + 3.
  Rng rng(4);
  Tensor<double> xv = test::random_tensor(Shape{5}, rng);
  Tape<double> tape;
  auto x = tape.input(xv);
  auto e = exp(x);
  auto y = add(mul(e, e), scale(e, 3.0));
  tape.backward(sum(y));
  const auto g = tape.grad(x);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double ex = std::exp(xv[i]);
    EXPECT_NEAR(g[i], 2.0 * ex * ex + 3.0 * ex, 1e-12);
  }
}

TEST(Backward, SecondBackwardOnSameTapeThrows) {
  Tape<double> tape;
  auto x = tape.input(Tensor<double>(Shape{1}, 1.0));
  auto l = sum(x);
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), std::logic_error);
}

TEST(Gradcheck, SoftplusAtZero) {
  auto f = [](Tape<double>&, std::span<const Var<double>> in) { return sum(softplus(in[0])); };
  const auto report = gradcheck(f, {Tensor<double>::scalar(0.0)}, 1e-4);
  EXPECT_TRUE(report.passed);
  EXPECT_NEAR(report.worst_analytic, 0.5, 1e-12);
  EXPECT_NEAR(report.worst_numeric, 0.5, 1e-7);
}

TEST(Gradcheck, BilinearSampleAtNonGridPoint) {
  Rng rng(5);
  Tensor<double> plane = test::random_tensor(Shape{1, 2, 4, 4}, rng);
  Tensor<double> coords(Shape{1, 1, 2}, {0.13, -0.41});
  auto f = [](Tape<double>&, std::span<const Var<double>> in) { return sum(square(grid_sample(in[0], in[1]))); };
  const auto report = gradcheck(f, {plane, coords}, 1e-4);
  EXPECT_TRUE(report.passed) << report.summary();
}

TEST(Gradcheck, WrongBackwardRuleFails) {
  // x^2 with a backward rule reporting x instead of 2x.
  auto broken_square = [](const Var<double>& a) {
    Tensor<double> y = a.value();
    for (auto& v : y.data()) v *= v;
    return a.tape().record(std::move(y), {a}, [a](Tape<double>& t, const Tensor<double>& g) {
      auto& buf = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * a.value()[i];
    });
  };
  auto f = [&](Tape<double>&, std::span<const Var<double>> in) { return sum(broken_square(in[0])); };
  const auto report = gradcheck(f, {Tensor<double>(Shape{3}, {0.5, -1.0, 2.0})}, 1e-4);
  EXPECT_FALSE(report.passed);
}

TEST(Gradcheck, EveryOpOnRandomInstances) {
  for (const auto& c : test::op_cases()) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(mix_seed(seed, 17));
      const auto inst = c.make(rng);
      const auto report = gradcheck(inst.fn, inst.inputs, 1e-4);
      EXPECT_TRUE(report.passed) << c.name << " seed " << seed << ": " << report.summary();
    }
  }
}

TEST(Gradcheck, VolumeCompositeOpaqueSampleDominates) {
  Tape<double> tape;
  Tensor<double> sigma(Shape{1, 1, 4}, {0.0, 1e6, 0.0, 0.0});
  Tensor<double> color(Shape{1, 1, 4, 3}, {0.1, 0.1, 0.1, 0.2, 0.4, 0.6, 0.9, 0.9, 0.9, 0.3, 0.3, 0.3});
  auto out = volume_composite(tape.constant(sigma), tape.constant(color), Tensor<double>(Shape{1, 1, 4}, 0.1),
                              std::vector<double>{1.0, 1.0, 1.0}, 1, 1);
  EXPECT_NEAR(out.value()[0], 0.2, 1e-6);
  EXPECT_NEAR(out.value()[1], 0.4, 1e-6);
  EXPECT_NEAR(out.value()[2], 0.6, 1e-6);
  EXPECT_NEAR(out.value()[3], 1.0, 1e-6);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Parameter p("p", Tensor<float>(Shape{3}, {1.0f, -2.0f, 3.0f}));
  std::vector<Parameter*> ps{&p};
  auto state = AdamState::for_params(ps);
  p.zero_grad();
  adam_step(ps, state, 0.1);
  EXPECT_EQ(p.value, Tensor<float>(Shape{3}, {1.0f, -2.0f, 3.0f}));
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps).
  Parameter p("p", Tensor<float>::scalar(0.5f));
  std::vector<Parameter*> ps{&p};
  auto state = AdamState::for_params(ps, {0.9, 0.999, 1e-8});
  p.grad[0] = 1.0f;
  adam_step(ps, state, 0.1);
  EXPECT_NEAR(p.value[0], 0.4f, 1e-6);
}

TEST(Adam, ConstantGradientDecreasesMonotonically) {
  Parameter p("p", Tensor<float>::scalar(0.0f));
  std::vector<Parameter*> ps{&p};
  auto state = AdamState::for_params(ps);
  float prev = p.value[0];
  for (int i = 0; i < 2; ++i) {
    p.grad[0] = 1.0f;
    adam_step(ps, state, 0.01);
    EXPECT_LT(p.value[0], prev);
    prev = p.value[0];
  }
  EXPECT_EQ(state.step, 2u);
}

TEST(Adam, NanGradientNamesParameter) {
  Parameter p("decoder.fc0.weight", Tensor<float>(Shape{2}));
  std::vector<Parameter*> ps{&p};
  auto state = AdamState::for_params(ps);
  p.grad[1] = std::nanf("");
  try {
    adam_step(ps, state, 0.1);
    FAIL() << "expected throw";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.fc0.weight"), std::string::npos);
  }
  EXPECT_EQ(state.step, 0u);
  EXPECT_EQ(p.value[0], 0.0f);
}

TEST(Determinism, ReplayGivesIdenticalLosses) {
  auto run = [] {
    Rng rng(9);
    Parameter w("w", test::random_tensor<float>(Shape{4, 3, 3, 3}, rng));
    std::vector<Parameter*> ps{&w};
    auto state = AdamState::for_params(ps);
    Tensor<float> x = test::random_tensor<float>(Shape{2, 3, 6, 6}, rng);
    std::vector<float> losses;
    for (int step = 0; step < 10; ++step) {
      w.zero_grad();
      Tape<float> tape;
      auto y = conv2d(tape.constant(x), tape.parameter(w), Var<float>{}, 1, 1);
      auto loss = mean(softplus(y));
      tape.backward(loss);
      losses.push_back(loss.value().item());
      adam_step(ps, state, 0.01);
    }
    return losses;
  };
  EXPECT_EQ(run(), run());
}
