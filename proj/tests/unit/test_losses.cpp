// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "support/test_util.hpp"
#include "tpd/autodiff/gradcheck.hpp"
#include "tpd/losses/losses.hpp"

namespace tpd::loss {
namespace {

using ad::Mode;
using ad::Shape;
using ad::Tensor;
using render::CameraPose;
using render::kPi;

nn::DiscriminatorConfig tiny_disc() {
  nn::DiscriminatorConfig c;
  c.resolution = 32;
  c.base_channels = 4;
  c.max_channels = 8;
  c.hidden = 16;
  c.pose_embed = 4;
  return c;
}

void zero_output_layer(nn::Discriminator& d) {
  d.find("out.weight")->value.fill(0.0f);
  d.find("out.bias")->value.fill(0.0f);
}

TEST(Kd, ZeroConstantAndBruteForce) {
  ad::Tape<double> tape;
  Rng rng(1);
  const auto a = test::random_tensor(Shape{1, 4, 5, 5}, rng);
  EXPECT_EQ(kd(tape.constant(a), tape.constant(a)).value().item(), 0.0);
  Tensor<double> b = a;
  for (auto& v : b.data()) v += 1.0;
  EXPECT_NEAR(kd(tape.constant(a), tape.constant(b)).value().item(), std::sqrt(100.0), 1e-12);

  const auto c = test::random_tensor(Shape{3, 4, 5, 5}, rng), d = test::random_tensor(Shape{3, 4, 5, 5}, rng);
  double expect = 0;
  for (std::size_t n = 0; n < 3; ++n) {
    double ss = 0;
    for (std::size_t i = 0; i < 100; ++i) ss += std::pow(c[n * 100 + i] - d[n * 100 + i], 2);
    expect += std::sqrt(ss) / 3.0;
  }
  EXPECT_NEAR(kd(tape.constant(c), tape.constant(d)).value().item(), expect, 1e-6);
}

TEST(Kd, IgnoresSidePlanes) {
  Rng rng(2);
  auto t = test::random_tensor<float>(Shape{2, 6, 4, 4}, rng), s = test::random_tensor<float>(Shape{2, 6, 4, 4}, rng);
  auto value = [](const Tensor<float>& tt, const Tensor<float>& ss) {
    ad::Tape<float> tape;
    return kd(triplane::split_planes(tape.constant(tt)).xy, triplane::split_planes(tape.constant(ss)).xy).value().item();
  };
  const float before = value(t, s);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 2 * 16; i < 6 * 16; ++i) s[n * 96 + i] = static_cast<float>(rng.uniform(-5, 5));
  EXPECT_EQ(value(t, s), before);
}

TEST(Map, Values) {
  ad::Tape<double> tape;
  auto w = tape.constant(Tensor<double>(Shape{1, 2}, std::vector<double>{0.5, 0.5}));
  auto v = tape.constant(Tensor<double>(Shape{1, 2}, std::vector<double>{-0.5, 1.5}));
  EXPECT_DOUBLE_EQ(map(w, w).value().item(), 0.0);
  EXPECT_DOUBLE_EQ(map(w, v).value().item(), 2.0);
  Rng rng(3);
  const auto a = test::random_tensor(Shape{4, 6}, rng), b = test::random_tensor(Shape{4, 6}, rng);
  double expect = 0;
  for (std::size_t i = 0; i < a.size(); ++i) expect += std::abs(a[i] - b[i]);
  EXPECT_NEAR(map(tape.constant(a), tape.constant(b)).value().item(), expect / 4.0, 1e-12);
  EXPECT_THROW(map(tape.constant(a), tape.constant(Tensor<double>(Shape{4, 5}))), ad::ShapeError);
}

TEST(Rgb, GateClosedIsExactZeroWithoutGradient) {
  Rng rng(4);
  ad::Tape<float> tape;
  auto it = tape.constant(test::random_tensor<float>(Shape{2, 3, 8, 8}, rng));
  auto is = tape.input(test::random_tensor<float>(Shape{2, 3, 8, 8}, rng));
  auto rt = tape.constant(test::random_tensor<float>(Shape{2, 3, 4, 4}, rng));
  auto rs = tape.input(test::random_tensor<float>(Shape{2, 3, 4, 4}, rng));
  auto l = rgb(it, is, rt, rs, kPi / 3, kPi / 4);
  EXPECT_EQ(l.value().item(), 0.0f);
  EXPECT_FALSE(l.requires_grad());
  auto total_loss = ad::add(l, ad::scale(ad::sum(is), 0.0f));
  tape.backward(total_loss);
  const auto grad_rs = tape.grad(rs);
  for (float g : grad_rs.data()) EXPECT_EQ(g, 0.0f);
}

TEST(Rgb, OpenGateValues) {
  ad::Tape<double> tape;
  Tensor<double> a(Shape{1, 3, 4, 4}, 0.25), b(Shape{1, 3, 4, 4}, 0.75), raw(Shape{1, 3, 2, 2}, 0.1);
  EXPECT_EQ(rgb(tape.constant(a), tape.constant(a), tape.constant(raw), tape.constant(raw), 0.0, kPi / 4).value().item(), 0.0);
  EXPECT_NEAR(rgb(tape.constant(a), tape.constant(b), tape.constant(raw), tape.constant(raw), 0.0, kPi / 4).value().item(), 0.5 * 48, 1e-12);
  EXPECT_NEAR(rgb(tape.constant(a), tape.constant(b), tape.constant(raw), tape.constant(raw), -kPi / 4, kPi / 4).value().item(), 24.0, 1e-12);
}

TEST(Perceptual, GateAndBruteForce) {
  nn::FixedEncoder enc;
  Rng rng(5);
  const auto a = test::random_tensor(Shape{2, 3, 32, 32}, rng, 0, 1), b = test::random_tensor(Shape{2, 3, 32, 32}, rng, 0, 1);
  ad::Tape<double> tape;
  auto va = tape.constant(a), vb = tape.constant(b);
  EXPECT_EQ(perceptual(enc, va, va, 0.0, kPi / 4).value().item(), 0.0);
  EXPECT_EQ(perceptual(enc, va, vb, kPi / 3, kPi / 4).value().item(), 0.0);
  const auto fa = enc.stages(tape, va), fb = enc.stages(tape, vb);
  double expect = 0;
  for (std::size_t s = 0; s < fa.size(); ++s)
    for (std::size_t i = 0; i < fa[s].value().size(); ++i) expect += std::abs(fa[s].value()[i] - fb[s].value()[i]);
  EXPECT_NEAR(perceptual(enc, va, vb, 0.1, kPi / 4).value().item(), expect / 2.0, 1e-9 * expect);
}

TEST(GanD, ZeroDiscriminatorGivesTwoLn2) {
  nn::Discriminator d(tiny_disc(), 1);
  zero_output_layer(d);
  Rng rng(6);
  const auto fake = test::random_tensor<float>(Shape{2, 3, 32, 32}, rng, 0, 1), real = test::random_tensor<float>(Shape{3, 3, 32, 32}, rng, 0, 1);
  ad::Tape<float> tape;
  nn::Bind<float> bind(tape, Mode::kTrain);
  const auto res = gan_d(d, bind, fake, real, render::pose_batch(std::vector<CameraPose>(2)), render::pose_batch(std::vector<CameraPose>(3)), 0.0);
  EXPECT_NEAR(res.loss.value().item(), 2.0 * std::log(2.0), 1e-6);
  EXPECT_EQ(res.r1, 0.0);
}

TEST(GanD, PenaltyIsAdditive) {
  nn::Discriminator d(tiny_disc(), 2);
  Rng rng(7);
  const auto fake = test::random_tensor<float>(Shape{2, 3, 32, 32}, rng, 0, 1), real = test::random_tensor<float>(Shape{2, 3, 32, 32}, rng, 0, 1);
  const auto pf = render::pose_batch({CameraPose{0.1}, CameraPose{-0.3}}), pr = render::pose_batch({CameraPose{2.5}, CameraPose{0.0}});
  ad::Tape<float> t0, t1;
  nn::Bind<float> b0(t0, Mode::kTrain), b1(t1, Mode::kTrain);
  const auto r0 = gan_d(d, b0, fake, real, pf, pr, 0.0);
  const auto r1 = gan_d(d, b1, fake, real, pf, pr, 5.0);
  EXPECT_GT(r1.r1, 0.0);
  EXPECT_NEAR(r1.loss.value().item() - r0.loss.value().item(), r1.r1, 1e-4 * (1.0 + r1.r1));
  EXPECT_NEAR(r1.r1, r1_probe(d, real, pr, 5.0).penalty, 1e-9);
}

TEST(GanD, R1InputGradientMatchesFiniteDifference) {
  // dD/dI against double-precision central differences on a few pixels.
  nn::Discriminator d(tiny_disc(), 3);
  Rng rng(8);
  const auto real = test::random_tensor<float>(Shape{1, 3, 32, 32}, rng, 0, 1);
  const auto poses = render::pose_batch({CameraPose{0.4}});
  const auto probe = r1_probe(d, real, poses, 1.0);
  auto logit = [&](const Tensor<double>& img) {
    ad::Tape<double> tape;
    nn::Bind<double> bind(tape, Mode::kFrozen);
    return d.forward(bind, tape.constant(img), poses).value()[0];
  };
  for (std::size_t idx : {5u, 700u, 1500u, 3000u}) {
    Tensor<double> hi = real.cast<double>(), lo = hi;
    hi[idx] += 1e-5;
    lo[idx] -= 1e-5;
    const double numeric = (logit(hi) - logit(lo)) / 2e-5;
    EXPECT_NEAR(probe.grad[idx], numeric, 1e-4 + 1e-3 * std::abs(numeric)) << idx;
  }
}

TEST(GanD, R1ParameterGradientMatchesPenaltyDerivative) {
  nn::Discriminator d(tiny_disc(), 4);
  Rng rng(9);
  const auto real = test::random_tensor<float>(Shape{2, 3, 32, 32}, rng, 0, 1);
  const auto fake = test::random_tensor<float>(Shape{1, 3, 32, 32}, rng, 0, 1);
  const auto pr = render::pose_batch({CameraPose{0.2}, CameraPose{3.0}}), pf = render::pose_batch({CameraPose{}});
  const double gamma = 10.0;
  auto grads = [&](double g) {
    d.zero_grad();
    ad::Tape<float> tape;
    nn::Bind<float> bind(tape, Mode::kTrain);
    tape.backward(gan_d(d, bind, fake, real, pf, pr, g).loss);
    return d.find("fc.weight")->grad;
  };
  const auto with = grads(gamma), without = grads(0.0);
  auto* p = d.find("fc.weight");
  double worst = 0, scale = 0;
  for (std::size_t idx : {0u, 17u, 301u, 999u, 1800u}) {
    const float orig = p->value[idx];
    const float h = 1e-2f;
    p->value[idx] = orig + h;
    const double up = r1_probe(d, real, pr, gamma).penalty;
    p->value[idx] = orig - h;
    const double dn = r1_probe(d, real, pr, gamma).penalty;
    p->value[idx] = orig;
    const double numeric = (up - dn) / (2.0 * h);
    const double analytic = with[idx] - without[idx];
    worst = std::max(worst, std::abs(numeric - analytic));
    scale = std::max(scale, std::abs(numeric));
  }
  EXPECT_GT(scale, 0.0);
  EXPECT_LT(worst, 0.05 * scale);
}

TEST(GanG, ZeroLogitAndMonotone) {
  ad::Tape<double> tape;
  EXPECT_NEAR(gan_g(tape.constant(Tensor<double>(Shape{3}))).value().item(), std::log(2.0), 1e-15);
  double prev = 1e9;
  for (double x = -5; x <= 5; x += 0.5) {
    const double v = gan_g(tape.constant(Tensor<double>(Shape{1}, x))).value().item();
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(GanG, GradcheckThroughDiscriminator) {
  auto cfg = tiny_disc();
  cfg.resolution = 8;
  nn::Discriminator d(cfg, 5);
  Rng rng(10);
  const auto img = test::random_tensor(Shape{2, 3, 8, 8}, rng, 0, 1);
  const auto poses = render::pose_batch({CameraPose{0.1}, CameraPose{-1.0}});
  const auto report = ad::gradcheck(
      [&](ad::Tape<double>& tape, std::span<const ad::Var<double>> in) {
        nn::Bind<double> bind(tape, Mode::kFrozen);
        return gan_g(d.forward(bind, in[0], poses));
      },
      {img});
  EXPECT_TRUE(report.passed) << report.summary();
}

TEST(Total, WeightsAndLinearity) {
  LossWeights w;
  EXPECT_NO_THROW(w.validate());
  EXPECT_DOUBLE_EQ(total(ComponentValues{1, 1, 1, 1, 1, 1}, w), 14.5);
  LossWeights zero{0, 0, 0, 0, 0, 0};
  EXPECT_EQ(total(ComponentValues{3, 1, 4, 1, 5, 9}, zero), 0.0);
  const ComponentValues base{0.3, 1.2, 0.7, 2.0, 0.1, 0.4};
  ComponentValues doubled = base;
  doubled.kd *= 2;
  EXPECT_NEAR(total(doubled, w) - total(base, w), w.kd * base.kd, 1e-12);

  ad::Tape<double> tape;
  auto s = [&](double v) { return tape.constant(Tensor<double>::scalar(v)); };
  Components<double> c{s(1), s(1), s(1), s(1), s(1), s(1)};
  EXPECT_DOUBLE_EQ(total(tape, c, w).value().item(), 14.5);
  Components<double> partial;
  partial.kd = s(2.0);
  EXPECT_DOUBLE_EQ(total(tape, partial, w).value().item(), 1.0);
  LossWeights bad;
  bad.tau = 0.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace tpd::loss
