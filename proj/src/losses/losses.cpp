// SPDX-License-Identifier: Apache-2.0
#include "tpd/losses/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace tpd::loss {
namespace {

template <typename T>
ad::Var<T> zero(ad::Tape<T>& tape) {
  return tape.constant(ad::Tensor<T>::scalar(T(0)));
}

template <typename T>
void require_same(const char* op, const ad::Var<T>& a, const ad::Var<T>& b) {
  if (a.shape() != b.shape()) throw ad::ShapeError(op, a.shape(), b.shape());
}

template <typename T>
std::size_t batch(const ad::Var<T>& a) {
  return a.shape().at(0);
}

/// Batch mean of per-sample sums of |a - b|.
template <typename T>
ad::Var<T> l1_per_sample_mean(const ad::Var<T>& a, const ad::Var<T>& b) {
  return ad::scale(ad::sum(ad::abs(ad::sub(a, b))), T(1) / static_cast<T>(batch(a)));
}

double mean_of(const ad::Var<float>& v) {
  double s = 0;
  for (float x : v.value().data()) s += x;
  return s / static_cast<double>(v.value().size());
}

}  // namespace

void LossWeights::validate() const {
  for (double v : {gan_front, kd, rgb, lpips, map, gan_back, gamma_front, gamma_back}) {
    if (!(v >= 0.0)) throw std::invalid_argument("LossWeights: weights must be non-negative");
  }
  if (!(tau > 0.0 && tau <= render::kPi)) throw std::invalid_argument("LossWeights: tau must lie in (0, pi]");
}

template <typename T>
ad::Var<T> kd(const ad::Var<T>& xy_teacher, const ad::Var<T>& xy_student) {
  require_same("loss::kd", xy_teacher, xy_student);
  auto norms = ad::sqrt(ad::sum_per_sample(ad::square(ad::sub(xy_teacher, xy_student))));
  return ad::mean(norms);
}

template <typename T>
ad::Var<T> map(const ad::Var<T>& w_teacher, const ad::Var<T>& w_student) {
  require_same("loss::map", w_teacher, w_student);
  return l1_per_sample_mean(w_teacher, w_student);
}

template <typename T>
ad::Var<T> rgb(const ad::Var<T>& image_t, const ad::Var<T>& image_s, const ad::Var<T>& raw_t, const ad::Var<T>& raw_s,
               double dp, double tau) {
  require_same("loss::rgb", image_t, image_s);
  require_same("loss::rgb", raw_t, raw_s);
  if (!gate_open(dp, tau)) return zero(image_s.tape());
  return ad::add(l1_per_sample_mean(image_t, image_s), l1_per_sample_mean(raw_t, raw_s));
}

template <typename T>
ad::Var<T> perceptual(const nn::FixedEncoder& enc, const ad::Var<T>& image_t, const ad::Var<T>& image_s, double dp, double tau) {
  require_same("loss::perceptual", image_t, image_s);
  if (!gate_open(dp, tau)) return zero(image_s.tape());
  auto& tape = image_s.tape();
  const auto ft = enc.stages(tape, image_t);
  const auto fs = enc.stages(tape, image_s);
  ad::Var<T> acc = l1_per_sample_mean(ft[0], fs[0]);
  for (std::size_t i = 1; i < ft.size(); ++i) acc = ad::add(acc, l1_per_sample_mean(ft[i], fs[i]));
  return acc;
}

template <typename T>
ad::Var<T> gan_g(const ad::Var<T>& fake_logits) {
  return ad::mean(ad::softplus(ad::scale(fake_logits, T(-1))));
}

template <typename T>
ad::Var<T> gan_d_adversarial(const ad::Var<T>& fake_logits, const ad::Var<T>& real_logits) {
  return ad::add(ad::mean(ad::softplus(fake_logits)), ad::mean(ad::softplus(ad::scale(real_logits, T(-1)))));
}

R1Probe r1_probe(nn::Discriminator& d, const ad::Tensor<float>& real, const ad::Tensor<float>& poses, double gamma) {
  ad::Tape<float> tape;
  nn::Bind<float> bind(tape, ad::Mode::kFrozen);
  auto x = tape.input(real);
  tape.backward(ad::sum(d.forward(bind, x, poses)));
  R1Probe out;
  out.grad = tape.grad(x);
  double ss = 0;
  for (float g : out.grad.data()) ss += double(g) * g;
  out.penalty = gamma * ss / static_cast<double>(real.dim(0));
  return out;
}

GanDResult gan_d(nn::Discriminator& d, nn::Bind<float>& bind, const ad::Tensor<float>& fake, const ad::Tensor<float>& real,
                 const ad::Tensor<float>& p_fake, const ad::Tensor<float>& p_real, double gamma, double r1_step) {
  if (fake.rank() != 4 || real.rank() != 4 || fake.dim(1) != real.dim(1) || fake.dim(2) != real.dim(2) || fake.dim(3) != real.dim(3)) {
    throw ad::ShapeError("loss::gan_d", fake.shape(), real.shape());
  }
  auto& tape = bind.tape();
  const std::size_t nr = real.dim(0);
  const bool with_r1 = gamma > 0.0;

  R1Probe probe;
  double rms = 0.0;
  ad::Tensor<float> plus, minus;
  if (with_r1) {
    probe = r1_probe(d, real, p_real, gamma);
    double ss = 0;
    for (float g : probe.grad.data()) ss += double(g) * g;
    rms = std::sqrt(ss / static_cast<double>(probe.grad.size()));
    plus = real;
    minus = real;
    if (rms > 0.0) {
      for (std::size_t i = 0; i < real.size(); ++i) {
        const double step = r1_step * probe.grad[i] / rms;
        plus[i] = static_cast<float>(real[i] + step);
        minus[i] = static_cast<float>(real[i] - step);
      }
    }
  }

  // Each part gets its own pass so batch statistics inside D never mix parts.
  auto logits_of = [&](const ad::Tensor<float>& images, const ad::Tensor<float>& poses) {
    return d.forward(bind, tape.constant(images), poses);
  };
  auto lf = logits_of(fake, p_fake);
  auto lr = logits_of(real, p_real);

  GanDResult out;
  auto adv = gan_d_adversarial(lf, lr);
  out.adversarial = adv.value().item();
  out.fake_logit_mean = mean_of(lf);
  out.real_logit_mean = mean_of(lr);
  out.loss = adv;
  if (with_r1) {
    auto lp = logits_of(plus, p_real);
    auto lm = logits_of(minus, p_real);
    const double coef = gamma / static_cast<double>(nr) * 2.0 * rms / (2.0 * r1_step);
    auto surrogate = ad::scale(ad::sum(ad::sub(lp, lm)), static_cast<float>(coef));
    const double shift = probe.penalty - surrogate.value().item();
    out.loss = ad::add(adv, ad::add_scalar(surrogate, static_cast<float>(shift)));
    out.r1 = probe.penalty;
  }
  return out;
}

template <typename T>
ad::Var<T> total(ad::Tape<T>& tape, const Components<T>& c, const LossWeights& w) {
  ad::Var<T> acc = zero(tape);
  auto add = [&acc](const ad::Var<T>& v, double weight) {
    if (v.valid() && weight != 0.0) acc = ad::add(acc, ad::scale(v, static_cast<T>(weight)));
  };
  add(c.gan_front, w.gan_front);
  add(c.kd, w.kd);
  add(c.rgb, w.rgb);
  add(c.lpips, w.lpips);
  add(c.map, w.map);
  add(c.gan_back, w.gan_back);
  return acc;
}

double total(const ComponentValues& c, const LossWeights& w) {
  return w.gan_front * c.gan_front + w.kd * c.kd + w.rgb * c.rgb + w.lpips * c.lpips + w.map * c.map + w.gan_back * c.gan_back;
}

#define TPD_INSTANTIATE(T)                                                                                         \
  template ad::Var<T> kd(const ad::Var<T>&, const ad::Var<T>&);                                                    \
  template ad::Var<T> map(const ad::Var<T>&, const ad::Var<T>&);                                                   \
  template ad::Var<T> rgb(const ad::Var<T>&, const ad::Var<T>&, const ad::Var<T>&, const ad::Var<T>&, double, double); \
  template ad::Var<T> perceptual(const nn::FixedEncoder&, const ad::Var<T>&, const ad::Var<T>&, double, double);     \
  template ad::Var<T> gan_g(const ad::Var<T>&);                                                                    \
  template ad::Var<T> gan_d_adversarial(const ad::Var<T>&, const ad::Var<T>&);                                     \
  template ad::Var<T> total(ad::Tape<T>&, const Components<T>&, const LossWeights&);

TPD_INSTANTIATE(float)
TPD_INSTANTIATE(double)

#undef TPD_INSTANTIATE

}  // namespace tpd::loss
