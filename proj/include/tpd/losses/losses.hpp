// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tpd/networks/networks.hpp"

// Training objectives.
//
// Norm-based losses are computed per sample as unnormalised sums over
// elements and then averaged over the batch. GAN losses use the
// non-saturating logistic form: D minimises softplus(D(fake)) +
// softplus(-D(real)) + gamma ||dD(real)/dI||^2, G minimises softplus(-D(fake)).
namespace tpd::loss {

struct LossWeights {
  double gan_front = 1.0;
  double kd = 0.5;
  double rgb = 1.0;
  double lpips = 1.0;
  double map = 1.0;
  double gan_back = 10.0;
  double tau = render::kPi / 4;
  double gamma_front = 1.0;
  double gamma_back = 20.0;

  /// Throws std::invalid_argument on negative weights or tau outside (0, pi].
  void validate() const;
};

/// L2 norm of the xy-plane difference. Inputs [N, C, R, R].
template <typename T>
ad::Var<T> kd(const ad::Var<T>& xy_teacher, const ad::Var<T>& xy_student);

/// L1 norm of the style-code difference. Inputs [N, w_dim].
template <typename T>
ad::Var<T> map(const ad::Var<T>& w_teacher, const ad::Var<T>& w_student);

/// True when a reconstruction loss is active for offset dp.
inline bool gate_open(double dp, double tau) { return std::abs(dp) <= tau; }

/// L1 over final and raw RGB images; exactly zero (a constant with no
/// gradient path) when |dp| > tau.
template <typename T>
ad::Var<T> rgb(const ad::Var<T>& image_t, const ad::Var<T>& image_s, const ad::Var<T>& raw_t, const ad::Var<T>& raw_s,
               double dp, double tau);

/// Sum over encoder stages of the L1 feature difference of final images,
/// gated like rgb.
template <typename T>
ad::Var<T> perceptual(const nn::FixedEncoder& enc, const ad::Var<T>& image_t, const ad::Var<T>& image_s, double dp, double tau);

/// Generator side: mean softplus(-logits).
template <typename T>
ad::Var<T> gan_g(const ad::Var<T>& fake_logits);

/// Discriminator adversarial term without R1: mean softplus(fake) + mean softplus(-real).
template <typename T>
ad::Var<T> gan_d_adversarial(const ad::Var<T>& fake_logits, const ad::Var<T>& real_logits);

/// Exact R1 value gamma * mean_b ||dD/dI_b||^2 and its input gradient.
struct R1Probe {
  double penalty = 0.0;
  ad::Tensor<float> grad;  ///< dD/dI at the real batch
};
R1Probe r1_probe(nn::Discriminator& d, const ad::Tensor<float>& real, const ad::Tensor<float>& poses, double gamma);

struct GanDResult {
  ad::Var<float> loss;       ///< value = adversarial + exact R1
  double adversarial = 0.0;
  double r1 = 0.0;
  double fake_logit_mean = 0.0;
  double real_logit_mean = 0.0;
};

/// Full discriminator loss on the caller's tape with D bound through bind.
///
/// The parameter gradient of the R1 term needs a second derivative, which the
/// tape does not provide. It is taken instead from the directional finite
/// difference 2 rms(g) (D(I + eps v) - D(I - eps v)) / (2 eps), where
/// g = dD/dI, v = g / rms(g) and eps = r1_step. Its value is shifted so the
/// returned loss equals the exact penalty. Fake images enter as constants.
GanDResult gan_d(nn::Discriminator& d, nn::Bind<float>& bind, const ad::Tensor<float>& fake, const ad::Tensor<float>& real,
                 const ad::Tensor<float>& p_fake, const ad::Tensor<float>& p_real, double gamma, double r1_step = 1e-4);

/// Components of the weighted total. Invalid (default) members count as 0.
template <typename T>
struct Components {
  ad::Var<T> gan_front, kd, rgb, lpips, map, gan_back;
};

template <typename T>
ad::Var<T> total(ad::Tape<T>& tape, const Components<T>& c, const LossWeights& w);

struct ComponentValues {
  double gan_front = 0, kd = 0, rgb = 0, lpips = 0, map = 0, gan_back = 0;
};
double total(const ComponentValues& c, const LossWeights& w);

}  // namespace tpd::loss
