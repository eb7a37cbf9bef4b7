// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "tpd/autodiff/tape.hpp"

// Differentiable operations. Each records itself on the tape of its first
// operand. Image tensors are NCHW.
namespace tpd::ad {

// Element-wise, same shape.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> add_scalar(const Var<T>& a, T s);

template <typename T> Var<T> exp(const Var<T>& a);
/// log(1 + e^x), evaluated stably.
template <typename T> Var<T> softplus(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> leaky_relu(const Var<T>& a, T slope = T(0.2));
/// ((1 + slope) x + (1 - slope) sqrt(x^2 + delta^2)) / 2: leaky ReLU with the
/// kink rounded over a width of about delta, so second differences stay bounded.
template <typename T> Var<T> smooth_leaky_relu(const Var<T>& a, T slope = T(0.2), T delta = T(0.1));
template <typename T> Var<T> sqrt(const Var<T>& a);
/// 1 / sqrt(x) for x > 0.
template <typename T> Var<T> rsqrt(const Var<T>& a);
template <typename T> Var<T> abs(const Var<T>& a);
template <typename T> Var<T> square(const Var<T>& a);

// Reductions to a one-element tensor.
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
/// Sum over all axes but the first: [N, ...] -> [N].
template <typename T> Var<T> sum_per_sample(const Var<T>& a);
/// sum |a - b|
template <typename T> Var<T> l1_distance(const Var<T>& a, const Var<T>& b);
/// sum (a - b)^2
template <typename T> Var<T> sq_l2_distance(const Var<T>& a, const Var<T>& b);

// Layout.
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T> Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
/// Gradient-blocking copy onto the same tape.
template <typename T> Var<T> detach(const Var<T>& a);

/// [M, K] x [K, N] -> [M, N]
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x [M, in], weight [out, in], bias [out] (may be invalid Var) -> [M, out]
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

/// x [N, Ci, H, W], weight [Co, Ci, k, k], bias [Co] (may be invalid Var).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t pad);

/// Multiplies channel c of sample n by s[n, c]. x [N, C, ...], s [N, C].
template <typename T> Var<T> scale_channels(const Var<T>& x, const Var<T>& s);

template <typename T> Var<T> upsample_nearest2x(const Var<T>& x);
/// Half-pixel-centre bilinear 2x upsample, edges clamped.
template <typename T> Var<T> upsample_bilinear2x(const Var<T>& x);
template <typename T> Var<T> avg_pool2x(const Var<T>& x);

/// Bilinear lookup into a feature plane.
///
/// plane [N, C, H, W], coords [N, P, 2] holding (u, v) in [-1, 1]; u runs
/// along W and v along H. Cell k of an axis of size R is centred at
/// -1 + (2k + 1) / R, and coordinates beyond the outermost centres are
/// clamped to them (border mode). Result [N, P, C].
template <typename T> Var<T> grid_sample(const Var<T>& plane, const Var<T>& coords);

/// Emission-absorption compositing along rays.
///
/// sigma [N, P, S] densities, color [N, P, S, K], delta [N, P, S] segment
/// lengths. With alpha_i = 1 - exp(-sigma_i delta_i) and transmittance
/// T_i = prod_{j<i} (1 - alpha_j), channel k of a ray is
/// sum_i T_i alpha_i c_ik + (1 - opacity) background[k], opacity = sum_i T_i alpha_i.
/// Output [N, K + 1, H, W] with H * W == P; the last channel is the opacity.
template <typename T>
Var<T> volume_composite(const Var<T>& sigma, const Var<T>& color, const Tensor<T>& delta,
                        const std::vector<T>& background, std::size_t height, std::size_t width);

}  // namespace tpd::ad
