// SPDX-License-Identifier: Apache-2.0
#include "tpd/renderer/renderer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "tpd/core/rng.hpp"

namespace tpd::render {
namespace {

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

Vec3 normalized(const Vec3& v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

double hash_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return static_cast<double>(mix_seed(mix_seed(seed, a), b) >> 11) * 0x1.0p-53;
}

}  // namespace

double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

Vec3 CameraPose::position() const {
  return {radius * std::sin(yaw) * std::cos(pitch), radius * std::sin(pitch), radius * std::cos(yaw) * std::cos(pitch)};
}

void CameraPose::validate() const {
  if (!(yaw > -kPi && yaw <= kPi)) throw std::invalid_argument("CameraPose: yaw out of (-pi, pi]: " + std::to_string(yaw));
  if (!(std::abs(pitch) <= kPi / 4)) throw std::invalid_argument("CameraPose: pitch out of [-pi/4, pi/4]: " + std::to_string(pitch));
  if (!(radius > 1.0)) throw std::invalid_argument("CameraPose: radius must exceed 1");
  if (!(fov_y > 0.0 && fov_y < kPi)) throw std::invalid_argument("CameraPose: fov_y out of (0, pi)");
}

namespace {

struct Basis {
  Vec3 origin, forward, right, up;
  double half;
};

Basis camera_basis(const CameraPose& cam) {
  Basis b;
  b.origin = cam.position();
  b.forward = normalized({-b.origin[0], -b.origin[1], -b.origin[2]});
  b.right = normalized(cross(b.forward, {0.0, 1.0, 0.0}));
  b.up = cross(b.right, b.forward);
  b.half = std::tan(cam.fov_y / 2.0);
  return b;
}

Ray basis_ray(const Basis& b, const CameraPose& cam, std::size_t res, double col, double row) {
  const double n = static_cast<double>(res);
  const double x = (col / n * 2.0 - 1.0) * b.half;
  const double y = (1.0 - row / n * 2.0) * b.half;
  const Vec3 d = normalized({b.forward[0] + x * b.right[0] + y * b.up[0], b.forward[1] + x * b.right[1] + y * b.up[1],
                             b.forward[2] + x * b.right[2] + y * b.up[2]});
  return {b.origin, d, cam.near(), cam.far()};
}

}  // namespace

Ray pixel_ray(const CameraPose& cam, std::size_t res, double col, double row) {
  if (res == 0) throw std::invalid_argument("pixel_ray: res must be >= 1");
  return basis_ray(camera_basis(cam), cam, res, col, row);
}

std::vector<Ray> generate_rays(const CameraPose& cam, std::size_t res) {
  if (res == 0) throw std::invalid_argument("generate_rays: res must be >= 1");
  const Basis b = camera_basis(cam);
  std::vector<Ray> rays;
  rays.reserve(res * res);
  for (std::size_t i = 0; i < res; ++i)
    for (std::size_t j = 0; j < res; ++j) rays.push_back(basis_ray(b, cam, res, double(j) + 0.5, double(i) + 0.5));
  return rays;
}

const char* view_tag_name(ViewTag t) { return t == ViewTag::kFront ? "front" : "back"; }

std::optional<ViewTag> parse_view_tag(std::string_view s) {
  if (s == "front") return ViewTag::kFront;
  if (s == "back") return ViewTag::kBack;
  return std::nullopt;
}

ViewTag classify_view(const CameraPose& cam) { return std::abs(cam.yaw) <= kPi / 2 ? ViewTag::kFront : ViewTag::kBack; }

double horizontal_offset(const CameraPose& cam) { return cam.yaw; }

bool within_offset(const CameraPose& cam, double tau) { return std::abs(horizontal_offset(cam)) <= tau; }

std::array<double, kPoseDim> pose_vector(const CameraPose& cam) {
  return {std::sin(cam.yaw), std::cos(cam.yaw), std::sin(cam.pitch), std::cos(cam.pitch)};
}

ad::Tensor<float> pose_batch(const std::vector<CameraPose>& cams) {
  ad::Tensor<float> out(ad::Shape{cams.size(), kPoseDim});
  for (std::size_t n = 0; n < cams.size(); ++n) {
    const auto v = pose_vector(cams[n]);
    for (std::size_t k = 0; k < kPoseDim; ++k) out[n * kPoseDim + k] = static_cast<float>(v[k]);
  }
  return out;
}

SampleSet sample_rays(const std::vector<CameraPose>& cams, const RenderSettings& settings) {
  const std::size_t n = cams.size(), res = settings.resolution, s = settings.samples, p = res * res;
  if (n == 0) throw std::invalid_argument("sample_rays: empty camera batch");
  if (s < 2) throw std::invalid_argument("sample_rays: need at least 2 samples per ray");
  SampleSet out{ad::Tensor<float>(ad::Shape{n, p * s, 3}), ad::Tensor<float>(ad::Shape{n, p, s})};
  std::vector<double> t(s);
  for (std::size_t c = 0; c < n; ++c) {
    const auto rays = generate_rays(cams[c], res);
    for (std::size_t r = 0; r < p; ++r) {
      const Ray& ray = rays[r];
      const double step = (ray.t_far - ray.t_near) / static_cast<double>(s);
      const std::uint64_t ray_id = c * p + r;
      for (std::size_t i = 0; i < s; ++i) {
        const double u = settings.jitter_seed ? hash_uniform(*settings.jitter_seed, ray_id, i) : 0.5;
        t[i] = ray.t_near + (static_cast<double>(i) + u) * step;
      }
      for (std::size_t i = 0; i < s; ++i) {
        const double d = (i + 1 < s ? t[i + 1] : ray.t_far) - t[i];
        out.delta[(c * p + r) * s + i] = static_cast<float>(d);
        float* pt = out.points.ptr() + ((c * p + r) * s + i) * 3;
        for (std::size_t k = 0; k < 3; ++k) pt[k] = static_cast<float>(ray.origin[k] + t[i] * ray.dir[k]);
      }
    }
  }
  return out;
}

template <typename T>
ad::Var<T> volume_render(ad::Tape<T>& tape, const Field<T>& field, const std::vector<CameraPose>& cams,
                         const RenderSettings& settings, const std::vector<T>& background) {
  const auto set = sample_rays(cams, settings);
  const std::size_t n = cams.size(), res = settings.resolution, p = res * res, s = settings.samples;
  auto [sigma, color] = field(tape.constant(set.points.template cast<T>()));
  if (sigma.shape() != ad::Shape{n, p * s} || color.shape().size() != 3 || color.shape()[1] != p * s) {
    throw ad::ShapeError("volume_render", "field returned sigma " + ad::shape_str(sigma.shape()) + ", color " +
                                              ad::shape_str(color.shape()));
  }
  const std::size_t k = color.shape()[2];
  if (background.size() != k) throw ad::ShapeError("volume_render", "background has " + std::to_string(background.size()) + " channels, field " + std::to_string(k));
  return ad::volume_composite(ad::reshape(sigma, ad::Shape{n, p, s}), ad::reshape(color, ad::Shape{n, p, s, k}),
                              set.delta.template cast<T>(), background, res, res);
}

template <typename T>
std::vector<T> white_background(std::size_t channels) {
  std::vector<T> bg(channels, T(0));
  for (std::size_t i = 0; i < std::min<std::size_t>(3, channels); ++i) bg[i] = T(1);
  return bg;
}

template ad::Var<float> volume_render(ad::Tape<float>&, const Field<float>&, const std::vector<CameraPose>&,
                                      const RenderSettings&, const std::vector<float>&);
template ad::Var<double> volume_render(ad::Tape<double>&, const Field<double>&, const std::vector<CameraPose>&,
                                       const RenderSettings&, const std::vector<double>&);
template std::vector<float> white_background(std::size_t);
template std::vector<double> white_background(std::size_t);

}  // namespace tpd::render
