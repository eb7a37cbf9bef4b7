// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "tpd/autodiff/ops.hpp"

// Orbit camera, ray generation and differentiable volume rendering.
//
// The camera sits at radius * (sin yaw cos pitch, sin pitch, cos yaw cos pitch)
// and looks at the origin with world up +y, so yaw = 0 views the xy-plane from
// +z. Rays are sampled between near = radius - 1 and far = radius + 1, which
// covers the [-1, 1]^3 volume.
namespace tpd::render {

using Vec3 = std::array<double, 3>;

inline constexpr double kPi = 3.14159265358979323846;

struct CameraPose {
  double yaw = 0.0;    ///< (-pi, pi]; 0 is frontal
  double pitch = 0.0;  ///< [-pi/4, pi/4]
  double radius = 2.7;
  double fov_y = 0.3;

  double near() const { return radius - 1.0; }
  double far() const { return radius + 1.0; }
  Vec3 position() const;

  /// Throws std::invalid_argument when a field is out of range.
  void validate() const;
};

/// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

struct Ray {
  Vec3 origin;
  Vec3 dir;  ///< unit length
  double t_near;
  double t_far;
};

/// Pinhole ray through continuous pixel coordinates (col, row) of a res x res
/// image; (j + 0.5, i + 0.5) is the centre of pixel (i, j).
Ray pixel_ray(const CameraPose& cam, std::size_t res, double col, double row);

/// Pinhole rays through pixel centres, row-major from the top-left pixel.
std::vector<Ray> generate_rays(const CameraPose& cam, std::size_t res);

enum class ViewTag { kFront, kBack };

const char* view_tag_name(ViewTag t);
std::optional<ViewTag> parse_view_tag(std::string_view s);

/// Front iff |yaw| <= pi/2.
ViewTag classify_view(const CameraPose& cam);

/// Signed horizontal offset from the frontal view, which is the yaw itself.
double horizontal_offset(const CameraPose& cam);

/// True when |horizontal_offset| <= tau.
bool within_offset(const CameraPose& cam, double tau);

/// Conditioning vector (sin yaw, cos yaw, sin pitch, cos pitch).
inline constexpr std::size_t kPoseDim = 4;
std::array<double, kPoseDim> pose_vector(const CameraPose& cam);

/// [N, 4] conditioning batch.
ad::Tensor<float> pose_batch(const std::vector<CameraPose>& cams);

struct RenderSettings {
  std::size_t resolution = 32;
  std::size_t samples = 48;
  /// Stratified jitter seed; absent means midpoint samples (evaluation mode).
  std::optional<std::uint64_t> jitter_seed;
};

/// Sample positions along every ray of a batch of cameras.
struct SampleSet {
  ad::Tensor<float> points;  ///< [N, P * S, 3], ray-major
  ad::Tensor<float> delta;   ///< [N, P, S]
};

/// Sample i of a ray lies at t_n + (i + u_i) * (t_f - t_n) / S with u_i in
/// [0, 1); delta_i = t_{i+1} - t_i and the last segment runs to t_f. With
/// jitter, u_i is drawn from a counter-based hash of (seed, camera, pixel,
/// sample), so the draw does not depend on evaluation order.
SampleSet sample_rays(const std::vector<CameraPose>& cams, const RenderSettings& settings);

/// A radiance field maps points [N, M, 3] to densities [N, M] (>= 0) and
/// colours/features [N, M, K].
template <typename T>
using Field = std::function<std::pair<ad::Var<T>, ad::Var<T>>(const ad::Var<T>& points)>;

/// Renders [N, K + 1, res, res]: K composited channels over the background
/// followed by the accumulated opacity.
template <typename T>
ad::Var<T> volume_render(ad::Tape<T>& tape, const Field<T>& field, const std::vector<CameraPose>& cams,
                         const RenderSettings& settings, const std::vector<T>& background);

/// White for the first three channels and zero for the rest.
template <typename T>
std::vector<T> white_background(std::size_t channels);

}  // namespace tpd::render
