// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <optional>
#include <string_view>
#include <utility>
#include <vector>

#include "tpd/autodiff/ops.hpp"

// Tri-plane feature volumes.
//
// A point (x, y, z) in [-1, 1]^3 is projected onto three axis-aligned planes
// by dropping one coordinate: xy keeps (x, y), xz keeps (x, z), yz keeps
// (y, z). Each plane is a C x R x R grid stored as [C, rows, cols]; the first
// kept coordinate indexes columns and the second indexes rows. Cell k is
// centred at -1 + (2k + 1) / R. The feature of a point is the sum of the
// three bilinear plane lookups. y is up and the default frontal camera looks
// down -z, so xy is the front-view plane.
namespace tpd::triplane {

enum class Plane { kXY = 0, kXZ = 1, kYZ = 2 };

inline constexpr std::array<Plane, 3> kAllPlanes{Plane::kXY, Plane::kXZ, Plane::kYZ};

const char* plane_name(Plane p);
std::optional<Plane> parse_plane(std::string_view name);

using Point3 = std::array<double, 3>;
using Point2 = std::array<double, 2>;

Point2 project(const Point3& p, Plane plane);

/// Centre coordinate of cell k on an axis of n cells.
inline double cell_center(std::size_t k, std::size_t n) {
  return -1.0 + (2.0 * static_cast<double>(k) + 1.0) / static_cast<double>(n);
}

struct FeatureGrid {
  Plane plane = Plane::kXY;
  ad::Tensor<float> values;  ///< [C, R, R]

  std::size_t channels() const { return values.dim(0); }
  std::size_t resolution() const { return values.dim(1); }
};

/// One sample's tri-plane. All grids share C and R (C >= 1, R >= 2).
class TriPlane {
 public:
  TriPlane(FeatureGrid xy, FeatureGrid xz, FeatureGrid yz);

  /// Splits a [3C, R, R] backbone output: channels [0, C) -> xy,
  /// [C, 2C) -> xz, [2C, 3C) -> yz.
  static TriPlane from_channels(const ad::Tensor<float>& stacked);

  /// Inverse of from_channels.
  ad::Tensor<float> to_channels() const;

  const FeatureGrid& grid(Plane p) const { return grids_[static_cast<std::size_t>(p)]; }
  FeatureGrid& grid(Plane p) { return grids_[static_cast<std::size_t>(p)]; }
  std::size_t channels() const { return grids_[0].channels(); }
  std::size_t resolution() const { return grids_[0].resolution(); }

  friend bool operator==(const TriPlane& a, const TriPlane& b);

 private:
  std::array<FeatureGrid, 3> grids_;
};

/// Batches tri-planes into [N, 3C, R, R]; the inverse splits a batch.
ad::Tensor<float> stack(const std::vector<TriPlane>& planes);
std::vector<TriPlane> unstack(const ad::Tensor<float>& batch);

/// Copies of a and b with the named plane exchanged. Throws
/// std::invalid_argument when channel count or resolution differ.
std::pair<TriPlane, TriPlane> swap_plane(const TriPlane& a, const TriPlane& b, Plane plane);

/// Summed features at each point, [P, C].
ad::Tensor<float> sample(const TriPlane& tp, const std::vector<Point3>& points);

// Differentiable forms over batched planes.

template <typename T>
struct PlaneVars {
  ad::Var<T> xy, xz, yz;  ///< each [N, C, R, R]
};

/// Views a [N, 3C, R, R] tensor as three planes using the fixed channel partition.
template <typename T>
PlaneVars<T> split_planes(const ad::Var<T>& stacked);

/// points [N, P, 3] -> plane coordinates [N, P, 2].
template <typename T>
ad::Var<T> project(const ad::Var<T>& points, Plane plane);

/// Summed bilinear features, [N, P, C]; differentiable in plane values and points.
template <typename T>
ad::Var<T> sample(const PlaneVars<T>& planes, const ad::Var<T>& points);

}  // namespace tpd::triplane
