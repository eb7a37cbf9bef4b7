// SPDX-License-Identifier: Apache-2.0
#include "tpd/triplane/triplane.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace tpd::triplane {

const char* plane_name(Plane p) {
  switch (p) {
    case Plane::kXY: return "xy";
    case Plane::kXZ: return "xz";
    case Plane::kYZ: return "yz";
  }
  return "?";
}

std::optional<Plane> parse_plane(std::string_view name) {
  for (Plane p : kAllPlanes) {
    if (name == plane_name(p)) return p;
  }
  return std::nullopt;
}

Point2 project(const Point3& p, Plane plane) {
  switch (plane) {
    case Plane::kXY: return {p[0], p[1]};
    case Plane::kXZ: return {p[0], p[2]};
    case Plane::kYZ: return {p[1], p[2]};
  }
  return {0.0, 0.0};
}

TriPlane::TriPlane(FeatureGrid xy, FeatureGrid xz, FeatureGrid yz) : grids_{std::move(xy), std::move(xz), std::move(yz)} {
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& v = grids_[i].values;
    if (v.rank() != 3 || v.dim(1) != v.dim(2)) throw ad::ShapeError("TriPlane", "grid must be [C, R, R], got " + ad::shape_str(v.shape()));
    if (v.dim(0) < 1 || v.dim(1) < 2) throw ad::ShapeError("TriPlane", "need C >= 1 and R >= 2, got " + ad::shape_str(v.shape()));
    if (v.shape() != grids_[0].values.shape()) throw ad::ShapeError("TriPlane", grids_[0].values.shape(), v.shape());
    grids_[i].plane = kAllPlanes[i];
  }
}

TriPlane TriPlane::from_channels(const ad::Tensor<float>& stacked) {
  if (stacked.rank() != 3 || stacked.dim(0) % 3 != 0) {
    throw ad::ShapeError("TriPlane::from_channels", "expected [3C, R, R], got " + ad::shape_str(stacked.shape()));
  }
  const std::size_t c = stacked.dim(0) / 3, plane_size = c * stacked.dim(1) * stacked.dim(2);
  std::array<FeatureGrid, 3> g;
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<float> v(stacked.ptr() + i * plane_size, stacked.ptr() + (i + 1) * plane_size);
    g[i] = FeatureGrid{kAllPlanes[i], ad::Tensor<float>(ad::Shape{c, stacked.dim(1), stacked.dim(2)}, std::move(v))};
  }
  return TriPlane(std::move(g[0]), std::move(g[1]), std::move(g[2]));
}

ad::Tensor<float> TriPlane::to_channels() const {
  const std::size_t c = channels(), r = resolution();
  std::vector<float> out;
  out.reserve(3 * c * r * r);
  for (const auto& g : grids_) out.insert(out.end(), g.values.data().begin(), g.values.data().end());
  return ad::Tensor<float>(ad::Shape{3 * c, r, r}, std::move(out));
}

bool operator==(const TriPlane& a, const TriPlane& b) {
  for (std::size_t i = 0; i < 3; ++i) {
    if (!(a.grids_[i].values == b.grids_[i].values)) return false;
  }
  return true;
}

ad::Tensor<float> stack(const std::vector<TriPlane>& planes) {
  if (planes.empty()) throw std::invalid_argument("triplane::stack: empty batch");
  const std::size_t c = planes[0].channels(), r = planes[0].resolution();
  std::vector<float> out;
  out.reserve(planes.size() * 3 * c * r * r);
  for (const auto& tp : planes) {
    if (tp.channels() != c || tp.resolution() != r) throw std::invalid_argument("triplane::stack: mixed tri-plane shapes");
    auto t = tp.to_channels();
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return ad::Tensor<float>(ad::Shape{planes.size(), 3 * c, r, r}, std::move(out));
}

std::vector<TriPlane> unstack(const ad::Tensor<float>& batch) {
  if (batch.rank() != 4) throw ad::ShapeError("triplane::unstack", "expected [N, 3C, R, R], got " + ad::shape_str(batch.shape()));
  const std::size_t n = batch.dim(0), per = batch.size() / n;
  std::vector<TriPlane> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> v(batch.ptr() + i * per, batch.ptr() + (i + 1) * per);
    out.push_back(TriPlane::from_channels(ad::Tensor<float>(ad::Shape{batch.dim(1), batch.dim(2), batch.dim(3)}, std::move(v))));
  }
  return out;
}

std::pair<TriPlane, TriPlane> swap_plane(const TriPlane& a, const TriPlane& b, Plane plane) {
  if (a.channels() != b.channels() || a.resolution() != b.resolution()) {
    throw std::invalid_argument("swap_plane: incompatible tri-planes (C=" + std::to_string(a.channels()) + ", R=" +
                                std::to_string(a.resolution()) + " vs C=" + std::to_string(b.channels()) + ", R=" +
                                std::to_string(b.resolution()) + ")");
  }
  TriPlane ra = a, rb = b;
  std::swap(ra.grid(plane).values, rb.grid(plane).values);
  return {std::move(ra), std::move(rb)};
}

ad::Tensor<float> sample(const TriPlane& tp, const std::vector<Point3>& points) {
  ad::Tape<float> tape;
  ad::Tensor<float> pts(ad::Shape{1, points.size(), 3});
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t k = 0; k < 3; ++k) pts[3 * i + k] = static_cast<float>(points[i][k]);
  auto stacked = stack({tp});
  auto planes = split_planes(tape.constant(stacked));
  auto out = sample(planes, tape.constant(pts));
  return out.value().reshaped(ad::Shape{points.size(), tp.channels()});
}

template <typename T>
PlaneVars<T> split_planes(const ad::Var<T>& stacked) {
  const auto& s = stacked.shape();
  if (s.size() != 4 || s[1] % 3 != 0) throw ad::ShapeError("split_planes", "expected [N, 3C, R, R], got " + ad::shape_str(s));
  const std::size_t c = s[1] / 3;
  return {ad::slice(stacked, 1, 0, c), ad::slice(stacked, 1, c, 2 * c), ad::slice(stacked, 1, 2 * c, 3 * c)};
}

template <typename T>
ad::Var<T> project(const ad::Var<T>& points, Plane plane) {
  switch (plane) {
    case Plane::kXY: return ad::slice(points, 2, 0, 2);
    case Plane::kXZ: return ad::concat<T>({ad::slice(points, 2, 0, 1), ad::slice(points, 2, 2, 3)}, 2);
    case Plane::kYZ: return ad::slice(points, 2, 1, 3);
  }
  throw std::invalid_argument("project: bad plane");
}

template <typename T>
ad::Var<T> sample(const PlaneVars<T>& planes, const ad::Var<T>& points) {
  auto fxy = ad::grid_sample(planes.xy, project(points, Plane::kXY));
  auto fxz = ad::grid_sample(planes.xz, project(points, Plane::kXZ));
  auto fyz = ad::grid_sample(planes.yz, project(points, Plane::kYZ));
  return ad::add(ad::add(fxy, fxz), fyz);
}

template PlaneVars<float> split_planes(const ad::Var<float>&);
template PlaneVars<double> split_planes(const ad::Var<double>&);
template ad::Var<float> project(const ad::Var<float>&, Plane);
template ad::Var<double> project(const ad::Var<double>&, Plane);
template ad::Var<float> sample(const PlaneVars<float>&, const ad::Var<float>&);
template ad::Var<double> sample(const PlaneVars<double>&, const ad::Var<double>&);

}  // namespace tpd::triplane
