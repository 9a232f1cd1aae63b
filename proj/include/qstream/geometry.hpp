// Copyright 2026 The QStream Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "qstream/error.hpp"

namespace qstream {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;

// Wraps an angle into the principal range (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  double r = std::fmod(a + std::numbers::pi, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  r -= std::numbers::pi;
  if (r <= -std::numbers::pi) r = std::numbers::pi;
  return r;
}

inline Mat3 rot_z(double yaw) {
  return Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
}

// Rigid transform x -> R x + t. Maps points from the child frame into the parent frame.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }
  static Pose from_yaw(double yaw, const Vec3& t = Vec3::Zero()) { return {rot_z(yaw), t}; }
  static Pose from_translation(const Vec3& t) { return {Mat3::Identity(), t}; }

  bool is_valid(double tol = 1e-9) const {
    const Mat3 g = rotation.transpose() * rotation - Mat3::Identity();
    return rotation.allFinite() && translation.allFinite() && g.cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol;
  }

  // Yaw of the rotated x axis in the parent frame.
  double yaw() const { return std::atan2(rotation(1, 0), rotation(0, 0)); }

  // True when the rotated z axis stays within tol of the parent z axis.
  bool is_yaw_dominant(double tol = 1e-6) const {
    return (rotation.col(2) - Vec3::UnitZ()).cwiseAbs().maxCoeff() <= tol;
  }

  bool operator==(const Pose&) const = default;
};

// Result applies b first, then a.
inline Pose compose_pose(const Pose& a, const Pose& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

inline Pose inverse_pose(const Pose& p) {
  const Mat3 rt = p.rotation.transpose();
  return {rt, -rt * p.translation};
}

inline Vec3 transform_point(const Pose& p, const Vec3& x) { return p.rotation * x + p.translation; }

// Nearest rotation in the Frobenius sense; used after float32 transport.
inline Mat3 orthonormalize(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) *= -1.0;
  return u * v.transpose();
}

struct BBox3D {
  Vec3 center = Vec3::Zero();
  Vec3 dims = Vec3::Ones();  // length (along yaw), width, height
  double yaw = 0.0;
  int class_id = 0;

  bool is_valid() const {
    return center.allFinite() && dims.allFinite() && (dims.array() > 0.0).all() &&
           yaw > -std::numbers::pi && yaw <= std::numbers::pi && class_id >= 0;
  }

  bool operator==(const BBox3D&) const = default;
};

inline BBox3D transform_box(const Pose& p, const BBox3D& b) {
  if (!p.is_yaw_dominant()) {
    fail(ErrorCode::kNonPlanarRotation, "box transforms require a yaw-only rotation");
  }
  BBox3D out = b;
  out.center = transform_point(p, b.center);
  out.yaw = wrap_angle(b.yaw + p.yaw());
  return out;
}

struct PerceptionRange {
  double x_min = 0.0, y_min = -39.0, x_max = 100.0, y_max = 39.0;
  double z_min = -3.0, z_max = 5.0;

  bool is_valid() const { return x_min < x_max && y_min < y_max && z_min < z_max; }

  bool contains(const Vec3& p) const {
    return p.x() >= x_min && p.x() <= x_max && p.y() >= y_min && p.y() <= y_max &&
           p.z() >= z_min && p.z() <= z_max;
  }
  bool contains_bev(const Vec3& p) const {
    return p.x() >= x_min && p.x() <= x_max && p.y() >= y_min && p.y() <= y_max;
  }

  bool operator==(const PerceptionRange&) const = default;
};

// ---- BEV polygons -----------------------------------------------------------

using Polygon = std::vector<Vec2>;

// Counter-clockwise footprint corners.
inline std::array<Vec2, 4> footprint(const BBox3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = 0.5 * b.dims.x(), hw = 0.5 * b.dims.y();
  const Vec2 ax(c * hl, s * hl), ay(-s * hw, c * hw);
  const Vec2 ctr(b.center.x(), b.center.y());
  return {ctr - ax - ay, ctr + ax - ay, ctr + ax + ay, ctr - ax + ay};
}

inline double polygon_area(std::span<const Vec2> poly) {
  if (poly.size() < 3) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % poly.size()];
    acc += p.x() * q.y() - q.x() * p.y();
  }
  return 0.5 * std::abs(acc);
}

namespace detail {

inline double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

}  // namespace detail

// Sutherland-Hodgman: clips `subject` by the convex CCW polygon `clip`.
inline Polygon clip_convex(const Polygon& subject, std::span<const Vec2> clip) {
  constexpr double kEps = 1e-12;
  Polygon out = subject;
  for (std::size_t e = 0; e < clip.size() && !out.empty(); ++e) {
    const Vec2& a = clip[e];
    const Vec2& b = clip[(e + 1) % clip.size()];
    const Vec2 edge = b - a;
    Polygon in = std::move(out);
    out.clear();
    for (std::size_t i = 0; i < in.size(); ++i) {
      const Vec2& p = in[i];
      const Vec2& q = in[(i + 1) % in.size()];
      const double sp = detail::cross2(edge, p - a);
      const double sq = detail::cross2(edge, q - a);
      const bool p_in = sp >= -kEps;
      const bool q_in = sq >= -kEps;
      if (p_in) out.push_back(p);
      if (p_in != q_in) {
        const double denom = sp - sq;
        if (std::abs(denom) > kEps) out.push_back(p + (q - p) * (sp / denom));
      }
    }
  }
  return out;
}

// Lexicographic order on the BEV parameters; lets bev_iou be bit-symmetric.
inline bool bev_less(const BBox3D& a, const BBox3D& b) {
  const std::array<double, 5> ka{a.center.x(), a.center.y(), a.dims.x(), a.dims.y(), a.yaw};
  const std::array<double, 5> kb{b.center.x(), b.center.y(), b.dims.x(), b.dims.y(), b.yaw};
  return ka < kb;
}

inline double bev_iou(const BBox3D& a_in, const BBox3D& b_in) {
  const bool swap = bev_less(b_in, a_in);
  const BBox3D& a = swap ? b_in : a_in;
  const BBox3D& b = swap ? a_in : b_in;
  const auto fa = footprint(a);
  const auto fb = footprint(b);
  const double area_a = a.dims.x() * a.dims.y();
  const double area_b = b.dims.x() * b.dims.y();
  // Cheap reject on circumscribed circles.
  const double ra = 0.5 * std::hypot(a.dims.x(), a.dims.y());
  const double rb = 0.5 * std::hypot(b.dims.x(), b.dims.y());
  if (std::hypot(a.center.x() - b.center.x(), a.center.y() - b.center.y()) > ra + rb) return 0.0;
  const Polygon inter = clip_convex(Polygon(fa.begin(), fa.end()), fb);
  const double ia = polygon_area(inter);
  const double uni = area_a + area_b - ia;
  if (uni <= 0.0) return 0.0;
  return std::clamp(ia / uni, 0.0, 1.0);
}

inline bool point_in_footprint(const BBox3D& b, const Vec2& p) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double dx = p.x() - b.center.x(), dy = p.y() - b.center.y();
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  return std::abs(lx) <= 0.5 * b.dims.x() && std::abs(ly) <= 0.5 * b.dims.y();
}

// ---- location grid ----------------------------------------------------------

struct LocationGrid {
  std::vector<Vec3> points;
  int grid_size = 1;
  double spacing = 1.0;
};

inline LocationGrid location_grid(const Vec3& center, int grid_size, double spacing) {
  if (grid_size < 1 || grid_size % 2 == 0) {
    fail(ErrorCode::kInvalidGrid, "grid size must be odd and positive");
  }
  if (!(spacing > 0.0)) fail(ErrorCode::kInvalidGrid, "grid spacing must be positive");
  const int half = (grid_size - 1) / 2;
  LocationGrid g;
  g.grid_size = grid_size;
  g.spacing = spacing;
  g.points.reserve(static_cast<std::size_t>(grid_size) * grid_size * grid_size);
  for (int i = -half; i <= half; ++i)
    for (int j = -half; j <= half; ++j)
      for (int k = -half; k <= half; ++k)
        g.points.push_back(center + spacing * Vec3(i, j, k));
  return g;
}

// Per-axis min-max normalization into [0, 1], concatenated in grid order.
inline Eigen::VectorXd normalize_grid(const LocationGrid& g, const PerceptionRange& r) {
  Eigen::VectorXd out(3 * static_cast<Eigen::Index>(g.points.size()));
  const Vec3 lo(r.x_min, r.y_min, r.z_min);
  const Vec3 span(r.x_max - r.x_min, r.y_max - r.y_min, r.z_max - r.z_min);
  for (std::size_t i = 0; i < g.points.size(); ++i) {
    for (int a = 0; a < 3; ++a) {
      const double v = (g.points[i][a] - lo[a]) / span[a];
      out[3 * static_cast<Eigen::Index>(i) + a] = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

// Componentwise [0,1] normalization of a single point (decoder input).
inline Vec3 normalize_point(const Vec3& p, const PerceptionRange& r) {
  return Vec3(std::clamp((p.x() - r.x_min) / (r.x_max - r.x_min), 0.0, 1.0),
              std::clamp((p.y() - r.y_min) / (r.y_max - r.y_min), 0.0, 1.0),
              std::clamp((p.z() - r.z_min) / (r.z_max - r.z_min), 0.0, 1.0));
}

}  // namespace qstream
