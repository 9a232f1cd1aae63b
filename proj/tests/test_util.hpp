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

// Helpers shared by the test binaries: random fixtures and independent oracles.

#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>
#include <numbers>

#include <Eigen/Geometry>

#include "qstream/geometry.hpp"
#include "qstream/query.hpp"
#include "qstream/rng.hpp"

namespace qstream::testing {

inline BBox3D random_box(Rng& rng, double spread = 4.0) {
  BBox3D b;
  b.center = Vec3(rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-1.0, 1.0));
  b.dims = Vec3(rng.uniform(0.5, 5.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 2.5));
  b.yaw = wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi));
  return b;
}

// Arbitrary 3D rotation (not yaw-only) plus translation.
inline Pose random_pose(Rng& rng) {
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  Pose p;
  p.rotation = Eigen::AngleAxisd(rng.uniform(-std::numbers::pi, std::numbers::pi), axis).toRotationMatrix();
  p.translation = Vec3(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-10, 10));
  return p;
}

inline Pose random_yaw_pose(Rng& rng) {
  return Pose::from_yaw(rng.uniform(-std::numbers::pi, std::numbers::pi),
                        Vec3(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-5, 5)));
}

// Point inside a yawed rectangle, written from scratch: rotate into the box frame.
inline bool inside_rect(const BBox3D& b, double x, double y) {
  const double dx = x - b.center.x(), dy = y - b.center.y();
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double u = c * dx + s * dy, v = -s * dx + c * dy;
  return std::abs(u) <= 0.5 * b.dims.x() && std::abs(v) <= 0.5 * b.dims.y();
}

// Monte-Carlo BEV IoU: uniform points over a square covering both footprints.
inline double mc_bev_iou(const BBox3D& a, const BBox3D& b, int samples, Rng& rng) {
  const double ra = 0.5 * std::hypot(a.dims.x(), a.dims.y()), rb = 0.5 * std::hypot(b.dims.x(), b.dims.y());
  const double x0 = std::min(a.center.x() - ra, b.center.x() - rb), x1 = std::max(a.center.x() + ra, b.center.x() + rb);
  const double y0 = std::min(a.center.y() - ra, b.center.y() - rb), y1 = std::max(a.center.y() + ra, b.center.y() + rb);
  long in_a = 0, in_b = 0, both = 0;
  for (int i = 0; i < samples; ++i) {
    const double x = rng.uniform(x0, x1), y = rng.uniform(y0, y1);
    const bool pa = inside_rect(a, x, y), pb = inside_rect(b, x, y);
    in_a += pa;
    in_b += pb;
    both += pa && pb;
  }
  const long uni = in_a + in_b - both;
  return uni == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(uni);
}

inline ObjectQuery random_query(Rng& rng, int feature_dim, std::int64_t id) {
  ObjectQuery q;
  q.feature = Eigen::VectorXd(feature_dim);
  for (int i = 0; i < feature_dim; ++i) q.feature[i] = rng.normal(0.0, 2.0);
  q.ref_point = Vec3(rng.uniform(-60, 120), rng.uniform(-60, 60), rng.uniform(-4, 6));
  q.confidence = rng.uniform();
  q.class_id = static_cast<int>(rng.below(5));
  q.query_id = id;
  return q;
}

inline QueryBatch random_batch(Rng& rng, int n, int feature_dim) {
  QueryBatch b;
  b.agent_id = static_cast<std::uint32_t>(rng.next_u64());
  b.frame_id = rng.next_u64();
  b.pose = random_pose(rng);
  for (int i = 0; i < n; ++i) b.queries.push_back(random_query(rng, feature_dim, i));
  return b;
}

// Independent statement of the replacement law, as the multiset of first
// feature entries (callers tag each query uniquely there).
inline std::multiset<double> expected_complement(const std::vector<ObjectQuery>& veh, std::vector<ObjectQuery> in,
                                                 std::size_t k) {
  std::vector<ObjectQuery> v = veh;
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
    return a.confidence != b.confidence ? a.confidence < b.confidence : a.query_id < b.query_id;
  });
  std::sort(in.begin(), in.end(), [](const auto& a, const auto& b) {
    return a.confidence != b.confidence ? a.confidence > b.confidence : a.query_id < b.query_id;
  });
  const std::size_t m = std::min(v.size(), in.size());
  const std::size_t size = std::min(std::max(v.size(), v.size() - m + in.size()), k);
  std::multiset<double> out;
  for (std::size_t i = m; i < v.size(); ++i) out.insert(v[i].feature[0]);
  for (std::size_t i = 0; out.size() < size && i < in.size(); ++i) out.insert(in[i].feature[0]);
  return out;
}

}  // namespace qstream::testing
