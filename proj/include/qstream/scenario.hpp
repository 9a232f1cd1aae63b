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
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "qstream/error.hpp"
#include "qstream/geometry.hpp"
#include "qstream/nn.hpp"
#include "qstream/query.hpp"
#include "qstream/rng.hpp"

namespace qstream::scenario {

struct SceneObject {
  std::int64_t id = 0;
  BBox3D box;  // world frame

  bool operator==(const SceneObject&) const = default;
};

struct Scene {
  std::vector<SceneObject> objects;
  Pose veh_pose;  // agent -> world
  Pose inf_pose;
  std::uint64_t seed = 0;

  const SceneObject* find(std::int64_t id) const {
    for (const auto& o : objects)
      if (o.id == id) return &o;
    return nullptr;
  }

  bool operator==(const Scene&) const = default;
};

struct SceneConfig {
  int num_objects_min = 20;
  int num_objects_max = 40;
  PerceptionRange extent;  // world frame
  double length_min = 3.6, length_max = 5.0;
  double width_min = 1.6, width_max = 2.1;
  double height_min = 1.4, height_max = 1.9;
  int num_classes = 1;
  Pose veh_pose = Pose::identity();
  // Roadside unit: 40 m ahead, 6 m up, looking back toward the vehicle.
  Pose inf_pose = Pose::from_yaw(std::numbers::pi, Vec3(40.0, 0.0, 6.0));
  // Footprint reserved for the ego vehicle at its own pose.
  Vec3 ego_dims = Vec3(4.6, 1.9, 1.6);
  int max_rejections = 10000;
};

struct VisibilityConfig {
  double fov_deg = 120.0;
  double max_range = 70.0;
  bool occlusion_enabled = true;

  bool is_valid() const { return fov_deg > 0.0 && fov_deg <= 360.0 && max_range > 0.0; }
};

struct DetectorNoise {
  double pos_sigma = 0.3;
  // Position noise scales by (1 + gain * distance / max_range).
  double pos_sigma_range_gain = 0.0;
  double miss_rate_base = 0.05;
  double conf_noise_sigma = 0.05;
  // Floor on the confidence of anything the detector reports as an object.
  double min_object_conf = 0.1;
  // Fixed decoder slot count; slots without an object become background queries.
  int query_slots = 100;
  // Background confidence is background_conf_max * u^background_conf_power, u ~ U[0, 1).
  double background_conf_max = 0.6;
  double background_conf_power = 4.0;
  // Probability that a padding slot is a ghost: a hallucinated object with a
  // plausible box and distance-driven confidence, indistinguishable per agent.
  double ghost_fraction = 0.05;

  bool is_valid() const {
    return pos_sigma >= 0.0 && pos_sigma_range_gain >= 0.0 && conf_noise_sigma >= 0.0 && min_object_conf >= 0.0 &&
           min_object_conf <= 1.0 &&
           miss_rate_base >= 0.0 && miss_rate_base <= 1.0 && query_slots >= 0 &&
           background_conf_max >= 0.0 && background_conf_max <= 1.0 && background_conf_power > 0.0 &&
           ghost_fraction >= 0.0 && ghost_fraction <= 1.0;
  }
};

struct AgentConfig {
  VisibilityConfig visibility;
  DetectorNoise noise;
};

inline constexpr int kDescriptorDim = 10;

inline Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  if (cfg.num_objects_min < 0 || cfg.num_objects_max < cfg.num_objects_min || !cfg.extent.is_valid()) {
    fail(ErrorCode::kInvalidArgument, "invalid scene configuration");
  }
  Rng rng(seed);
  Scene s;
  s.seed = seed;
  s.veh_pose = cfg.veh_pose;
  s.inf_pose = cfg.inf_pose;
  const int span = cfg.num_objects_max - cfg.num_objects_min + 1;
  const int n = cfg.num_objects_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));

  std::vector<BBox3D> occupied;
  BBox3D ego;
  ego.center = cfg.veh_pose.translation;
  ego.dims = cfg.ego_dims;
  ego.yaw = wrap_angle(cfg.veh_pose.yaw());
  occupied.push_back(ego);

  int rejections = 0;
  for (int i = 0; i < n; ++i) {
    for (;;) {
      BBox3D b;
      b.dims = Vec3(rng.uniform(cfg.length_min, cfg.length_max), rng.uniform(cfg.width_min, cfg.width_max),
                    rng.uniform(cfg.height_min, cfg.height_max));
      b.yaw = wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi));
      const double half_diag = 0.5 * std::hypot(b.dims.x(), b.dims.y());
      b.center = Vec3(rng.uniform(cfg.extent.x_min + half_diag, cfg.extent.x_max - half_diag),
                      rng.uniform(cfg.extent.y_min + half_diag, cfg.extent.y_max - half_diag), 0.5 * b.dims.z());
      b.class_id = cfg.num_classes > 1 ? static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes))) : 0;
      const bool clash = std::any_of(occupied.begin(), occupied.end(),
                                     [&](const BBox3D& o) { return bev_iou(o, b) > 0.0; });
      if (!clash) {
        occupied.push_back(b);
        s.objects.push_back({static_cast<std::int64_t>(i), b});
        break;
      }
      if (++rejections >= cfg.max_rejections) {
        fail(ErrorCode::kPlacementFailure, "could not place object " + std::to_string(i));
      }
    }
  }
  return s;
}

// Segment against a yaw-rotated footprint, by Liang-Barsky clipping in the box frame.
inline bool segment_hits_footprint(const Vec2& a, const Vec2& b, const BBox3D& box) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  auto local = [&](const Vec2& p) {
    const double dx = p.x() - box.center.x(), dy = p.y() - box.center.y();
    return Vec2(c * dx + s * dy, -s * dx + c * dy);
  };
  const Vec2 p0 = local(a), p1 = local(b);
  const Vec2 d = p1 - p0;
  const double hl = 0.5 * box.dims.x(), hw = 0.5 * box.dims.y();
  double t0 = 0.0, t1 = 1.0;
  const double p[4] = {-d.x(), d.x(), -d.y(), d.y()};
  const double q[4] = {p0.x() + hl, hl - p0.x(), p0.y() + hw, hw - p0.y()};
  for (int i = 0; i < 4; ++i) {
    if (p[i] == 0.0) {
      if (q[i] < 0.0) return false;
    } else {
      const double t = q[i] / p[i];
      if (p[i] < 0.0) {
        t0 = std::max(t0, t);
      } else {
        t1 = std::min(t1, t);
      }
      if (t0 > t1) return false;
    }
  }
  return true;
}

inline bool is_occluded(const Vec2& agent_xy, const BBox3D& target, const std::vector<BBox3D>& blockers) {
  const Vec2 tgt(target.center.x(), target.center.y());
  return std::any_of(blockers.begin(), blockers.end(),
                     [&](const BBox3D& b) { return segment_hits_footprint(agent_xy, tgt, b); });
}

// Object ids visible from an agent (pose is agent -> world), in scene order.
inline std::vector<std::int64_t> visible_objects(const Scene& scene, const Pose& agent_pose,
                                                 const VisibilityConfig& vis) {
  const Pose world_to_agent = inverse_pose(agent_pose);
  const Vec2 agent_xy(agent_pose.translation.x(), agent_pose.translation.y());
  const double half_fov = 0.5 * vis.fov_deg * std::numbers::pi / 180.0;
  std::vector<std::int64_t> out;
  std::vector<BBox3D> blockers;
  for (const auto& target : scene.objects) {
    const Vec3 local = transform_point(world_to_agent, target.box.center);
    const double dist = std::hypot(local.x(), local.y());
    if (dist > vis.max_range) continue;
    if (vis.fov_deg < 360.0 && std::abs(std::atan2(local.y(), local.x())) > half_fov) continue;
    if (vis.occlusion_enabled) {
      blockers.clear();
      for (const auto& o : scene.objects)
        if (o.id != target.id) blockers.push_back(o.box);
      if (is_occluded(agent_xy, target.box, blockers)) continue;
    }
    out.push_back(target.id);
  }
  return out;
}

// Agent-frame box descriptor fed to the detection encoder:
// center / kDescriptorCenterScale (3) | dims (3) | cos yaw | sin yaw | distance / max_range | class_id / 10.
inline double kDescriptorCenterScale = 20.0;
inline Eigen::VectorXd box_descriptor(const Vec3& center, const Vec3& dims, double yaw, double distance,
                                      double max_range, int class_id) {
  Eigen::VectorXd d(kDescriptorDim);
  const Vec3 c = center / kDescriptorCenterScale;
  d << c.x(), c.y(), c.z(), dims.x(), dims.y(), dims.z(), std::cos(yaw), std::sin(yaw), distance / max_range,
      class_id / 10.0;
  return d;
}

// Background slots carry no object evidence: zero dims and heading.
inline Eigen::VectorXd background_descriptor(const Vec3& center, double distance, double max_range) {
  Eigen::VectorXd d = Eigen::VectorXd::Zero(kDescriptorDim);
  d.head<3>() = center / kDescriptorCenterScale;
  d[8] = distance / max_range;
  return d;
}

// Detector output before feature encoding; training needs the descriptors.
struct RawDetections {
  QueryBatch batch;  // features left empty
  std::vector<Eigen::VectorXd> descriptors;
};

inline RawDetections simulate_raw(const Scene& scene, std::uint32_t agent_id, const Pose& agent_pose,
                                  const AgentConfig& agent, Rng& rng, const SceneConfig& shapes = {}) {
  if (!agent.visibility.is_valid() || !agent.noise.is_valid()) {
    fail(ErrorCode::kInvalidArgument, "invalid agent configuration");
  }
  const auto& vis = agent.visibility;
  const auto& noise = agent.noise;
  const Pose world_to_agent = inverse_pose(agent_pose);
  RawDetections out;
  out.batch.agent_id = agent_id;
  out.batch.frame_id = scene.seed;
  out.batch.pose = agent_pose;

  std::int64_t next_id = 0;
  for (std::int64_t id : visible_objects(scene, agent_pose, vis)) {
    const SceneObject& obj = *scene.find(id);
    const BBox3D local = transform_box(world_to_agent, obj.box);
    const double dist = std::hypot(local.center.x(), local.center.y());
    const double miss_rate = std::min(1.0, noise.miss_rate_base + 0.5 * dist / vis.max_range);
    if (rng.uniform() < miss_rate) continue;
    const double sigma = noise.pos_sigma * (1.0 + noise.pos_sigma_range_gain * dist / vis.max_range);
    const Vec3 jitter(rng.normal(0.0, sigma), rng.normal(0.0, sigma), rng.normal(0.0, sigma));
    const double conf = std::clamp(1.0 - dist / vis.max_range + rng.normal(0.0, noise.conf_noise_sigma),
                                 noise.min_object_conf, 1.0);

    ObjectQuery q;
    q.ref_point = local.center + jitter;
    q.confidence = conf;
    q.class_id = local.class_id;
    q.query_id = next_id++;
    q.source_id = id;
    out.descriptors.push_back(box_descriptor(q.ref_point, local.dims, local.yaw, dist, vis.max_range, local.class_id));
    out.batch.queries.push_back(std::move(q));
  }

  // Pad to the slot count with background queries spread over the field of view.
  const double half_fov = std::min(std::numbers::pi, 0.5 * vis.fov_deg * std::numbers::pi / 180.0);
  const double ground_z = 0.8 - agent_pose.translation.z();
  while (static_cast<int>(out.batch.queries.size()) < noise.query_slots) {
    ObjectQuery q;
    q.query_id = next_id++;
    q.source_id = kNoSource;
    q.class_id = 0;
    const double ang = rng.uniform(-half_fov, half_fov);
    if (rng.uniform() < noise.ghost_fraction) {
      const double r = vis.max_range * std::sqrt(rng.uniform());
      const Vec3 dims(rng.uniform(shapes.length_min, shapes.length_max), rng.uniform(shapes.width_min, shapes.width_max),
                      rng.uniform(shapes.height_min, shapes.height_max));
      const double yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
      q.ref_point = Vec3(r * std::cos(ang), r * std::sin(ang), 0.5 * dims.z() - agent_pose.translation.z());
      q.confidence = std::clamp(1.0 - r / vis.max_range + rng.normal(0.0, noise.conf_noise_sigma),
                                  noise.min_object_conf, 1.0);
      out.descriptors.push_back(box_descriptor(q.ref_point, dims, yaw, r, vis.max_range, 0));
    } else {
      const double r = vis.max_range * rng.uniform();
      const double u = rng.uniform();
      q.ref_point = Vec3(r * std::cos(ang), r * std::sin(ang), ground_z);
      q.confidence = noise.background_conf_max * std::pow(u, noise.background_conf_power);
      out.descriptors.push_back(background_descriptor(q.ref_point, r, vis.max_range));
    }
    out.batch.queries.push_back(std::move(q));
  }
  return out;
}

// Simulated individual detector: visible objects become noisy queries whose
// features come from `encoder` applied to the agent-frame box descriptor.
inline QueryBatch simulate_detections(const Scene& scene, std::uint32_t agent_id, const Pose& agent_pose,
                                      const AgentConfig& agent, const nn::DenseNet& encoder, Rng& rng,
                                      const SceneConfig& shapes = {}) {
  if (encoder.in_dim() != kDescriptorDim) fail(ErrorCode::kDimMismatch, "detection encoder expects 10 inputs");
  RawDetections raw = simulate_raw(scene, agent_id, agent_pose, agent, rng, shapes);
  for (std::size_t i = 0; i < raw.batch.queries.size(); ++i) {
    raw.batch.queries[i].feature = nn::forward(encoder, raw.descriptors[i]);
  }
  return std::move(raw.batch);
}

// ---- scene text format ----
//   # qstream scene v1
//   seed <u64>
//   veh_pose r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz
//   inf_pose ...
//   obj <id> <class> <cx> <cy> <cz> <length> <width> <height> <yaw>

namespace detail {

inline void write_pose_line(std::ostream& os, const char* tag, const Pose& p) {
  os << tag;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) os << ' ' << p.rotation(r, c);
  for (int i = 0; i < 3; ++i) os << ' ' << p.translation[i];
  os << '\n';
}

inline Pose read_pose_fields(std::istringstream& is) {
  Pose p;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) is >> p.rotation(r, c);
  for (int i = 0; i < 3; ++i) is >> p.translation[i];
  return p;
}

}  // namespace detail

inline void write_scene(std::ostream& os, const Scene& s) {
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "# qstream scene v1\n";
  os << "seed " << s.seed << '\n';
  detail::write_pose_line(os, "veh_pose", s.veh_pose);
  detail::write_pose_line(os, "inf_pose", s.inf_pose);
  for (const auto& o : s.objects) {
    const auto& b = o.box;
    os << "obj " << o.id << ' ' << b.class_id << ' ' << b.center.x() << ' ' << b.center.y() << ' ' << b.center.z()
       << ' ' << b.dims.x() << ' ' << b.dims.y() << ' ' << b.dims.z() << ' ' << b.yaw << '\n';
  }
}

inline Scene read_scene(std::istream& is) {
  Scene s;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "seed") {
      ls >> s.seed;
    } else if (tag == "veh_pose") {
      s.veh_pose = detail::read_pose_fields(ls);
    } else if (tag == "inf_pose") {
      s.inf_pose = detail::read_pose_fields(ls);
    } else if (tag == "obj") {
      SceneObject o;
      ls >> o.id >> o.box.class_id >> o.box.center.x() >> o.box.center.y() >> o.box.center.z() >> o.box.dims.x() >>
          o.box.dims.y() >> o.box.dims.z() >> o.box.yaw;
      s.objects.push_back(o);
    } else {
      fail(ErrorCode::kIoError, "unknown scene record '" + tag + "' on line " + std::to_string(lineno));
    }
    if (ls.fail()) fail(ErrorCode::kIoError, "malformed scene line " + std::to_string(lineno));
  }
  return s;
}

}  // namespace qstream::scenario
