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
#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "qstream/geometry.hpp"

namespace qstream {

inline constexpr std::int64_t kNoSource = -1;

// One instance-level latent: the unit that is selected, transmitted and fused.
struct ObjectQuery {
  Eigen::VectorXd feature;
  Vec3 ref_point = Vec3::Zero();  // sender frame, meters
  double confidence = 0.0;
  int class_id = 0;
  std::int64_t query_id = 0;
  // Simulator provenance (ground-truth object id, kNoSource for background
  // slots). Never serialized; decoded queries carry kNoSource.
  std::int64_t source_id = kNoSource;

  bool is_valid() const {
    return confidence >= 0.0 && confidence <= 1.0 && feature.allFinite() && ref_point.allFinite();
  }

  bool operator==(const ObjectQuery& o) const {
    return feature.size() == o.feature.size() && feature == o.feature && ref_point == o.ref_point &&
           confidence == o.confidence && class_id == o.class_id && query_id == o.query_id &&
           source_id == o.source_id;
  }
};

struct QueryBatch {
  std::uint32_t agent_id = 0;
  std::uint64_t frame_id = 0;
  Pose pose;  // agent -> world
  std::vector<ObjectQuery> queries;

  bool has_unique_ids() const {
    std::vector<std::int64_t> ids;
    ids.reserve(queries.size());
    for (const auto& q : queries) ids.push_back(q.query_id);
    std::sort(ids.begin(), ids.end());
    return std::adjacent_find(ids.begin(), ids.end()) == ids.end();
  }

  bool operator==(const QueryBatch&) const = default;
};

// Instance-level request sent along with a cooperation trigger.
struct Requirement {
  double min_confidence = 0.0;
  std::optional<PerceptionRange> region_mask;  // requester frame

  bool is_valid() const { return min_confidence >= 0.0 && min_confidence <= 1.0; }
};

// Keeps queries meeting the confidence floor and, when a mask is given, whose
// reference point falls inside it once expressed in the requester frame.
inline QueryBatch select_by_requirement(const QueryBatch& batch, const Requirement& req,
                                        const Pose& requester_pose) {
  QueryBatch out = batch;
  out.queries.clear();
  const Pose to_requester = compose_pose(inverse_pose(requester_pose), batch.pose);
  for (const auto& q : batch.queries) {
    if (q.confidence < req.min_confidence) continue;
    if (req.region_mask && !req.region_mask->contains(transform_point(to_requester, q.ref_point))) continue;
    out.queries.push_back(q);
  }
  return out;
}

// Stable; ties by query_id ascending.
inline QueryBatch sort_by_confidence(const QueryBatch& batch, bool ascending) {
  QueryBatch out = batch;
  std::stable_sort(out.queries.begin(), out.queries.end(),
                   [ascending](const ObjectQuery& a, const ObjectQuery& b) {
                     if (a.confidence != b.confidence) {
                       return ascending ? a.confidence < b.confidence : a.confidence > b.confidence;
                     }
                     return a.query_id < b.query_id;
                   });
  return out;
}

}  // namespace qstream
