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
#include <limits>
#include <numeric>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "qstream/error.hpp"
#include "qstream/geometry.hpp"
#include "qstream/model.hpp"
#include "qstream/nn.hpp"
#include "qstream/query.hpp"

namespace qstream::interaction {

struct InteractionConfig {
  int grid_size = 3;
  double grid_spacing = 1.0;
  int embedding_dim = 64;
  double distance_gate = 1.0;
  std::size_t capacity = 300;
  PerceptionRange range;  // grid normalization bounds
  bool complementation = true;

  bool is_valid() const {
    return grid_size >= 1 && grid_size % 2 == 1 && grid_spacing > 0.0 && embedding_dim > 0 &&
           distance_gate > 0.0 && capacity >= 1 && range.is_valid();
  }
};

struct DualSpaceEmbedding {
  Eigen::VectorXd vector;
  std::int64_t source_query_id = 0;
};

struct MatchPair {
  std::size_t veh_index = 0;
  std::size_t inf_index = 0;
  double distance = 0.0;

  bool operator==(const MatchPair&) const = default;
};

struct MatchResult {
  std::vector<MatchPair> pairs;  // ascending veh_index
  std::vector<std::size_t> unmatched_inf;
  std::vector<std::size_t> unmatched_veh;
};

// Grid block then feature block: the encoder input for the dual-space embedding.
inline Eigen::VectorXd embedding_input(const ObjectQuery& q, const InteractionConfig& cfg) {
  const Eigen::VectorXd grid = normalize_grid(location_grid(q.ref_point, cfg.grid_size, cfg.grid_spacing), cfg.range);
  Eigen::VectorXd in(grid.size() + q.feature.size());
  in << grid, q.feature;
  return in;
}

inline DualSpaceEmbedding embed_query(const ObjectQuery& q, const InteractionConfig& cfg,
                                      const nn::DenseNet& encoder) {
  const int want = 3 * cfg.grid_size * cfg.grid_size * cfg.grid_size + static_cast<int>(q.feature.size());
  if (encoder.in_dim() != want) fail(ErrorCode::kDimMismatch, "embedding encoder input width mismatch");
  return {nn::forward(encoder, embedding_input(q, cfg)), q.query_id};
}

// Receiver-from-sender transform: inverse(receiver) composed with sender.
inline Pose relative_pose(const Pose& receiver_pose, const Pose& sender_pose) {
  return compose_pose(inverse_pose(receiver_pose), sender_pose);
}

inline Eigen::VectorXd alignment_input(const Eigen::VectorXd& feature, const Mat3& rotation) {
  Eigen::VectorXd in(feature.size() + 9);
  in.head(feature.size()) = feature;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) in[feature.size() + 3 * r + c] = rotation(r, c);
  return in;
}

// Rotation-conditioned feature mapping plus explicit reference-point transform.
inline QueryBatch align_queries(const QueryBatch& inf, const Pose& veh_pose, const nn::DenseNet& align_net) {
  const Pose rel = relative_pose(veh_pose, inf.pose);
  QueryBatch out = inf;
  out.pose = veh_pose;
  for (auto& q : out.queries) {
    if (align_net.in_dim() != q.feature.size() + 9) fail(ErrorCode::kDimMismatch, "align_net expects D_f + 9 inputs");
    q.feature = nn::forward(align_net, alignment_input(q.feature, rel.rotation));
    q.ref_point = transform_point(rel, q.ref_point);
  }
  return out;
}

inline Eigen::MatrixXd distance_matrix(const std::vector<DualSpaceEmbedding>& a,
                                       const std::vector<DualSpaceEmbedding>& b) {
  Eigen::MatrixXd d(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (a[i].vector - b[j].vector).norm();
  return d;
}

// Mutual nearest neighbours under L2 distance, gated by `gate`. Argmin ties go to the lower index.
inline MatchResult match_from_distances(const Eigen::MatrixXd& d, double gate) {
  const auto n = static_cast<std::size_t>(d.rows()), m = static_cast<std::size_t>(d.cols());
  MatchResult r;
  std::vector<std::size_t> row_best(n, m), col_best(m, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double v = d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (row_best[i] == m || v < d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(row_best[i]))) row_best[i] = j;
      if (col_best[j] == n || v < d(static_cast<Eigen::Index>(col_best[j]), static_cast<Eigen::Index>(j))) col_best[j] = i;
    }
  std::vector<bool> veh_used(n, false), inf_used(m, false);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = row_best[i];
    if (j == m || col_best[j] != i) continue;
    const double v = d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    if (v > gate) continue;
    r.pairs.push_back({i, j, v});
    veh_used[i] = inf_used[j] = true;
  }
  for (std::size_t i = 0; i < n; ++i)
    if (!veh_used[i]) r.unmatched_veh.push_back(i);
  for (std::size_t j = 0; j < m; ++j)
    if (!inf_used[j]) r.unmatched_inf.push_back(j);
  return r;
}

inline MatchResult match_queries(const std::vector<DualSpaceEmbedding>& emb_veh,
                                 const std::vector<DualSpaceEmbedding>& emb_inf, double gate) {
  return match_from_distances(distance_matrix(emb_veh, emb_inf), gate);
}

inline double fusion_weight(const DualSpaceEmbedding& e_v, const DualSpaceEmbedding& e_i,
                            const nn::DenseNet& weight_net) {
  if (weight_net.in_dim() != 1 || weight_net.out_dim() != 1) fail(ErrorCode::kDimMismatch, "weight_net must be 1 -> 1");
  if (e_v.vector.size() != e_i.vector.size()) fail(ErrorCode::kDimMismatch, "embedding widths differ");
  Eigen::VectorXd d(1);
  d[0] = (e_v.vector - e_i.vector).norm();
  return nn::forward(weight_net, d)[0];
}

// Weighted summation onto the vehicle query; everything but the feature stays vehicle-side.
inline ObjectQuery fuse_pair(const ObjectQuery& q_veh, const ObjectQuery& q_inf, double w) {
  if (q_veh.feature.size() != q_inf.feature.size()) fail(ErrorCode::kDimMismatch, "feature widths differ");
  ObjectQuery out = q_veh;
  out.feature = q_veh.feature + w * q_inf.feature;
  return out;
}

// Where each output slot of complement() came from.
struct ComplementPlan {
  // Per output slot: index into veh.queries, or -(1 + j) for incoming[j].
  std::vector<std::int64_t> source;
  std::vector<std::int64_t> ids;
};

inline ComplementPlan plan_complement(const std::vector<ObjectQuery>& veh, const std::vector<ObjectQuery>& incoming,
                                      std::size_t capacity) {
  ComplementPlan plan;
  const std::size_t m = std::min(incoming.size(), veh.size());

  std::vector<std::size_t> veh_order(veh.size());
  std::iota(veh_order.begin(), veh_order.end(), 0);
  std::stable_sort(veh_order.begin(), veh_order.end(), [&](std::size_t a, std::size_t b) {
    return std::tie(veh[a].confidence, veh[a].query_id) < std::tie(veh[b].confidence, veh[b].query_id);
  });
  std::vector<std::size_t> in_order(incoming.size());
  std::iota(in_order.begin(), in_order.end(), 0);
  std::stable_sort(in_order.begin(), in_order.end(), [&](std::size_t a, std::size_t b) {
    if (incoming[a].confidence != incoming[b].confidence) return incoming[a].confidence > incoming[b].confidence;
    return incoming[a].query_id < incoming[b].query_id;
  });

  // Replaced vehicle slots, in batch order, take the best incoming queries.
  std::vector<std::size_t> replaced(veh_order.begin(), veh_order.begin() + static_cast<std::ptrdiff_t>(m));
  std::sort(replaced.begin(), replaced.end());
  std::vector<std::int64_t> slot_source(veh.size());
  for (std::size_t i = 0; i < veh.size(); ++i) slot_source[i] = static_cast<std::int64_t>(i);
  for (std::size_t k = 0; k < m; ++k) slot_source[replaced[k]] = -1 - static_cast<std::int64_t>(in_order[k]);

  std::int64_t next_id = 0;
  for (const auto& q : veh) next_id = std::max(next_id, q.query_id + 1);
  for (std::size_t i = 0; i < veh.size(); ++i) {
    plan.source.push_back(slot_source[i]);
    plan.ids.push_back(veh[i].query_id);
  }
  for (std::size_t k = m; k < incoming.size(); ++k) {
    if (plan.source.size() >= capacity) break;
    plan.source.push_back(-1 - static_cast<std::int64_t>(in_order[k]));
    plan.ids.push_back(next_id++);
  }

  // Over capacity (only when the vehicle side already exceeds it): keep the
  // most confident slots, in batch order.
  if (plan.source.size() > capacity) {
    auto conf = [&](std::size_t s) {
      const auto src = plan.source[s];
      return src >= 0 ? veh[static_cast<std::size_t>(src)].confidence
                      : incoming[static_cast<std::size_t>(-1 - src)].confidence;
    };
    std::vector<std::size_t> order(plan.source.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return conf(a) > conf(b); });
    order.resize(capacity);
    std::sort(order.begin(), order.end());
    ComplementPlan kept;
    for (std::size_t s : order) {
      kept.source.push_back(plan.source[s]);
      kept.ids.push_back(plan.ids[s]);
    }
    plan = std::move(kept);
  }
  return plan;
}

// Replacement-based complementation: the lowest-confidence vehicle slots are
// handed to the most confident unmatched incoming queries. A replacing query
// inherits the slot's query_id; growth beyond |veh| is capped at `capacity`.
inline QueryBatch complement(const QueryBatch& veh, const std::vector<ObjectQuery>& incoming, std::size_t capacity) {
  const ComplementPlan plan = plan_complement(veh.queries, incoming, capacity);
  QueryBatch out = veh;
  out.queries.clear();
  for (std::size_t s = 0; s < plan.source.size(); ++s) {
    const auto src = plan.source[s];
    ObjectQuery q = src >= 0 ? veh.queries[static_cast<std::size_t>(src)] : incoming[static_cast<std::size_t>(-1 - src)];
    q.query_id = plan.ids[s];
    out.queries.push_back(std::move(q));
  }
  return out;
}

// Full cross-agent interaction: align, embed, match, fuse matched pairs and
// complement with the unmatched incoming queries.
inline QueryBatch interact(const QueryBatch& veh, const QueryBatch& inf, const InteractionConfig& cfg,
                           const ModelBundle& model) {
  if (inf.queries.empty()) return veh;
  const QueryBatch aligned = align_queries(inf, veh.pose, model.align_net);

  std::vector<DualSpaceEmbedding> ev, ei;
  ev.reserve(veh.queries.size());
  ei.reserve(aligned.queries.size());
  for (const auto& q : veh.queries) ev.push_back(embed_query(q, cfg, model.embed_encoder));
  for (const auto& q : aligned.queries) ei.push_back(embed_query(q, cfg, model.embed_encoder));
  const MatchResult match = match_queries(ev, ei, cfg.distance_gate);

  QueryBatch fused = veh;
  for (const auto& p : match.pairs) {
    const double w = fusion_weight(ev[p.veh_index], ei[p.inf_index], model.weight_net);
    fused.queries[p.veh_index] = fuse_pair(veh.queries[p.veh_index], aligned.queries[p.inf_index], w);
  }
  if (!cfg.complementation) return fused;

  std::vector<ObjectQuery> incoming;
  incoming.reserve(match.unmatched_inf.size());
  for (std::size_t j : match.unmatched_inf) incoming.push_back(aligned.queries[j]);
  return complement(fused, incoming, cfg.capacity);
}

}  // namespace qstream::interaction
