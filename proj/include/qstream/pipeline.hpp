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
#include <numeric>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "qstream/channel.hpp"
#include "qstream/error.hpp"
#include "qstream/evaluation.hpp"
#include "qstream/head.hpp"
#include "qstream/interaction.hpp"
#include "qstream/model.hpp"
#include "qstream/query.hpp"
#include "qstream/rng.hpp"
#include "qstream/scenario.hpp"

namespace qstream::pipeline {

using evaluation::Prediction;

enum class Mode { kVehicleOnly, kResultCoop, kQuestF, kQuest };

inline constexpr Mode kAllModes[] = {Mode::kVehicleOnly, Mode::kResultCoop, Mode::kQuestF, Mode::kQuest};

inline std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::kVehicleOnly: return "vehicle_only";
    case Mode::kResultCoop: return "result_coop";
    case Mode::kQuestF: return "quest_f";
    case Mode::kQuest: return "quest";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  for (Mode m : kAllModes)
    if (mode_name(m) == s) return m;
  fail(ErrorCode::kInvalidArgument, "unknown mode '" + std::string(s) + "'");
}

inline bool uses_queries(Mode m) { return m == Mode::kQuest || m == Mode::kQuestF; }

inline constexpr std::uint32_t kVehicleAgent = 0;
inline constexpr std::uint32_t kInfraAgent = 1;

// Everything about the simulated world and the receiver-side interaction.
struct SimConfig {
  scenario::SceneConfig scene;
  scenario::AgentConfig vehicle;
  scenario::AgentConfig infrastructure{
      scenario::VisibilityConfig{170.0, 250.0, true},
      scenario::DetectorNoise{}};
  interaction::InteractionConfig interaction;  // its range is also the evaluation range
  double nms_iou = 0.3;

  const PerceptionRange& range() const { return interaction.range; }
};

// Per-agent detector streams derive from the scene seed only, so every mode
// sees identical detections for a scene.
inline Rng detector_rng(const scenario::Scene& scene, std::uint32_t agent_id) {
  return Rng(mix_seed(scene.seed, 0x5EED0000ULL + agent_id));
}

inline std::vector<Prediction> decode_batch(const QueryBatch& b, const ModelBundle& model, const PerceptionRange& r) {
  std::vector<Prediction> out;
  out.reserve(b.queries.size());
  for (const auto& q : b.queries) out.push_back(head::decode_head(q, model.decoder_head, r));
  return out;
}

// Greedy NMS: higher score wins, lower-scored boxes with BEV IoU >= thr are dropped.
// Equal scores keep input order.
inline std::vector<Prediction> nms(std::vector<Prediction> preds, double iou_thr) {
  std::stable_sort(preds.begin(), preds.end(), [](const Prediction& a, const Prediction& b) { return a.score > b.score; });
  std::vector<Prediction> kept;
  for (const auto& p : preds) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Prediction& k) {
      return k.box.class_id == p.box.class_id && bev_iou(k.box, p.box) >= iou_thr;
    });
    if (!suppressed) kept.push_back(p);
  }
  return kept;
}

struct FrameResult {
  std::vector<Prediction> predictions;
  channel::TransmissionReport report;
};

inline FrameResult run_frame(const scenario::Scene& scene, const ModelBundle& model, Mode mode, const SimConfig& sim,
                             const channel::ChannelConfig& link, const Requirement& requirement) {
  Rng veh_rng = detector_rng(scene, kVehicleAgent);
  const QueryBatch veh =
      scenario::simulate_detections(scene, kVehicleAgent, scene.veh_pose, sim.vehicle, model.det_encoder, veh_rng,
                                  sim.scene);
  FrameResult res;
  if (mode == Mode::kVehicleOnly) {
    res.predictions = decode_batch(veh, model, sim.range());
    return res;
  }

  Rng inf_rng = detector_rng(scene, kInfraAgent);
  const QueryBatch inf = scenario::simulate_detections(scene, kInfraAgent, scene.inf_pose, sim.infrastructure,
                                                       model.det_encoder, inf_rng, sim.scene);
  const QueryBatch selected = select_by_requirement(inf, requirement, scene.veh_pose);
  // Each frame draws its own loss pattern from the link seed.
  const channel::ChannelConfig frame_link{link.dropout_ratio, mix_seed(link.seed, scene.seed)};
  auto [delivered, report] = channel::apply_dropout(selected, frame_link);

  if (mode == Mode::kResultCoop) {
    // Boxes are decoded on the infrastructure side and shipped as box records.
    const Pose inf_to_veh = interaction::relative_pose(scene.veh_pose, scene.inf_pose);
    std::vector<Prediction> merged = decode_batch(veh, model, sim.range());
    for (const auto& p : decode_batch(delivered, model, sim.range())) {
      merged.push_back({transform_box(inf_to_veh, p.box), p.score});
    }
    res.predictions = nms(std::move(merged), sim.nms_iou);
    report.bytes_sent = channel::box_packet_bytes(report.queries_sent);
    res.report = report;
    return res;
  }

  const std::string wire = channel::encode_packet(delivered);
  const QueryBatch received = channel::decode_packet(wire);
  report.bytes_sent = wire.size();
  interaction::InteractionConfig icfg = sim.interaction;
  icfg.complementation = mode == Mode::kQuest;
  const QueryBatch coop = interaction::interact(veh, received, icfg, model);
  res.predictions = decode_batch(coop, model, sim.range());
  res.report = report;
  return res;
}

// Ground truth and visibility for evaluating one scene from the vehicle frame.
inline evaluation::SceneTruth scene_truth(const scenario::Scene& scene, const SimConfig& sim) {
  evaluation::SceneTruth t;
  const Pose world_to_veh = inverse_pose(scene.veh_pose);
  for (const auto& o : scene.objects) {
    t.ids.push_back(o.id);
    t.boxes.push_back(transform_box(world_to_veh, o.box));
  }
  for (auto id : scenario::visible_objects(scene, scene.veh_pose, sim.vehicle.visibility)) t.visible_to_vehicle.insert(id);
  for (auto id : scenario::visible_objects(scene, scene.inf_pose, sim.infrastructure.visibility))
    t.visible_to_infrastructure.insert(id);
  return t;
}

}  // namespace qstream::pipeline
