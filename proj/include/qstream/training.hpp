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
#include <map>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "qstream/error.hpp"
#include "qstream/head.hpp"
#include "qstream/interaction.hpp"
#include "qstream/model.hpp"
#include "qstream/nn.hpp"
#include "qstream/pipeline.hpp"
#include "qstream/scenario.hpp"

namespace qstream::training {

using pipeline::Mode;

struct TrainConfig {
  int epochs = 30;
  int scenes_per_epoch = 500;
  double lr = 0.03;
  std::uint64_t seed = 1;
  Mode mode = Mode::kQuest;
  // Global gradient-norm ceiling per step; 0 disables.
  double grad_clip = 5.0;
  // Auxiliary metric loss on dual-space embeddings (same-object pairs pulled
  // together, other pairs pushed beyond `match_margin`).
  double match_loss_weight = 0.1;
  double match_margin = 2.0;
  // Multiplier on the slot-averaged score loss.
  double score_loss_weight = 15.0;
  // Confidence floor applied to infrastructure queries during training.
  double train_min_confidence = 0.1;
  bool freeze_detectors = false;

  bool is_valid() const {
    return epochs >= 0 && scenes_per_epoch > 0 && lr > 0.0 && grad_clip >= 0.0 && match_loss_weight >= 0.0 &&
           match_margin > 0.0 && score_loss_weight > 0.0 && train_min_confidence >= 0.0 && train_min_confidence <= 1.0;
  }
};

// Detector outputs and agent-frame ground truth for one training frame.
struct FrameInputs {
  scenario::Scene scene;
  scenario::RawDetections veh;
  scenario::RawDetections inf;
  std::map<std::int64_t, BBox3D> gt_veh;  // vehicle frame
  std::map<std::int64_t, BBox3D> gt_inf;  // infrastructure frame
};

inline FrameInputs prepare_frame(const scenario::Scene& scene, const pipeline::SimConfig& sim) {
  FrameInputs f;
  f.scene = scene;
  Rng vr = pipeline::detector_rng(scene, pipeline::kVehicleAgent);
  Rng ir = pipeline::detector_rng(scene, pipeline::kInfraAgent);
  f.veh = scenario::simulate_raw(scene, pipeline::kVehicleAgent, scene.veh_pose, sim.vehicle, vr, sim.scene);
  f.inf = scenario::simulate_raw(scene, pipeline::kInfraAgent, scene.inf_pose, sim.infrastructure, ir, sim.scene);
  const Pose w2v = inverse_pose(scene.veh_pose), w2i = inverse_pose(scene.inf_pose);
  for (const auto& o : scene.objects) {
    f.gt_veh[o.id] = transform_box(w2v, o.box);
    f.gt_inf[o.id] = transform_box(w2i, o.box);
  }
  return f;
}

// Per-net gradient accumulators in bundle order.
struct BundleGrads {
  nn::ParamVector det, embed, align, weight, decoder;

  explicit BundleGrads(const ModelBundle& m)
      : det(nn::ParamVector::Zero(static_cast<Eigen::Index>(m.det_encoder.param_count()))),
        embed(nn::ParamVector::Zero(static_cast<Eigen::Index>(m.embed_encoder.param_count()))),
        align(nn::ParamVector::Zero(static_cast<Eigen::Index>(m.align_net.param_count()))),
        weight(nn::ParamVector::Zero(static_cast<Eigen::Index>(m.weight_net.param_count()))),
        decoder(nn::ParamVector::Zero(static_cast<Eigen::Index>(m.decoder_head.param_count()))) {}

  nn::ParamVector flat() const {
    nn::ParamVector p(det.size() + embed.size() + align.size() + weight.size() + decoder.size());
    p << det, embed, align, weight, decoder;
    return p;
  }
};

// Where a cooperative query came from.
struct SlotOrigin {
  enum class Kind { kVehicle, kFused, kIncoming, kInfraOwn } kind = Kind::kVehicle;
  std::size_t veh = 0;   // vehicle query index (kVehicle, kFused)
  std::size_t inf = 0;   // selected-infrastructure index (kFused, kIncoming, kInfraOwn)
  std::size_t pair = 0;  // index into pairs (kFused)
};

struct FrameLoss {
  double value = 0.0;
  double detection = 0.0;
  double matching = 0.0;
  std::optional<nn::ParamVector> grad;  // bundle layout
  // Forward artifacts, for inspection in tests.
  std::vector<ObjectQuery> coop_queries;
  std::vector<SlotOrigin> origins;
  std::size_t num_pairs = 0;
};

namespace detail {

inline bool nonzero(const Eigen::VectorXd& v) { return v.size() > 0 && (v.array() != 0.0).any(); }

}  // namespace detail

// Forward (and optionally backward) pass of one frame under `mode`.
// Discrete decisions (selection, matching, replacement) are taken on the
// forward values; gradients flow through every continuous path.
inline FrameLoss frame_loss(const ModelBundle& m, const FrameInputs& in, Mode mode, const pipeline::SimConfig& sim,
                            const TrainConfig& tc, bool want_grad) {
  using Vec = Eigen::VectorXd;
  const auto& range = sim.range();
  const auto& icfg = sim.interaction;
  const Eigen::Index df = m.feature_dim();

  // Vehicle detections.
  const auto& vq = in.veh.batch.queries;
  const std::size_t nv = vq.size();
  std::vector<nn::Tape> det_tape_v(nv);
  std::vector<Vec> fv(nv);
  for (std::size_t i = 0; i < nv; ++i) fv[i] = nn::forward(m.det_encoder, in.veh.descriptors[i], &det_tape_v[i]);

  // Selected infrastructure detections.
  std::vector<std::size_t> sel;
  if (mode != Mode::kVehicleOnly) {
    for (std::size_t j = 0; j < in.inf.batch.queries.size(); ++j)
      if (in.inf.batch.queries[j].confidence >= tc.train_min_confidence) sel.push_back(j);
  }
  const std::size_t ni = sel.size();
  std::vector<nn::Tape> det_tape_i(ni);
  std::vector<Vec> fi(ni);
  for (std::size_t j = 0; j < ni; ++j) fi[j] = nn::forward(m.det_encoder, in.inf.descriptors[sel[j]], &det_tape_i[j]);

  FrameLoss out;
  std::vector<ObjectQuery> coop;
  std::vector<SlotOrigin> origin;
  std::vector<const BBox3D*> targets;
  auto target_of = [](const std::map<std::int64_t, BBox3D>& gt, std::int64_t src) -> const BBox3D* {
    if (src == kNoSource) return nullptr;
    auto it = gt.find(src);
    return it == gt.end() ? nullptr : &it->second;
  };
  auto veh_query = [&](std::size_t i) {
    ObjectQuery q = vq[i];
    q.feature = fv[i];
    return q;
  };

  // Interaction state (query modes only).
  std::vector<nn::Tape> align_tape(ni), embed_tape_v, embed_tape_i(ni), weight_tape;
  std::vector<Vec> ai(ni), ev, ei(ni);
  std::vector<ObjectQuery> aligned(ni);
  std::vector<interaction::MatchPair> pairs;
  std::vector<double> pair_w;
  Eigen::MatrixXd dist;

  if (mode == Mode::kVehicleOnly) {
    for (std::size_t i = 0; i < nv; ++i) {
      coop.push_back(veh_query(i));
      origin.push_back({SlotOrigin::Kind::kVehicle, i, 0, 0});
      targets.push_back(target_of(in.gt_veh, vq[i].source_id));
    }
  } else if (mode == Mode::kResultCoop) {
    for (std::size_t i = 0; i < nv; ++i) {
      coop.push_back(veh_query(i));
      origin.push_back({SlotOrigin::Kind::kVehicle, i, 0, 0});
      targets.push_back(target_of(in.gt_veh, vq[i].source_id));
    }
    for (std::size_t j = 0; j < ni; ++j) {
      ObjectQuery q = in.inf.batch.queries[sel[j]];
      q.feature = fi[j];
      coop.push_back(std::move(q));
      origin.push_back({SlotOrigin::Kind::kInfraOwn, 0, j, 0});
      targets.push_back(target_of(in.gt_inf, in.inf.batch.queries[sel[j]].source_id));
    }
  } else {
    const Pose rel = interaction::relative_pose(in.scene.veh_pose, in.scene.inf_pose);
    for (std::size_t j = 0; j < ni; ++j) {
      ai[j] = nn::forward(m.align_net, interaction::alignment_input(fi[j], rel.rotation), &align_tape[j]);
      aligned[j] = in.inf.batch.queries[sel[j]];
      aligned[j].feature = ai[j];
      aligned[j].ref_point = transform_point(rel, aligned[j].ref_point);
    }
    embed_tape_v.resize(nv);
    ev.resize(nv);
    for (std::size_t i = 0; i < nv; ++i)
      ev[i] = nn::forward(m.embed_encoder, interaction::embedding_input(veh_query(i), icfg), &embed_tape_v[i]);
    for (std::size_t j = 0; j < ni; ++j)
      ei[j] = nn::forward(m.embed_encoder, interaction::embedding_input(aligned[j], icfg), &embed_tape_i[j]);

    dist.resize(static_cast<Eigen::Index>(nv), static_cast<Eigen::Index>(ni));
    for (std::size_t i = 0; i < nv; ++i)
      for (std::size_t j = 0; j < ni; ++j)
        dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (ev[i] - ei[j]).norm();
    const auto match = interaction::match_from_distances(dist, icfg.distance_gate);
    pairs = match.pairs;
    out.num_pairs = pairs.size();

    std::vector<ObjectQuery> fused(nv);
    std::vector<SlotOrigin> fused_origin(nv);
    for (std::size_t i = 0; i < nv; ++i) {
      fused[i] = veh_query(i);
      fused_origin[i] = {SlotOrigin::Kind::kVehicle, i, 0, 0};
    }
    weight_tape.resize(pairs.size());
    pair_w.resize(pairs.size());
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      Vec d(1);
      d[0] = pairs[p].distance;
      pair_w[p] = nn::forward(m.weight_net, d, &weight_tape[p])[0];
      fused[pairs[p].veh_index] = interaction::fuse_pair(fused[pairs[p].veh_index], aligned[pairs[p].inf_index], pair_w[p]);
      fused_origin[pairs[p].veh_index] = {SlotOrigin::Kind::kFused, pairs[p].veh_index, pairs[p].inf_index, p};
    }

    if (mode == Mode::kQuest) {
      std::vector<ObjectQuery> incoming;
      for (std::size_t j : match.unmatched_inf) incoming.push_back(aligned[j]);
      const auto plan = interaction::plan_complement(fused, incoming, icfg.capacity);
      for (std::size_t s = 0; s < plan.source.size(); ++s) {
        const auto src = plan.source[s];
        if (src >= 0) {
          coop.push_back(fused[static_cast<std::size_t>(src)]);
          origin.push_back(fused_origin[static_cast<std::size_t>(src)]);
        } else {
          const std::size_t j = match.unmatched_inf[static_cast<std::size_t>(-1 - src)];
          coop.push_back(aligned[j]);
          origin.push_back({SlotOrigin::Kind::kIncoming, 0, j, 0});
        }
        coop.back().query_id = plan.ids[s];
      }
    } else {
      coop = fused;
      origin = fused_origin;
    }
    for (const auto& q : coop) targets.push_back(target_of(in.gt_veh, q.source_id));
  }

  // Decode and score.
  std::vector<nn::Tape> dec_tape(coop.size());
  std::vector<Vec> outputs(coop.size());
  std::vector<Vec3> refs(coop.size());
  for (std::size_t k = 0; k < coop.size(); ++k) {
    outputs[k] = nn::forward(m.decoder_head, head::head_input(coop[k], range), &dec_tape[k]);
    refs[k] = coop[k].ref_point;
  }
  const head::LossResult det_loss = head::compute_loss(outputs, refs, targets, tc.score_loss_weight);
  out.detection = det_loss.value;

  // Metric loss on embeddings, normalized by the number of real queries.
  std::vector<Vec> g_ev, g_ei;
  if (pipeline::uses_queries(mode)) {
    g_ev.assign(nv, Vec::Zero(ev.empty() ? 0 : ev[0].size()));
    g_ei.assign(ni, Vec::Zero(ei.empty() ? 0 : ei[0].size()));
    if (tc.match_loss_weight > 0.0 && nv > 0 && ni > 0) {
      std::size_t real = 0;
      for (const auto& q : vq) real += q.source_id != kNoSource;
      for (std::size_t j = 0; j < ni; ++j) real += aligned[j].source_id != kNoSource;
      const double scale = tc.match_loss_weight / static_cast<double>(std::max<std::size_t>(real, 1));
      double acc = 0.0;
      for (std::size_t i = 0; i < nv; ++i) {
        for (std::size_t j = 0; j < ni; ++j) {
          const auto sv = vq[i].source_id, si = aligned[j].source_id;
          if (sv == kNoSource && si == kNoSource) continue;
          const double d = dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
          const Vec diff = ev[i] - ei[j];
          if (sv == si) {
            acc += d * d;
            if (want_grad) {
              g_ev[i] += scale * 2.0 * diff;
              g_ei[j] -= scale * 2.0 * diff;
            }
          } else if (d < tc.match_margin) {
            const double gap = tc.match_margin - d;
            acc += gap * gap;
            if (want_grad && d > 0.0) {
              const Vec g = scale * (-2.0 * gap / d) * diff;
              g_ev[i] += g;
              g_ei[j] -= g;
            }
          }
        }
      }
      out.matching = scale * acc;
    }
  }
  out.value = out.detection + out.matching;
  out.coop_queries = coop;
  out.origins = origin;
  if (!std::isfinite(out.value)) fail(ErrorCode::kDivergedLoss, "non-finite frame loss");
  if (!want_grad) return out;

  // ---- backward ----
  BundleGrads G(m);
  std::vector<Vec> g_fv(nv, Vec::Zero(df)), g_fi(ni, Vec::Zero(df)), g_ai(ni, Vec::Zero(df));
  std::vector<double> g_w(pairs.size(), 0.0);
  for (std::size_t k = 0; k < coop.size(); ++k) {
    if (!detail::nonzero(det_loss.grads[k])) continue;
    const Vec g_in = nn::backward_into(m.decoder_head, dec_tape[k], det_loss.grads[k], G.decoder);
    const Vec g_feat = g_in.head(df);
    const auto& o = origin[k];
    switch (o.kind) {
      case SlotOrigin::Kind::kVehicle: g_fv[o.veh] += g_feat; break;
      case SlotOrigin::Kind::kFused:
        g_fv[o.veh] += g_feat;
        g_ai[o.inf] += pair_w[o.pair] * g_feat;
        g_w[o.pair] += g_feat.dot(ai[o.inf]);
        break;
      case SlotOrigin::Kind::kIncoming: g_ai[o.inf] += g_feat; break;
      case SlotOrigin::Kind::kInfraOwn: g_fi[o.inf] += g_feat; break;
    }
  }
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    if (g_w[p] == 0.0) continue;
    Vec up(1);
    up[0] = g_w[p];
    const double g_d = nn::backward_into(m.weight_net, weight_tape[p], up, G.weight)[0];
    const double d = pairs[p].distance;
    if (d > 0.0) {
      const Vec g = (g_d / d) * (ev[pairs[p].veh_index] - ei[pairs[p].inf_index]);
      g_ev[pairs[p].veh_index] += g;
      g_ei[pairs[p].inf_index] -= g;
    }
  }
  if (pipeline::uses_queries(mode)) {
    for (std::size_t i = 0; i < nv; ++i) {
      if (!detail::nonzero(g_ev[i])) continue;
      const Vec g_in = nn::backward_into(m.embed_encoder, embed_tape_v[i], g_ev[i], G.embed);
      g_fv[i] += g_in.tail(df);
    }
    for (std::size_t j = 0; j < ni; ++j) {
      if (!detail::nonzero(g_ei[j])) continue;
      const Vec g_in = nn::backward_into(m.embed_encoder, embed_tape_i[j], g_ei[j], G.embed);
      g_ai[j] += g_in.tail(df);
    }
    for (std::size_t j = 0; j < ni; ++j) {
      if (!detail::nonzero(g_ai[j])) continue;
      const Vec g_in = nn::backward_into(m.align_net, align_tape[j], g_ai[j], G.align);
      g_fi[j] += g_in.head(df);
    }
  }
  if (!tc.freeze_detectors) {
    for (std::size_t i = 0; i < nv; ++i)
      if (detail::nonzero(g_fv[i])) nn::backward_into(m.det_encoder, det_tape_v[i], g_fv[i], G.det);
    for (std::size_t j = 0; j < ni; ++j)
      if (detail::nonzero(g_fi[j])) nn::backward_into(m.det_encoder, det_tape_i[j], g_fi[j], G.det);
  }
  out.grad = G.flat();
  return out;
}

struct TrainResult {
  ModelBundle model;
  std::vector<double> loss_trace;  // mean frame loss per epoch
};

// Training scenes come from their own seed stream, disjoint from evaluation seeds.
inline std::uint64_t train_scene_seed(std::uint64_t seed, std::uint64_t index) {
  return mix_seed(seed ^ 0x7A11A7ULL, index);
}

inline TrainResult train(const TrainConfig& tc, const pipeline::SimConfig& sim, const ModelDims& dims) {
  if (!tc.is_valid()) fail(ErrorCode::kInvalidArgument, "invalid training configuration");
  TrainResult r{make_bundle(dims, tc.seed), {}};
  nn::ParamVector params = r.model.params();
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    double sum = 0.0;
    for (int s = 0; s < tc.scenes_per_epoch; ++s) {
      const auto index = static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(tc.scenes_per_epoch) +
                         static_cast<std::uint64_t>(s);
      const auto scene = scenario::generate_scene(sim.scene, train_scene_seed(tc.seed, index));
      const FrameInputs in = prepare_frame(scene, sim);
      FrameLoss fl = frame_loss(r.model, in, tc.mode, sim, tc, true);
      nn::ParamVector& g = *fl.grad;
      if (!g.allFinite()) fail(ErrorCode::kDivergedLoss, "non-finite gradient");
      if (tc.grad_clip > 0.0) {
        const double norm = g.norm();
        if (norm > tc.grad_clip) g *= tc.grad_clip / norm;
      }
      params = nn::sgd_step(params, g, tc.lr);
      r.model.set_params(params);
      sum += fl.value;
    }
    r.loss_trace.push_back(sum / tc.scenes_per_epoch);
  }
  return r;
}

}  // namespace qstream::training
