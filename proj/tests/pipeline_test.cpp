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

#include <cmath>
#include <cstring>
#include <numbers>

#include <gtest/gtest.h>

#include "qstream/training.hpp"
#include "test_util.hpp"

namespace qstream::pipeline {
namespace {

using training::FrameLoss;
using training::TrainConfig;

ModelDims tiny_dims() {
  ModelDims d;
  d.feature_dim = 6;
  d.embedding_dim = 4;
  d.det_hidden = d.embed_hidden = d.align_hidden = d.decoder_hidden = 8;
  d.weight_hidden = 4;
  return d;
}

SimConfig tiny_sim() {
  SimConfig s;
  s.scene.num_objects_min = 6;
  s.scene.num_objects_max = 8;
  s.vehicle.noise.query_slots = 12;
  s.infrastructure.noise.query_slots = 12;
  return s;
}

BBox3D car(double x, double y, double yaw = 0.0) {
  BBox3D b;
  b.center = Vec3(x, y, 0.8);
  b.dims = Vec3(4.5, 1.8, 1.6);
  b.yaw = yaw;
  return b;
}

bool bit_identical(const nn::ParamVector& a, const nn::ParamVector& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

TEST(DecodeHead, ZeroWeightHead) {
  nn::DenseNet head = nn::init_net({9, 9}, {nn::Activation::kIdentity}, 1);
  head.set_params(nn::ParamVector::Zero(static_cast<Eigen::Index>(head.param_count())));
  ObjectQuery q;
  q.feature = Eigen::VectorXd::Ones(6);
  q.ref_point = Vec3(12, -3, 0.5);
  const Prediction p = head::decode_head(q, head, PerceptionRange{});
  EXPECT_EQ(p.score, 0.5);
  EXPECT_EQ(p.box.dims, Vec3(1, 1, 1));
  EXPECT_EQ(p.box.center, q.ref_point);
  EXPECT_EQ(p.box.yaw, 0.0);
  q.feature = Eigen::VectorXd::Ones(5);
  EXPECT_THROW(head::decode_head(q, head, PerceptionRange{}), Error);
}

TEST(DecodeHead, ScoreAndDimsInRange) {
  const nn::DenseNet head = nn::init_net({9, 16, 9}, {nn::Activation::kRelu, nn::Activation::kIdentity}, 2);
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    ObjectQuery q = testing::random_query(rng, 6, i);
    const Prediction p = head::decode_head(q, head, PerceptionRange{});
    EXPECT_GT(p.score, 0.0);
    EXPECT_LT(p.score, 1.0);
    EXPECT_TRUE((p.box.dims.array() > 0.0).all());
    // Huge activations saturate the sigmoid in double precision but stay in [0, 1].
    q.feature *= 1e3;
    const Prediction big = head::decode_head(q, head, PerceptionRange{});
    EXPECT_GE(big.score, 0.0);
    EXPECT_LE(big.score, 1.0);
    EXPECT_TRUE((big.box.dims.array() > 0.0).all());
  }
}

// Raw head output that decodes exactly to `b` from reference point `ref`.
Eigen::VectorXd output_for(const BBox3D& b, const Vec3& ref, double logit) {
  Eigen::VectorXd o(9);
  o << b.center - ref, b.dims.array().log().matrix(), std::sin(b.yaw), std::cos(b.yaw), logit;
  return o;
}

TEST(Loss, Examples) {
  const BBox3D gt = car(10, 2, 0.3);
  const Vec3 ref(9.5, 2.2, 0.7);
  const auto perfect = head::compute_loss({output_for(gt, ref, 30.0)}, {ref}, {&gt});
  EXPECT_NEAR(perfect.mean_terms.center, 0.0, 1e-12);
  EXPECT_NEAR(perfect.mean_terms.dims, 0.0, 1e-12);
  EXPECT_NEAR(perfect.mean_terms.yaw, 0.0, 1e-12);
  EXPECT_LT(perfect.mean_terms.score, 1e-12);

  BBox3D flipped = gt;
  flipped.yaw = gt.yaw + std::numbers::pi;
  EXPECT_NEAR(head::compute_loss({output_for(flipped, ref, 0.0)}, {ref}, {&gt}).mean_terms.yaw, 2.0, 1e-12);

  // Background slots only see the score term, pushed toward zero.
  const auto bg = head::compute_loss({output_for(gt, ref, 0.0)}, {ref}, {nullptr});
  EXPECT_NEAR(bg.value, std::log(2.0), 1e-12);
  EXPECT_EQ(bg.mean_terms.center, 0.0);

  try {
    head::compute_loss({}, {}, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyBatch);
  }
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(6);
    std::vector<Eigen::VectorXd> outs(n);
    std::vector<Vec3> refs(n);
    std::vector<BBox3D> gts(n);
    std::vector<const BBox3D*> targets(n);
    for (std::size_t k = 0; k < n; ++k) {
      outs[k] = Eigen::VectorXd(9);
      for (int i = 0; i < 9; ++i) outs[k][i] = rng.normal();
      refs[k] = Vec3(rng.uniform(0, 50), rng.uniform(-20, 20), 0.5);
      gts[k] = testing::random_box(rng);
      targets[k] = rng.uniform() < 0.7 ? &gts[k] : nullptr;
    }
    const double w = rng.uniform(0.5, 20.0);
    const auto res = head::compute_loss(outs, refs, targets, w);
    for (std::size_t k = 0; k < n; ++k) {
      const double err = nn::finite_diff_max_error(outs[k], res.grads[k],
                                                   [&](const nn::ParamVector& p) {
                                                     auto o = outs;
                                                     o[k] = p;
                                                     return head::compute_loss(o, refs, targets, w).value;
                                                   },
                                                   1e-6);
      ASSERT_LT(err, 1e-4) << "trial " << trial;
    }
  }
}

TEST(Nms, SuppressesOverlapsByScore) {
  const std::vector<Prediction> in{{car(10, 0), 0.6}, {car(10.3, 0), 0.9}, {car(30, 0), 0.5}, {car(10.1, 0), 0.6}};
  const auto kept = nms(in, 0.3);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].score, 0.9);
  EXPECT_EQ(kept[1].box.center.x(), 30.0);
}

class FrameTest : public ::testing::Test {
 protected:
  SimConfig sim = tiny_sim();
  ModelBundle model = make_bundle(tiny_dims(), 4);
  scenario::Scene scene = scenario::generate_scene(sim.scene, 77);
  Requirement req{0.1, std::nullopt};

  FrameResult run(Mode m, double dropout = 0.0) const {
    return run_frame(scene, model, m, sim, channel::ChannelConfig{dropout, 5}, req);
  }
};

TEST_F(FrameTest, BytesPerMode) {
  EXPECT_EQ(run(Mode::kVehicleOnly).report.bytes_sent, 0u);
  Rng ir = detector_rng(scene, kInfraAgent);
  const QueryBatch inf = scenario::simulate_detections(scene, kInfraAgent, scene.inf_pose, sim.infrastructure,
                                                      model.det_encoder, ir, sim.scene);
  const std::size_t n = select_by_requirement(inf, req, scene.veh_pose).queries.size();
  ASSERT_GT(n, 0u);
  const auto quest = run(Mode::kQuest).report;
  EXPECT_EQ(quest.queries_sent, n);
  EXPECT_EQ(quest.bytes_sent, channel::packet_bytes(n, 6));
  EXPECT_EQ(run(Mode::kQuestF).report.bytes_sent, quest.bytes_sent);
  const auto late = run(Mode::kResultCoop).report;
  EXPECT_EQ(late.bytes_sent, channel::box_packet_bytes(n));
  // 4 * D_f = 24 feature bytes exceed the 28 - 12 = 16 extra box bytes once D_f > 7; here D_f = 6.
  EXPECT_GT(late.bytes_sent, quest.bytes_sent);
}

TEST_F(FrameTest, ResultCoopBytesBelowQuestForWideFeatures) {
  for (std::uint64_t df : {8u, 32u, 256u})
    for (std::uint64_t n : {1u, 10u, 300u}) EXPECT_LT(channel::box_packet_bytes(n), channel::packet_bytes(n, df));
}

TEST_F(FrameTest, FullDropoutEqualsVehicleOnly) {
  const auto solo = run(Mode::kVehicleOnly).predictions;
  for (Mode m : {Mode::kQuest, Mode::kQuestF, Mode::kResultCoop}) {
    const FrameResult r = run(m, 1.0);
    if (m == Mode::kResultCoop) {
      EXPECT_EQ(r.predictions, nms(solo, sim.nms_iou));
    } else {
      EXPECT_EQ(r.predictions, solo) << mode_name(m);
    }
    EXPECT_EQ(r.report.queries_sent, 0u);
  }
}

TEST_F(FrameTest, EmptyInfrastructureEqualsVehicleOnly) {
  sim.infrastructure.visibility.max_range = 1e-3;
  sim.infrastructure.noise.query_slots = 0;
  EXPECT_EQ(run(Mode::kQuest).predictions, run(Mode::kVehicleOnly).predictions);
  EXPECT_EQ(run(Mode::kQuest).report.bytes_sent, 74u);
}

TEST_F(FrameTest, Deterministic) {
  for (Mode m : kAllModes) {
    const FrameResult a = run(m, 0.3), b = run(m, 0.3);
    EXPECT_EQ(a.predictions, b.predictions);
    EXPECT_EQ(a.report, b.report);
  }
}

TEST(Modes, NamesRoundTrip) {
  for (Mode m : kAllModes) EXPECT_EQ(parse_mode(mode_name(m)), m);
  EXPECT_THROW(parse_mode("late_fusion"), Error);
}

// Finite differences over every bundle parameter of the full frame loss.
TEST(TrainingLoss, FiniteDifferencesAllModes) {
  const SimConfig sim = tiny_sim();
  const ModelBundle m = make_bundle(tiny_dims(), 3);
  const auto in = training::prepare_frame(scenario::generate_scene(sim.scene, 42), sim);
  for (Mode mode : kAllModes) {
    TrainConfig tc;
    tc.mode = mode;
    const FrameLoss fl = training::frame_loss(m, in, mode, sim, tc, true);
    if (uses_queries(mode)) EXPECT_GT(fl.num_pairs, 0u);
    ModelBundle probe = m;
    const double err = nn::finite_diff_max_error(m.params(), *fl.grad,
                                                 [&](const nn::ParamVector& p) {
                                                   probe.set_params(p);
                                                   return training::frame_loss(probe, in, mode, sim, tc, false).value;
                                                 },
                                                 1e-6);
    EXPECT_LT(err, 1e-4) << mode_name(mode);
  }
}

TEST(TrainingLoss, GradientReachesEveryInteractionNet) {
  const SimConfig sim = tiny_sim();
  const ModelBundle m = make_bundle(tiny_dims(), 3);
  TrainConfig tc;
  tc.mode = Mode::kQuest;
  const auto in = training::prepare_frame(scenario::generate_scene(sim.scene, 42), sim);
  const FrameLoss fl = training::frame_loss(m, in, Mode::kQuest, sim, tc, true);
  ASSERT_GT(fl.num_pairs, 0u);
  ModelBundle stepped = m;
  stepped.set_params(nn::sgd_step(m.params(), *fl.grad, tc.lr));
  const auto before = m.nets();
  const auto after = stepped.nets();
  for (std::size_t k = 0; k < before.size(); ++k) {
    EXPECT_FALSE(before[k]->params() == after[k]->params()) << ModelBundle::kNames[k];
  }
}

TEST(Train, ZeroEpochsAndDeterminism) {
  const SimConfig sim = tiny_sim();
  TrainConfig tc;
  tc.epochs = 0;
  tc.seed = 9;
  EXPECT_EQ(training::train(tc, sim, tiny_dims()).model, make_bundle(tiny_dims(), 9));

  tc.epochs = 2;
  tc.scenes_per_epoch = 20;
  const auto a = training::train(tc, sim, tiny_dims());
  const auto b = training::train(tc, sim, tiny_dims());
  EXPECT_TRUE(bit_identical(a.model.params(), b.model.params()));
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  EXPECT_EQ(a.loss_trace.size(), 2u);
}

TEST(Train, DivergenceIsReported) {
  TrainConfig tc;
  tc.epochs = 3;
  tc.scenes_per_epoch = 20;
  tc.lr = 1e300;
  tc.grad_clip = 0.0;
  try {
    training::train(tc, tiny_sim(), tiny_dims());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDivergedLoss);
  }
}

// Frozen after the first full run (observed ratio about 0.65).
TEST(Train, VehicleOnlyLossFallsByAQuarter) {
  TrainConfig tc;
  tc.mode = Mode::kVehicleOnly;
  const auto r = training::train(tc, SimConfig{}, ModelDims{});
  ASSERT_EQ(r.loss_trace.size(), 30u);
  RecordProperty("loss_ratio", std::to_string(r.loss_trace.back() / r.loss_trace.front()));
  EXPECT_LT(r.loss_trace.back(), 0.75 * r.loss_trace.front());
}

// Vehicle sees A, which hides B; the roadside unit sees B, which hides A.
TEST(Modes, ComplementationRecoversHiddenObject) {
  const SimConfig sim;
  TrainConfig tc;
  tc.mode = Mode::kQuest;
  const ModelBundle model = training::train(tc, sim, ModelDims{}).model;

  scenario::Scene scene;
  scene.veh_pose = sim.scene.veh_pose;
  scene.inf_pose = sim.scene.inf_pose;
  scene.objects = {{0, car(15, 0)}, {1, car(30, 0)}};
  ASSERT_EQ(scenario::visible_objects(scene, scene.veh_pose, sim.vehicle.visibility), std::vector<std::int64_t>{0});
  ASSERT_EQ(scenario::visible_objects(scene, scene.inf_pose, sim.infrastructure.visibility),
            std::vector<std::int64_t>{1});
  // Pick a detector draw in which both agents report their object.
  for (scene.seed = 0;; ++scene.seed) {
    Rng vr = detector_rng(scene, kVehicleAgent), ir = detector_rng(scene, kInfraAgent);
    const auto v = scenario::simulate_raw(scene, kVehicleAgent, scene.veh_pose, sim.vehicle, vr, sim.scene);
    const auto i = scenario::simulate_raw(scene, kInfraAgent, scene.inf_pose, sim.infrastructure, ir, sim.scene);
    auto has = [](const QueryBatch& b, std::int64_t id) {
      return std::any_of(b.queries.begin(), b.queries.end(), [&](const ObjectQuery& q) { return q.source_id == id; });
    };
    if (has(v.batch, 0) && has(i.batch, 1)) break;
  }
  const auto truth = scene_truth(scene, sim);
  ASSERT_EQ(truth.visible_to_vehicle.count(1), 0u);
  auto covering = [&](Mode m) {
    const auto preds = run_frame(scene, model, m, sim, channel::ChannelConfig{}, Requirement{0.1, std::nullopt}).predictions;
    int n = 0;
    for (const auto& p : preds) n += p.score >= 0.5 && bev_iou(p.box, car(30, 0)) >= 0.3;
    const auto r = evaluation::evaluate({preds}, {truth}, {0.3});
    return std::pair{n, r.recall_occluded_from_vehicle};
  };
  const auto [quest_hits, quest_recall] = covering(Mode::kQuest);
  const auto [fusion_hits, fusion_recall] = covering(Mode::kQuestF);
  EXPECT_GE(quest_hits, fusion_hits + 1);
  EXPECT_EQ(quest_recall, 1.0);
  EXPECT_EQ(fusion_recall, 0.0);
}

}  // namespace
}  // namespace qstream::pipeline
