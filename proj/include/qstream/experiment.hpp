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

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "qstream/channel.hpp"
#include "qstream/evaluation.hpp"
#include "qstream/model.hpp"
#include "qstream/pipeline.hpp"
#include "qstream/scenario.hpp"
#include "qstream/training.hpp"

namespace qstream::experiment {

using pipeline::Mode;
using pipeline::mode_name;
using pipeline::parse_mode;
using evaluation::Prediction;

inline constexpr std::string_view kVersion = "1.0.0";

// Process exit codes shared by every CLI verb.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitDiverged = 3,
  kExitMissingCheckpoint = 4,
  kExitCorruptPacket = 5,
};

inline bool is_packet_error(ErrorCode c) {
  return c == ErrorCode::kBadMagic || c == ErrorCode::kBadVersion || c == ErrorCode::kTruncatedPacket ||
         c == ErrorCode::kCrcMismatch;
}

inline int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::kConfigError: return kExitConfig;
    case ErrorCode::kDivergedLoss: return kExitDiverged;
    case ErrorCode::kMissingCheckpoint: return kExitMissingCheckpoint;
    default: return is_packet_error(c) ? kExitCorruptPacket : kExitFailure;
  }
}

struct EvalConfig {
  int num_scenes = 100;
  std::uint64_t scene_seed = 999;
  std::vector<double> iou_thresholds{0.3, 0.5};
  double recall_score_min = 0.5;
  double min_confidence = 0.1;  // requirement sent to the infrastructure
  double dropout = 0.0;
  std::uint64_t channel_seed = 7;
  std::vector<double> thresholds{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
  std::vector<double> dropout_ratios{0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0};
  std::vector<std::string> modes{"vehicle_only", "result_coop", "quest_f", "quest"};
};

struct GenConfig {
  int count = 10;
  std::uint64_t seed = 2024;
};

struct ExperimentConfig {
  Mode mode = Mode::kQuest;
  std::string output_dir = "runs/default";
  ModelDims model;
  pipeline::SimConfig sim;
  training::TrainConfig train;
  EvalConfig eval;
  GenConfig gen;
};

// ---- schema ----

namespace detail {

using nlohmann::json;

[[noreturn]] inline void bad(const std::string& path, const std::string& what) {
  fail(ErrorCode::kConfigError, path + ": " + what);
}

inline void read_value(const json& j, const std::string& path, double& out) {
  if (!j.is_number()) bad(path, "expected a number");
  out = j.get<double>();
}
inline void read_value(const json& j, const std::string& path, int& out) {
  if (!j.is_number_integer()) bad(path, "expected an integer");
  out = j.get<int>();
}
inline void read_value(const json& j, const std::string& path, std::uint64_t& out) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
    bad(path, "expected a non-negative integer");
  }
  out = j.get<std::uint64_t>();
}
inline void read_value(const json& j, const std::string& path, bool& out) {
  if (!j.is_boolean()) bad(path, "expected true or false");
  out = j.get<bool>();
}
inline void read_value(const json& j, const std::string& path, std::string& out) {
  if (!j.is_string()) bad(path, "expected a string");
  out = j.get<std::string>();
}
template <class T>
void read_value(const json& j, const std::string& path, std::vector<T>& out) {
  if (!j.is_array()) bad(path, "expected an array");
  out.clear();
  for (std::size_t i = 0; i < j.size(); ++i) {
    T v{};
    read_value(j[i], path + "[" + std::to_string(i) + "]", v);
    out.push_back(v);
  }
}
inline void read_value(const json& j, const std::string& path, Vec3& out) {
  std::vector<double> v;
  read_value(j, path, v);
  if (v.size() != 3) bad(path, "expected three numbers");
  out = Vec3(v[0], v[1], v[2]);
}

// Walks one JSON object; finish() rejects every key nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) bad(path_.empty() ? "<root>" : path_, "expected an object");
  }

  template <class T>
  ObjectReader& get(const char* key, T& out) {
    if (const json* v = find(key)) read_value(*v, join(key), out);
    return *this;
  }

  // Nested object, or nullptr when absent.
  const json* child(const char* key) { return find(key); }
  std::string join(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) bad(join(item.key().c_str()), "unknown key");
    }
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_range(const json& j, const std::string& path, PerceptionRange& r) {
  ObjectReader o(j, path);
  o.get("x_min", r.x_min).get("y_min", r.y_min).get("x_max", r.x_max).get("y_max", r.y_max);
  o.get("z_min", r.z_min).get("z_max", r.z_max);
  o.finish();
  if (!r.is_valid()) bad(path, "min must be below max on every axis");
}

inline json range_json(const PerceptionRange& r) {
  return {{"x_min", r.x_min}, {"y_min", r.y_min}, {"x_max", r.x_max},
          {"y_max", r.y_max}, {"z_min", r.z_min}, {"z_max", r.z_max}};
}

inline json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline void read_agent(const json& j, const std::string& path, scenario::AgentConfig& a) {
  ObjectReader o(j, path);
  if (const json* v = o.child("visibility")) {
    ObjectReader r(*v, o.join("visibility"));
    r.get("fov_deg", a.visibility.fov_deg).get("max_range", a.visibility.max_range);
    r.get("occlusion", a.visibility.occlusion_enabled);
    r.finish();
    if (!a.visibility.is_valid()) bad(o.join("visibility"), "fov must be in (0, 360] and range positive");
  }
  if (const json* v = o.child("noise")) {
    auto& n = a.noise;
    ObjectReader r(*v, o.join("noise"));
    r.get("pos_sigma", n.pos_sigma).get("pos_sigma_range_gain", n.pos_sigma_range_gain);
    r.get("miss_rate_base", n.miss_rate_base).get("conf_noise_sigma", n.conf_noise_sigma);
    r.get("min_object_conf", n.min_object_conf).get("query_slots", n.query_slots);
    r.get("background_conf_max", n.background_conf_max).get("background_conf_power", n.background_conf_power);
    r.get("ghost_fraction", n.ghost_fraction);
    r.finish();
    if (!n.is_valid()) bad(o.join("noise"), "value out of range");
  }
  o.finish();
}

inline json agent_json(const scenario::AgentConfig& a) {
  const auto& n = a.noise;
  return {{"visibility",
           {{"fov_deg", a.visibility.fov_deg},
            {"max_range", a.visibility.max_range},
            {"occlusion", a.visibility.occlusion_enabled}}},
          {"noise",
           {{"pos_sigma", n.pos_sigma},
            {"pos_sigma_range_gain", n.pos_sigma_range_gain},
            {"miss_rate_base", n.miss_rate_base},
            {"conf_noise_sigma", n.conf_noise_sigma},
            {"min_object_conf", n.min_object_conf},
            {"query_slots", n.query_slots},
            {"background_conf_max", n.background_conf_max},
            {"background_conf_power", n.background_conf_power},
            {"ghost_fraction", n.ghost_fraction}}}};
}

inline bool in_unit(double v) { return v >= 0.0 && v <= 1.0; }

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  const auto& s = c.sim.scene;
  const auto& m = c.model;
  const auto& t = c.train;
  const auto& e = c.eval;
  const auto& ic = c.sim.interaction;
  return {
      {"mode", std::string(mode_name(c.mode))},
      {"output_dir", c.output_dir},
      {"model",
       {{"feature_dim", m.feature_dim},
        {"embedding_dim", m.embedding_dim},
        {"grid_size", m.grid_size},
        {"det_hidden", m.det_hidden},
        {"embed_hidden", m.embed_hidden},
        {"align_hidden", m.align_hidden},
        {"weight_hidden", m.weight_hidden},
        {"decoder_hidden", m.decoder_hidden}}},
      {"scene",
       {{"num_objects_min", s.num_objects_min},
        {"num_objects_max", s.num_objects_max},
        {"extent", detail::range_json(s.extent)},
        {"length", {s.length_min, s.length_max}},
        {"width", {s.width_min, s.width_max}},
        {"height", {s.height_min, s.height_max}},
        {"num_classes", s.num_classes},
        {"inf_yaw_deg", s.inf_pose.yaw() * 180.0 / std::numbers::pi},
        {"inf_position", detail::vec_json(s.inf_pose.translation)},
        {"ego_dims", detail::vec_json(s.ego_dims)},
        {"max_rejections", s.max_rejections}}},
      {"vehicle", detail::agent_json(c.sim.vehicle)},
      {"infrastructure", detail::agent_json(c.sim.infrastructure)},
      {"interaction",
       {{"grid_spacing", ic.grid_spacing},
        {"distance_gate", ic.distance_gate},
        {"capacity", ic.capacity},
        {"range", detail::range_json(ic.range)},
        {"nms_iou", c.sim.nms_iou}}},
      {"train",
       {{"epochs", t.epochs},
        {"scenes_per_epoch", t.scenes_per_epoch},
        {"lr", t.lr},
        {"seed", t.seed},
        {"grad_clip", t.grad_clip},
        {"match_loss_weight", t.match_loss_weight},
        {"match_margin", t.match_margin},
        {"score_loss_weight", t.score_loss_weight},
        {"min_confidence", t.train_min_confidence},
        {"freeze_detectors", t.freeze_detectors}}},
      {"eval",
       {{"num_scenes", e.num_scenes},
        {"scene_seed", e.scene_seed},
        {"iou_thresholds", e.iou_thresholds},
        {"recall_score_min", e.recall_score_min},
        {"min_confidence", e.min_confidence},
        {"dropout", e.dropout},
        {"channel_seed", e.channel_seed},
        {"thresholds", e.thresholds},
        {"dropout_ratios", e.dropout_ratios},
        {"modes", e.modes}}},
      {"gen", {{"count", c.gen.count}, {"seed", c.gen.seed}}},
  };
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::bad;
  using detail::ObjectReader;
  ExperimentConfig c;
  ObjectReader root(j, "");

  std::string mode(mode_name(c.mode));
  root.get("mode", mode).get("output_dir", c.output_dir);
  try {
    c.mode = parse_mode(mode);
  } catch (const Error&) {
    bad("mode", "unknown mode '" + mode + "'");
  }

  if (const auto* v = root.child("model")) {
    ObjectReader o(*v, "model");
    auto& m = c.model;
    o.get("feature_dim", m.feature_dim).get("embedding_dim", m.embedding_dim).get("grid_size", m.grid_size);
    o.get("det_hidden", m.det_hidden).get("embed_hidden", m.embed_hidden).get("align_hidden", m.align_hidden);
    o.get("weight_hidden", m.weight_hidden).get("decoder_hidden", m.decoder_hidden);
    o.finish();
    if (m.feature_dim < 1 || m.embedding_dim < 1 || m.det_hidden < 1 || m.embed_hidden < 1 || m.align_hidden < 1 ||
        m.weight_hidden < 1 || m.decoder_hidden < 1) {
      bad("model", "every width must be positive");
    }
    if (m.grid_size < 1 || m.grid_size % 2 == 0) bad("model.grid_size", "must be a positive odd integer");
  }

  if (const auto* v = root.child("scene")) {
    ObjectReader o(*v, "scene");
    auto& s = c.sim.scene;
    std::vector<double> length{s.length_min, s.length_max}, width{s.width_min, s.width_max},
        height{s.height_min, s.height_max};
    double yaw_deg = s.inf_pose.yaw() * 180.0 / std::numbers::pi;
    Vec3 inf_pos = s.inf_pose.translation;
    o.get("num_objects_min", s.num_objects_min).get("num_objects_max", s.num_objects_max);
    if (const auto* e = o.child("extent")) detail::read_range(*e, "scene.extent", s.extent);
    o.get("length", length).get("width", width).get("height", height);
    o.get("num_classes", s.num_classes).get("inf_yaw_deg", yaw_deg).get("inf_position", inf_pos);
    o.get("ego_dims", s.ego_dims).get("max_rejections", s.max_rejections);
    o.finish();
    const std::pair<const char*, const std::vector<double>*> spans[] = {
        {"length", &length}, {"width", &width}, {"height", &height}};
    for (const auto& [name, r] : spans) {
      if (r->size() != 2 || (*r)[0] <= 0.0 || (*r)[1] < (*r)[0]) {
        bad(std::string("scene.") + name, "expected [min, max] with 0 < min <= max");
      }
    }
    s.length_min = length[0], s.length_max = length[1];
    s.width_min = width[0], s.width_max = width[1];
    s.height_min = height[0], s.height_max = height[1];
    s.inf_pose = Pose::from_yaw(yaw_deg * std::numbers::pi / 180.0, inf_pos);
    if (s.num_objects_min < 0 || s.num_objects_max < s.num_objects_min) bad("scene", "object count range is empty");
    if (s.num_classes < 1) bad("scene.num_classes", "must be positive");
  }
  c.model.num_classes = c.sim.scene.num_classes;

  if (const auto* v = root.child("vehicle")) detail::read_agent(*v, "vehicle", c.sim.vehicle);
  if (const auto* v = root.child("infrastructure")) detail::read_agent(*v, "infrastructure", c.sim.infrastructure);

  if (const auto* v = root.child("interaction")) {
    ObjectReader o(*v, "interaction");
    auto& ic = c.sim.interaction;
    o.get("grid_spacing", ic.grid_spacing).get("distance_gate", ic.distance_gate).get("capacity", ic.capacity);
    if (const auto* r = o.child("range")) detail::read_range(*r, "interaction.range", ic.range);
    o.get("nms_iou", c.sim.nms_iou);
    o.finish();
    if (!detail::in_unit(c.sim.nms_iou)) bad("interaction.nms_iou", "must lie in [0, 1]");
  }
  c.sim.interaction.grid_size = c.model.grid_size;
  c.sim.interaction.embedding_dim = c.model.embedding_dim;
  if (!c.sim.interaction.is_valid()) bad("interaction", "spacing, gate and capacity must be positive");

  if (const auto* v = root.child("train")) {
    ObjectReader o(*v, "train");
    auto& t = c.train;
    o.get("epochs", t.epochs).get("scenes_per_epoch", t.scenes_per_epoch).get("lr", t.lr).get("seed", t.seed);
    o.get("grad_clip", t.grad_clip).get("match_loss_weight", t.match_loss_weight);
    o.get("match_margin", t.match_margin).get("score_loss_weight", t.score_loss_weight);
    o.get("min_confidence", t.train_min_confidence).get("freeze_detectors", t.freeze_detectors);
    o.finish();
  }
  c.train.mode = c.mode;
  if (!c.train.is_valid()) bad("train", "counts must be positive and rates in range");

  if (const auto* v = root.child("eval")) {
    ObjectReader o(*v, "eval");
    auto& e = c.eval;
    o.get("num_scenes", e.num_scenes).get("scene_seed", e.scene_seed).get("iou_thresholds", e.iou_thresholds);
    o.get("recall_score_min", e.recall_score_min).get("min_confidence", e.min_confidence);
    o.get("dropout", e.dropout).get("channel_seed", e.channel_seed).get("thresholds", e.thresholds);
    o.get("dropout_ratios", e.dropout_ratios).get("modes", e.modes);
    o.finish();
    if (e.num_scenes < 0) bad("eval.num_scenes", "must be non-negative");
    if (e.iou_thresholds.empty()) bad("eval.iou_thresholds", "must not be empty");
    for (double x : e.iou_thresholds) {
      if (!(x > 0.0 && x <= 1.0)) bad("eval.iou_thresholds", "entries must lie in (0, 1]");
    }
    for (double x : e.thresholds) {
      if (!detail::in_unit(x)) bad("eval.thresholds", "entries must lie in [0, 1]");
    }
    for (double x : e.dropout_ratios) {
      if (!detail::in_unit(x)) bad("eval.dropout_ratios", "entries must lie in [0, 1]");
    }
    if (!detail::in_unit(e.dropout)) bad("eval.dropout", "must lie in [0, 1]");
    if (!detail::in_unit(e.min_confidence)) bad("eval.min_confidence", "must lie in [0, 1]");
    for (const auto& m : e.modes) {
      try {
        parse_mode(m);
      } catch (const Error&) {
        bad("eval.modes", "unknown mode '" + m + "'");
      }
    }
  }

  if (const auto* v = root.child("gen")) {
    ObjectReader o(*v, "gen");
    o.get("count", c.gen.count).get("seed", c.gen.seed);
    o.finish();
    if (c.gen.count < 0) bad("gen.count", "must be non-negative");
  }
  root.finish();
  return c;
}

// `a.b.c=value`; the value parses as JSON when it can, otherwise it is a string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) fail(ErrorCode::kConfigError, "override must be key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) fail(ErrorCode::kConfigError, "empty path segment in " + key);
    if (!node->is_object()) fail(ErrorCode::kConfigError, "cannot descend into " + key);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

inline std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : data) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Hash of the effective configuration (defaults filled, overrides applied).
inline std::uint64_t config_hash(const ExperimentConfig& c) { return fnv1a64(config_to_json(c).dump()); }

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::kConfigError, "cannot read config " + path);
    j = nlohmann::json::parse(in, nullptr, false, true);
    if (j.is_discarded()) fail(ErrorCode::kConfigError, "config is not valid JSON: " + path);
  }
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

// ---- outputs ----

inline std::string fmt(double v, int digits = 6) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline void write_csv(std::ostream& os, const Table& t, std::uint64_t hash) {
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
    os << '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
  os << "# config_hash=" << hex64(hash) << " version=" << kVersion << '\n';
}

inline void write_csv_file(const std::filesystem::path& p, const Table& t, std::uint64_t hash) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) fail(ErrorCode::kIoError, "cannot write " + p.string());
  write_csv(out, t, hash);
}

struct CheckpointPaths {
  std::filesystem::path qcp, manifest;
};

inline CheckpointPaths checkpoint_paths(const ExperimentConfig& c, Mode m) {
  const std::filesystem::path dir(c.output_dir);
  const std::string stem(mode_name(m));
  return {dir / (stem + ".qcp"), dir / (stem + ".manifest.json")};
}

inline ModelBundle load_checkpoint(const ExperimentConfig& c, Mode m) {
  const auto p = checkpoint_paths(c, m);
  if (!std::filesystem::exists(p.qcp) || !std::filesystem::exists(p.manifest)) {
    fail(ErrorCode::kMissingCheckpoint, "no checkpoint for " + std::string(mode_name(m)) + " in " + c.output_dir);
  }
  return load_bundle(p.qcp.string(), p.manifest.string());
}

// ---- commands ----

inline training::TrainResult train_mode(const ExperimentConfig& c, Mode m) {
  training::TrainConfig tc = c.train;
  tc.mode = m;
  return training::train(tc, c.sim, c.model);
}

inline Table loss_table(const std::vector<double>& trace) {
  Table t{{"epoch", "loss"}, {}};
  for (std::size_t i = 0; i < trace.size(); ++i) t.rows.push_back({std::to_string(i + 1), fmt(trace[i])});
  return t;
}

inline training::TrainResult cmd_train(const ExperimentConfig& c) {
  training::TrainResult r = train_mode(c, c.mode);
  const auto p = checkpoint_paths(c, c.mode);
  std::filesystem::create_directories(c.output_dir);
  save_bundle(r.model, p.qcp.string(), p.manifest.string());
  write_csv_file(std::filesystem::path(c.output_dir) / (std::string(mode_name(c.mode)) + "_loss.csv"),
                 loss_table(r.loss_trace), config_hash(c));
  return r;
}

// Fixed held-out scenes with ground truth, shared by every mode.
struct TestSet {
  std::vector<scenario::Scene> scenes;
  std::vector<evaluation::SceneTruth> truths;
};

inline TestSet make_test_set(const ExperimentConfig& c) {
  TestSet t;
  for (int i = 0; i < c.eval.num_scenes; ++i) {
    t.scenes.push_back(scenario::generate_scene(c.sim.scene, mix_seed(c.eval.scene_seed, static_cast<std::uint64_t>(i))));
    t.truths.push_back(pipeline::scene_truth(t.scenes.back(), c.sim));
  }
  return t;
}

struct RunResult {
  Mode mode = Mode::kQuest;
  double threshold = 0.0;
  double dropout = 0.0;
  evaluation::EvalResult metrics;
  double bytes_mean = 0.0;
  std::vector<std::vector<Prediction>> predictions;  // per scene
};

inline RunResult run_mode(const ExperimentConfig& c, const TestSet& t, const ModelBundle& model, Mode m,
                          double threshold, double dropout) {
  RunResult r{m, threshold, dropout, {}, 0.0, {}};
  const channel::ChannelConfig link{dropout, c.eval.channel_seed};
  const Requirement req{threshold, std::nullopt};
  double bytes = 0.0;
  for (const auto& s : t.scenes) {
    pipeline::FrameResult fr = pipeline::run_frame(s, model, m, c.sim, link, req);
    bytes += static_cast<double>(fr.report.bytes_sent);
    r.predictions.push_back(std::move(fr.predictions));
  }
  r.bytes_mean = t.scenes.empty() ? 0.0 : bytes / static_cast<double>(t.scenes.size());
  r.metrics = evaluation::evaluate(r.predictions, t.truths, c.eval.iou_thresholds,
                                   {c.sim.range(), c.eval.recall_score_min});
  return r;
}

inline std::vector<std::string> ap_columns(const ExperimentConfig& c) {
  std::vector<std::string> cols;
  for (double iou : c.eval.iou_thresholds) cols.push_back("ap_bev@" + fmt(iou, 2));
  return cols;
}

inline void append_ap(std::vector<std::string>& row, const ExperimentConfig& c, const RunResult& r) {
  for (double iou : c.eval.iou_thresholds) row.push_back(fmt(100.0 * r.metrics.ap_bev.at(iou), 4));
}

inline Table eval_table(const ExperimentConfig& c, const std::vector<RunResult>& runs) {
  Table t;
  t.header = {"mode"};
  for (auto& col : ap_columns(c)) t.header.push_back(col);
  for (const char* col : {"recall_total", "recall_occluded", "num_gt", "num_pred", "bytes_mean"}) {
    t.header.push_back(col);
  }
  for (const auto& r : runs) {
    std::vector<std::string> row{std::string(mode_name(r.mode))};
    append_ap(row, c, r);
    row.push_back(fmt(r.metrics.recall_total, 4));
    row.push_back(fmt(r.metrics.recall_occluded_from_vehicle, 4));
    row.push_back(std::to_string(r.metrics.num_gt));
    row.push_back(std::to_string(r.metrics.num_pred));
    row.push_back(fmt(r.bytes_mean, 1));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline Table sweep_table(const ExperimentConfig& c, const std::vector<RunResult>& runs, bool by_threshold) {
  Table t;
  t.header = {by_threshold ? "threshold" : "dropout"};
  for (auto& col : ap_columns(c)) t.header.push_back(col);
  t.header.push_back("bytes_mean");
  for (const auto& r : runs) {
    std::vector<std::string> row{fmt(by_threshold ? r.threshold : r.dropout, 2)};
    append_ap(row, c, r);
    row.push_back(fmt(r.bytes_mean, 1));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline std::vector<RunResult> cmd_eval(const ExperimentConfig& c, const std::vector<Mode>& modes) {
  std::vector<ModelBundle> models;
  for (Mode m : modes) models.push_back(load_checkpoint(c, m));
  const TestSet t = make_test_set(c);
  std::vector<RunResult> runs;
  for (std::size_t i = 0; i < modes.size(); ++i) {
    runs.push_back(run_mode(c, t, models[i], modes[i], c.eval.min_confidence, c.eval.dropout));
  }
  return runs;
}

inline std::vector<RunResult> cmd_sweep_threshold(const ExperimentConfig& c, const std::vector<double>& thresholds) {
  const ModelBundle model = load_checkpoint(c, c.mode);
  const TestSet t = make_test_set(c);
  std::vector<RunResult> runs;
  for (double thr : thresholds) runs.push_back(run_mode(c, t, model, c.mode, thr, c.eval.dropout));
  return runs;
}

inline std::vector<RunResult> cmd_sweep_dropout(const ExperimentConfig& c, const std::vector<double>& ratios) {
  const ModelBundle model = load_checkpoint(c, c.mode);
  const TestSet t = make_test_set(c);
  std::vector<RunResult> runs;
  for (double p : ratios) runs.push_back(run_mode(c, t, model, c.mode, c.eval.min_confidence, p));
  return runs;
}

// Writes scene_NNNN.txt and the infrastructure query packet scene_NNNN.qpk for
// each generated scene. Uses the configured mode's checkpoint when present.
inline std::vector<std::filesystem::path> cmd_gen_scenes(const ExperimentConfig& c) {
  const auto p = checkpoint_paths(c, c.mode);
  const ModelBundle model = std::filesystem::exists(p.qcp) && std::filesystem::exists(p.manifest)
                                ? load_bundle(p.qcp.string(), p.manifest.string())
                                : make_bundle(c.model, c.train.seed);
  const std::filesystem::path dir = std::filesystem::path(c.output_dir) / "scenes";
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (int i = 0; i < c.gen.count; ++i) {
    const auto scene = scenario::generate_scene(c.sim.scene, mix_seed(c.gen.seed, static_cast<std::uint64_t>(i)));
    char stem[32];
    std::snprintf(stem, sizeof stem, "scene_%04d", i);
    const auto txt = dir / (std::string(stem) + ".txt");
    std::ofstream out(txt);
    if (!out) fail(ErrorCode::kIoError, "cannot write " + txt.string());
    scenario::write_scene(out, scene);

    Rng rng = pipeline::detector_rng(scene, pipeline::kInfraAgent);
    QueryBatch inf = scenario::simulate_detections(scene, pipeline::kInfraAgent, scene.inf_pose,
                                                   c.sim.infrastructure, model.det_encoder, rng, c.sim.scene);
    inf.frame_id = static_cast<std::uint64_t>(i);
    inf = select_by_requirement(inf, Requirement{c.eval.min_confidence, std::nullopt}, scene.veh_pose);
    const auto qpk = dir / (std::string(stem) + ".qpk");
    std::ofstream bin(qpk, std::ios::binary);
    if (!bin) fail(ErrorCode::kIoError, "cannot write " + qpk.string());
    const std::string wire = channel::encode_packet(inf);
    bin.write(wire.data(), static_cast<std::streamsize>(wire.size()));
    written.push_back(txt);
    written.push_back(qpk);
  }
  return written;
}

// Human-readable dump; returns the process exit code.
inline int cmd_codec_inspect(const std::string& path, std::ostream& os) {
  const std::string bytes = read_file(path);
  channel::PacketHeader h;
  QueryBatch b;
  try {
    b = channel::decode_packet(bytes, &h);
  } catch (const Error& e) {
    os << "file    " << path << " (" << bytes.size() << " bytes)\n";
    os << "status  corrupt: " << e.name() << '\n';
    if (!is_packet_error(e.code())) throw;
    return kExitCorruptPacket;
  }
  os << "file    " << path << " (" << bytes.size() << " bytes)\n";
  os << "version " << h.version << '\n';
  os << "agent   " << h.agent_id << '\n';
  os << "frame   " << h.frame_id << '\n';
  const Vec3& t = b.pose.translation;
  os << "pose    yaw " << fmt(b.pose.yaw(), 6) << " t " << fmt(t.x(), 3) << ' ' << fmt(t.y(), 3) << ' '
     << fmt(t.z(), 3) << '\n';
  os << "queries " << h.query_count << " x " << h.feature_dim << " floats\n";
  for (const auto& q : b.queries) {
    os << "  #" << q.query_id << " class " << q.class_id << " conf " << fmt(q.confidence, 4) << " ref "
       << fmt(q.ref_point.x(), 3) << ' ' << fmt(q.ref_point.y(), 3) << ' ' << fmt(q.ref_point.z(), 3) << " |f| "
       << fmt(q.feature.norm(), 4) << '\n';
  }
  os << "crc     OK\n";
  return kExitOk;
}

}  // namespace qstream::experiment
