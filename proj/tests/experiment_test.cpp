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

#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "qstream/experiment.hpp"

namespace qstream::experiment {
namespace {

namespace fs = std::filesystem;

ErrorCode load_error(const std::vector<std::string>& overrides) {
  try {
    load_config("", overrides);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "config accepted";
  return ErrorCode::kInvalidArgument;
}

class TempDir {
 public:
  TempDir()
      : path_(fs::temp_directory_path() /
              ("qstream_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig c = load_config("");
  const nlohmann::json j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
  EXPECT_EQ(config_hash(config_from_json(j)), config_hash(c));
  EXPECT_EQ(c.eval.num_scenes, 100);
  EXPECT_EQ(c.train.epochs, 30);
}

TEST(Config, BenchmarkFileIsTheDefaults) {
  const ExperimentConfig c = load_config(QSTREAM_BENCHMARK_CONFIG);
  ExperimentConfig d;
  d.output_dir = c.output_dir;
  EXPECT_EQ(config_to_json(c), config_to_json(d));
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_EQ(load_error({"epochs=3"}), ErrorCode::kConfigError);
  EXPECT_EQ(load_error({"train.epoch=3"}), ErrorCode::kConfigError);
  EXPECT_EQ(load_error({"vehicle.noise.sigma=3"}), ErrorCode::kConfigError);
}

TEST(Config, ValuesAreTypeAndRangeChecked) {
  EXPECT_EQ(load_error({"train.epochs=\"3\""}), ErrorCode::kConfigError);
  EXPECT_EQ(load_error({"train.epochs=2.5"}), ErrorCode::kConfigError);
  EXPECT_EQ(load_error({"train.lr=-1"}), ErrorCode::kConfigError);
  EXPECT_EQ(load_error({"model.grid_size=4"}), ErrorCode::kConfigError);
  EXPECT_EQ(load_error({"mode=late"}), ErrorCode::kConfigError);
  EXPECT_EQ(load_error({"eval.dropout=1.5"}), ErrorCode::kConfigError);
  EXPECT_EQ(load_error({"no_equals_sign"}), ErrorCode::kConfigError);
}

TEST(Config, OverridesApply) {
  const ExperimentConfig c =
      load_config("", {"mode=quest_f", "train.epochs=3", "model.feature_dim=16", "infrastructure.visibility.max_range=90",
                       "eval.thresholds=[0.2,0.4]"});
  EXPECT_EQ(c.mode, Mode::kQuestF);
  EXPECT_EQ(c.train.mode, Mode::kQuestF);
  EXPECT_EQ(c.train.epochs, 3);
  EXPECT_EQ(c.model.feature_dim, 16);
  EXPECT_EQ(c.sim.infrastructure.visibility.max_range, 90.0);
  EXPECT_EQ(c.eval.thresholds, (std::vector<double>{0.2, 0.4}));
}

TEST(Config, FileThenOverrides) {
  TempDir tmp;
  const fs::path p = tmp.path() / "c.json";
  std::ofstream(p) << R"({"train": {"epochs": 4, "lr": 0.01}, "output_dir": "x"})";
  const ExperimentConfig c = load_config(p.string(), {"train.epochs=5"});
  EXPECT_EQ(c.train.epochs, 5);
  EXPECT_EQ(c.train.lr, 0.01);
  EXPECT_EQ(c.output_dir, "x");
  std::ofstream(p) << "{ not json";
  EXPECT_THROW(load_config(p.string()), Error);
  EXPECT_THROW(load_config((tmp.path() / "missing.json").string()), Error);
}

TEST(Hash, Fnv1aVectorsAndSensitivity) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
  EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
  const auto base = config_hash(load_config(""));
  EXPECT_EQ(config_hash(load_config("")), base);
  EXPECT_NE(config_hash(load_config("", {"train.seed=2"})), base);
}

TEST(Csv, LayoutAndTrailer) {
  Table t{{"mode", "ap"}, {{"quest", "33.1"}, {"quest_f", "18.7"}}};
  std::ostringstream os;
  write_csv(os, t, 0x1234);
  EXPECT_EQ(os.str(), "mode,ap\nquest,33.1\nquest_f,18.7\n# config_hash=0000000000001234 version=1.0.0\n");
}

TEST(ExitCodes, Mapping) {
  EXPECT_EQ(exit_code_for(ErrorCode::kConfigError), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::kDivergedLoss), 3);
  EXPECT_EQ(exit_code_for(ErrorCode::kMissingCheckpoint), 4);
  for (ErrorCode c : {ErrorCode::kBadMagic, ErrorCode::kBadVersion, ErrorCode::kTruncatedPacket,
                      ErrorCode::kCrcMismatch}) {
    EXPECT_EQ(exit_code_for(c), 5);
  }
  EXPECT_EQ(exit_code_for(ErrorCode::kIoError), 1);
}

// A tiny end-to-end run through every command.
TEST(Commands, TrainEvalGenInspect) {
  TempDir tmp;
  const std::vector<std::string> small{
      "output_dir=\"" + tmp.path().string() + "\"", "train.epochs=2", "train.scenes_per_epoch=10",
      "model.feature_dim=8", "model.embedding_dim=8", "eval.num_scenes=5", "gen.count=2"};
  ExperimentConfig c = load_config("", small);
  try {
    cmd_eval(c, {Mode::kQuest});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingCheckpoint);
  }

  const auto trained = cmd_train(c);
  EXPECT_EQ(trained.loss_trace.size(), 2u);
  EXPECT_EQ(load_checkpoint(c, Mode::kQuest), trained.model);
  EXPECT_TRUE(fs::exists(tmp.path() / "quest_loss.csv"));

  const auto runs = cmd_eval(c, {Mode::kQuest});
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_EQ(runs[0].predictions.size(), 5u);
  const Table t = eval_table(c, runs);
  EXPECT_EQ(t.header[1], "ap_bev@0.30");
  EXPECT_EQ(t.header[2], "ap_bev@0.50");
  EXPECT_LE(runs[0].metrics.ap_bev.at(0.5), runs[0].metrics.ap_bev.at(0.3));

  const auto sweep = cmd_sweep_threshold(c, {0.1, 0.5});
  EXPECT_GE(sweep[0].bytes_mean, sweep[1].bytes_mean);
  const auto drops = cmd_sweep_dropout(c, {0.0, 1.0});
  EXPECT_GT(drops[0].bytes_mean, drops[1].bytes_mean);
  EXPECT_EQ(drops[1].bytes_mean, 74.0);

  const auto files = cmd_gen_scenes(c);
  ASSERT_EQ(files.size(), 4u);
  std::ifstream scene_in(files[0]);
  EXPECT_EQ(scenario::read_scene(scene_in), scenario::generate_scene(c.sim.scene, mix_seed(c.gen.seed, 0)));

  std::ostringstream ok;
  EXPECT_EQ(cmd_codec_inspect(files[1].string(), ok), kExitOk);
  EXPECT_NE(ok.str().find("crc     OK"), std::string::npos);

  std::string bytes = read_file(files[1].string());
  bytes[20] ^= 0x04;
  const fs::path bad = tmp.path() / "bad.qpk";
  std::ofstream(bad, std::ios::binary) << bytes;
  std::ostringstream corrupt;
  EXPECT_EQ(cmd_codec_inspect(bad.string(), corrupt), kExitCorruptPacket);
  EXPECT_NE(corrupt.str().find("CrcMismatch"), std::string::npos);
}

}  // namespace
}  // namespace qstream::experiment
