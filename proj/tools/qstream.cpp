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

// qstream: train, evaluate and sweep the query-cooperation simulator.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qstream/experiment.hpp"

namespace ex = qstream::experiment;
using qstream::pipeline::Mode;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;  // CSV path; empty means stdout only
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "experiment config (JSON)");
  cmd->add_option("--set", c.overrides, "override a config key, e.g. --set train.epochs=5")->take_all();
}

void emit(const ex::Table& t, const ex::ExperimentConfig& cfg, const std::string& out) {
  const auto hash = ex::config_hash(cfg);
  ex::write_csv(std::cout, t, hash);
  if (!out.empty()) ex::write_csv_file(out, t, hash);
}

int run(int argc, char** argv) {
  CLI::App app{"query-cooperation perception simulator"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(ex::kVersion));

  Common train_o, eval_o, thr_o, drop_o, gen_o;
  std::string train_mode, eval_modes, sweep_mode_t, sweep_mode_d, packet;
  std::vector<double> thresholds, ratios;
  bool dump_config = false;

  auto* train = app.add_subcommand("train", "train one mode and write its checkpoint");
  add_common(train, train_o);
  train->add_option("--mode", train_mode, "vehicle_only | result_coop | quest_f | quest");
  train->add_flag("--dump-config", dump_config, "print the effective config and exit");

  auto* eval = app.add_subcommand("eval", "evaluate trained modes on the held-out scenes");
  add_common(eval, eval_o);
  eval->add_option("--modes", eval_modes, "comma-separated modes (default: eval.modes)");
  eval->add_option("-o,--out", eval_o.out, "also write the CSV here");

  auto* sweep_t = app.add_subcommand("sweep-threshold", "AP and bytes across transmission thresholds");
  add_common(sweep_t, thr_o);
  sweep_t->add_option("--mode", sweep_mode_t, "mode whose checkpoint to sweep");
  sweep_t->add_option("--thresholds", thresholds, "default: eval.thresholds")->delimiter(',');
  sweep_t->add_option("-o,--out", thr_o.out, "also write the CSV here");

  auto* sweep_d = app.add_subcommand("sweep-dropout", "AP and bytes across packet dropout ratios");
  add_common(sweep_d, drop_o);
  sweep_d->add_option("--mode", sweep_mode_d, "mode whose checkpoint to sweep");
  sweep_d->add_option("--ratios", ratios, "default: eval.dropout_ratios")->delimiter(',');
  sweep_d->add_option("-o,--out", drop_o.out, "also write the CSV here");

  auto* gen = app.add_subcommand("gen-scenes", "write scene files and infrastructure packets");
  add_common(gen, gen_o);

  auto* inspect = app.add_subcommand("codec-inspect", "decode and dump a query packet");
  inspect->add_option("packet", packet, "packet file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : ex::kExitConfig;
  }

  auto load = [](Common& c, const std::string& mode) {
    if (!mode.empty()) c.overrides.push_back("mode=\"" + mode + "\"");
    return ex::load_config(c.config, c.overrides);
  };

  try {
    if (*train) {
      const auto cfg = load(train_o, train_mode);
      if (dump_config) {
        std::cout << ex::config_to_json(cfg).dump(2) << '\n';
        return ex::kExitOk;
      }
      const auto r = ex::cmd_train(cfg);
      const auto p = ex::checkpoint_paths(cfg, cfg.mode);
      ex::write_csv(std::cout, ex::loss_table(r.loss_trace), ex::config_hash(cfg));
      std::cerr << "wrote " << p.qcp.string() << " and " << p.manifest.string() << '\n';
    } else if (*eval) {
      const auto cfg = load(eval_o, "");
      std::vector<Mode> modes;
      std::vector<std::string> names = cfg.eval.modes;
      if (!eval_modes.empty()) names = CLI::detail::split(eval_modes, ',');
      for (const auto& n : names) {
        try {
          modes.push_back(qstream::pipeline::parse_mode(n));
        } catch (const qstream::Error&) {
          qstream::fail(qstream::ErrorCode::kConfigError, "unknown mode '" + n + "'");
        }
      }
      emit(ex::eval_table(cfg, ex::cmd_eval(cfg, modes)), cfg, eval_o.out);
    } else if (*sweep_t) {
      const auto cfg = load(thr_o, sweep_mode_t);
      const auto& list = thresholds.empty() ? cfg.eval.thresholds : thresholds;
      emit(ex::sweep_table(cfg, ex::cmd_sweep_threshold(cfg, list), true), cfg, thr_o.out);
    } else if (*sweep_d) {
      const auto cfg = load(drop_o, sweep_mode_d);
      const auto& list = ratios.empty() ? cfg.eval.dropout_ratios : ratios;
      emit(ex::sweep_table(cfg, ex::cmd_sweep_dropout(cfg, list), false), cfg, drop_o.out);
    } else if (*gen) {
      const auto cfg = load(gen_o, "");
      for (const auto& p : ex::cmd_gen_scenes(cfg)) std::cout << p.string() << '\n';
    } else if (*inspect) {
      return ex::cmd_codec_inspect(packet, std::cout);
    }
  } catch (const qstream::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return ex::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return ex::kExitFailure;
  }
  return ex::kExitOk;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
