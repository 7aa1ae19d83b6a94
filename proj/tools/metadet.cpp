// Copyright 2026 The metadet Authors
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

#include <CLI11.hpp>
#include <iostream>

#include "metadet/pipeline.hpp"

using namespace metadet;
using pipeline::RunConfig;

namespace {

struct CliState {
  std::string config_path;
  RunConfig cfg;
  // prepare-data
  bool synth = false;
  std::int64_t synth_train = 60000, synth_test = 10000;
  // sweep
  std::string sweep_param = "finetune_times";
  std::vector<double> sweep_values;
  // report
  std::vector<std::string> report_inputs;
  std::string report_stem = "report";
  std::string report_x = "sweep_value";
};

void add_config_flags(CLI::App* cmd, CliState& st) {
  cmd->add_option("--config", st.config_path, "JSON run configuration");
  auto& c = st.cfg;
  cmd->add_option("--shots", c.shots, "examples per way in the support set");
  cmd->add_option("--train-query-size", c.train_query_size, "query examples per training task");
  cmd->add_option("--test-query-size", c.test_query_size, "query examples per test task");
  cmd->add_option("--task-number", c.task_number, "tasks per mini-batch (K)");
  cmd->add_option("--inner-update-times", c.inner_update_times, "inner update iterations (T)");
  cmd->add_option("--finetune-times", c.finetune_times, "fine-tune iterations at test time");
  cmd->add_option("--total-tasks", c.total_tasks, "tasks in the training pool");
  cmd->add_option("--inner-lr", c.inner_lr, "inner update learning rate");
  cmd->add_option("--outer-lr", c.outer_lr, "outer update learning rate");
  cmd->add_option("--dataset", c.dataset, "AdvMNIST, AdvFashionMNIST or AdvCIFAR");
  cmd->add_option("--benchmark", c.benchmark,
                  "cross-adversary | cross-domain | cross-architecture | white-box");
  cmd->add_option("--epochs", c.epochs, "training epochs over the pool");
  cmd->add_option("--method", c.method, "meta | dnn | dnn_balanced");
  cmd->add_option("--way-mode", c.way_mode, "fixed | randomized");
  cmd->add_option("--meta-mode", c.meta_mode, "second_order | first_order");
  cmd->add_option("--seed", c.seed, "root seed for every stage");
  cmd->add_option("--data-root", c.data_root, "dataset root (else METADET_DATA_ROOT)");
  cmd->add_option("--out-dir", c.out_dir, "output root for run directories");
  cmd->add_option("--victim-arch", c.victim_arch, "conv4 | resnet10 | resnet18");
  cmd->add_option("--test-arch", c.test_arch, "test-side architecture (cross-architecture)");
  cmd->add_option("--test-domain", c.test_domain, "test-side domain (cross-domain)");
  cmd->add_option("--victim-epochs", c.victim_epochs, "victim training epochs");
  cmd->add_option("--victim-max-images", c.victim_max_images, "cap on victim training images");
  cmd->add_option("--validation-adversary", c.validation_adversary,
                  "held-out adversary used for validation tasks");
  cmd->add_option("--max-train-images", c.max_train_images, "per-adversary train source cap");
  cmd->add_option("--max-test-images", c.max_test_images, "per-adversary test source cap");
  cmd->add_option("--real-train-images", c.real_train_images, "real-entry train cap");
  cmd->add_option("--real-test-images", c.real_test_images, "real-entry test cap");
  cmd->add_option("--test-tasks", c.test_tasks, "evaluation task count");
  cmd->add_option("--validation-tasks", c.validation_tasks, "validation task count");
  cmd->add_option("--white-box-adversary", c.white_box_adversary, "I-FGSM | CW");
  cmd->add_option("--white-box-images", c.white_box_images, "white-box source image count");
}

RunConfig resolve_config(const CliState& st) {
  RunConfig cfg;
  if (!st.config_path.empty()) cfg = RunConfig::from_json(io::load_json(st.config_path));
  // explicit flags beat the file, which beats the defaults
  const RunConfig defaults;
  io::json merged = cfg.to_json();
  io::json flags = st.cfg.to_json();
  io::json base = defaults.to_json();
  for (auto& [key, value] : flags.items())
    if (value != base.at(key)) merged[key] = value;
  return RunConfig::from_json(merged);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MetaAdvDet: meta-learned few-shot detection of evolving adversarial attacks"};
  app.require_subcommand(1);
  CliState st;

  auto* prepare = app.add_subcommand("prepare-data", "check or synthesize the source datasets");
  add_config_flags(prepare, st);
  prepare->add_flag("--synth", st.synth, "synthesize the offline stand-in corpus when missing");
  prepare->add_option("--synth-train", st.synth_train, "stand-in train split size");
  prepare->add_option("--synth-test", st.synth_test, "stand-in test split size");

  auto* trainv = app.add_subcommand("train-victim", "train the victim classifier");
  add_config_flags(trainv, st);
  auto* gen = app.add_subcommand("gen-attacks", "generate the adversarial example dataset");
  add_config_flags(gen, st);
  auto* build = app.add_subcommand("build-pool", "sample the episodic task pools");
  add_config_flags(build, st);
  auto* train_cmd = app.add_subcommand("train", "train the detector (meta or baseline)");
  add_config_flags(train_cmd, st);
  auto* eval = app.add_subcommand("evaluate", "run the benchmark evaluation");
  add_config_flags(eval, st);

  auto* sweep = app.add_subcommand("sweep", "evaluate across one swept parameter");
  add_config_flags(sweep, st);
  sweep->add_option("--param", st.sweep_param,
                    "finetune_times | shots | task_number | train_query_size | inner_update_times");
  sweep->add_option("--values", st.sweep_values, "swept values")->required()->delimiter(',');

  auto* report = app.add_subcommand("report", "merge reports into plots and CSV");
  add_config_flags(report, st);
  report->add_option("--inputs", st.report_inputs, "report JSON files")->required()->delimiter(',');
  report->add_option("--stem", st.report_stem, "output file stem");
  report->add_option("--x-key", st.report_x, "report key used as the x value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // bad flags -> usage error
  }

  try {
    RunConfig cfg = resolve_config(st);

    if (prepare->parsed()) {
      pipeline::run_prepare_data(cfg, st.synth, st.synth_train, st.synth_test);
    } else if (trainv->parsed()) {
      const auto protocol = cfg.protocol();
      pipeline::run_train_victim(cfg, protocol.train_arch, protocol.train_domain);
      if (protocol.test_arch != protocol.train_arch ||
          protocol.test_domain != protocol.train_domain)
        pipeline::run_train_victim(cfg, protocol.test_arch, protocol.test_domain);
    } else if (gen->parsed()) {
      pipeline::load_pipeline_data(cfg);
    } else if (build->parsed()) {
      pipeline::run_build_pools(cfg);
    } else if (train_cmd->parsed()) {
      pipeline::run_train(cfg);
      pipeline::log_line("train", "checkpoint at " + pipeline::checkpoint_dir(cfg).string());
    } else if (eval->parsed()) {
      io::json r = pipeline::run_evaluate(cfg);
      std::cout << "mean_f1 " << r.at("mean_f1").get<double>() << "\n";
    } else if (sweep->parsed()) {
      auto reports = pipeline::run_sweep(cfg, st.sweep_param, st.sweep_values);
      pipeline::emit_sweep_outputs(cfg, st.sweep_param, reports, "sweep_" + st.sweep_param);
      for (const auto& r : reports)
        std::cout << st.sweep_param << "=" << r.at("sweep_value").get<double>() << " mean_f1 "
                  << r.at("mean_f1").get<double>() << "\n";
    } else if (report->parsed()) {
      std::vector<io::json> reports;
      std::string advset_hash;
      for (const auto& path : st.report_inputs) {
        io::json r = io::load_json(path);
        const std::string h = r.at("hashes").value("advset", "");
        if (advset_hash.empty()) advset_hash = h;
        MD_CHECK(h == advset_hash, ConfigError,
                 "report " + path + " was produced from a different advset; refusing to mix");
        reports.push_back(std::move(r));
      }
      std::map<std::string, plots::Series> by_method;
      double fallback_x = 0;
      for (const auto& r : reports) {
        const std::string method = r.value("method", "unknown");
        auto& s = by_method[method];
        s.name = method;
        const double x =
            r.contains(st.report_x) ? r.at(st.report_x).get<double>() : fallback_x;
        s.points.emplace_back(x, r.at("mean_f1").get<double>());
        fallback_x += 1;
      }
      std::vector<plots::Series> series;
      for (auto& [_, s] : by_method) series.push_back(std::move(s));
      const auto dir = cfg.run_dir() / "reports";
      plots::write_line_plot_svg(dir / (st.report_stem + ".svg"), "mean F1", st.report_x,
                                 "mean F1", series);
      plots::write_csv(dir / (st.report_stem + ".csv"), st.report_x, series);
      std::cout << "wrote " << (dir / (st.report_stem + ".svg")).string() << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
