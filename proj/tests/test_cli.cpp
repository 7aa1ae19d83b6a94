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

#include <catch2/catch.hpp>
#include <cstdlib>

#include "metadet/pipeline.hpp"

using namespace metadet;
namespace fs = std::filesystem;

namespace {

fs::path work_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "metadet_test_cli";
    fs::remove_all(p);
    fs::create_directories(p);
    data::synthesize_domain_files(data::Domain::MNIST, p / "data", {700, 260, 5});
    return p;
  }();
  return root;
}

pipeline::RunConfig micro_config() {
  pipeline::RunConfig cfg;
  cfg.dataset = "AdvMNIST";
  cfg.benchmark = "cross-adversary";
  cfg.victim_epochs = 1;
  cfg.victim_max_images = 400;
  cfg.max_train_images = 120;
  cfg.max_test_images = 80;
  cfg.real_train_images = 120;
  cfg.real_test_images = 80;
  cfg.total_tasks = 24;
  cfg.task_number = 4;
  cfg.inner_update_times = 2;
  cfg.train_query_size = 10;
  cfg.test_query_size = 6;
  cfg.epochs = 1;
  cfg.test_tasks = 12;
  cfg.validation_tasks = 6;
  cfg.finetune_times = 3;
  cfg.meta_mode = "first_order";
  cfg.seed = 11;
  cfg.data_root = (work_root() / "data").string();
  cfg.out_dir = (work_root() / "runs").string();
  return cfg;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(METADET_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

}  // namespace

TEST_CASE("config defaults mirror the published default parameter table") {
  pipeline::RunConfig cfg;
  REQUIRE(cfg.shots == 1);
  REQUIRE(cfg.ways == 2);
  REQUIRE(cfg.train_query_size == 70);
  REQUIRE(cfg.test_query_size == 30);
  REQUIRE(cfg.task_number == 30);
  REQUIRE(cfg.inner_update_times == 12);
  REQUIRE(cfg.finetune_times == 20);
  REQUIRE(cfg.total_tasks == 20000);
  REQUIRE(cfg.inner_lr == 0.001);
  REQUIRE(cfg.outer_lr == 0.0001);
  REQUIRE(cfg.dataset == "AdvCIFAR");
  REQUIRE(cfg.backbone == "conv3");
  REQUIRE(cfg.benchmark == "cross-adversary");
  REQUIRE(cfg.epochs == 4);
}

TEST_CASE("unknown config keys are rejected") {
  io::json j = pipeline::RunConfig{}.to_json();
  j["nonsense_key"] = 1;
  REQUIRE_THROWS_AS(pipeline::RunConfig::from_json(j), ConfigError);
}

TEST_CASE("config round-trips through json and hashes stably") {
  pipeline::RunConfig cfg = micro_config();
  auto j = cfg.to_json();
  auto back = pipeline::RunConfig::from_json(j);
  REQUIRE(back.to_json() == j);
  REQUIRE(back.hash() == cfg.hash());
  pipeline::RunConfig other = cfg;
  other.shots = 5;
  REQUIRE(other.hash() != cfg.hash());
}

TEST_CASE("micro pipeline end to end: evaluate, cache, artifact hash stamps") {
  pipeline::RunConfig cfg = micro_config();
  io::json report = pipeline::run_evaluate(cfg);
  REQUIRE(report.at("mean_f1").get<double>() >= 0.0);
  REQUIRE(report.at("mean_f1").get<double>() <= 1.0);
  REQUIRE(report.at("per_task_f1").size() == 12);
  REQUIRE(report.at("config_hash") == cfg.hash());
  REQUIRE(report.contains("timing"));

  // cached second call returns the identical report
  io::json again = pipeline::run_evaluate(cfg);
  REQUIRE(again == report);

  // stage artifacts carry the producing run's hash
  auto ckpt = train::load_checkpoint(pipeline::checkpoint_dir(cfg));
  REQUIRE(ckpt.provenance.at("config_hash") == cfg.hash());
}

TEST_CASE("dnn methods ride the same artifacts and evaluator") {
  pipeline::RunConfig cfg = micro_config();
  cfg.method = "dnn_balanced";
  cfg.epochs = 1;
  io::json report = pipeline::run_evaluate(cfg);
  REQUIRE(report.at("method") == "dnn_balanced");
  REQUIRE(report.at("per_task_f1").size() == 12);
  // the expensive advset is shared with the meta run (same stage key)
  const auto protocol = cfg.protocol();
  auto dir = pipeline::advset_dir(cfg, protocol.train_arch, protocol.train_domain,
                                  [&] {
                                    auto v = pipeline::side_adversaries(protocol, true);
                                    for (auto& a : pipeline::side_adversaries(protocol, false))
                                      v.push_back(a);
                                    return v;
                                  }());
  REQUIRE(fs::exists(dir / "manifest.json"));
}

TEST_CASE("finetune sweep emits one report per value plus exact CSV sidecar") {
  pipeline::RunConfig cfg = micro_config();
  auto reports = pipeline::run_sweep(cfg, "finetune_times", {0, 1, 3});
  REQUIRE(reports.size() == 3);
  pipeline::emit_sweep_outputs(cfg, "finetune_times", reports, "sweep_ft");
  const fs::path dir = cfg.run_dir() / "reports";
  REQUIRE(fs::exists(dir / "sweep_ft.svg"));
  REQUIRE(fs::exists(dir / "sweep_ft.csv"));

  // CSV values match the report JSON digit for digit
  auto bytes = io::read_bytes(dir / "sweep_ft.csv");
  const std::string csv(bytes.begin(), bytes.end());
  for (const auto& r : reports) {
    const std::string cell = io::json(r.at("mean_f1").get<double>()).dump();
    REQUIRE(csv.find(cell) != std::string::npos);
  }

  // steps=0 row exists and differs from the fine-tuned ones in general
  REQUIRE(reports[0].at("sweep_value").get<double>() == 0.0);
}

TEST_CASE("cli: exit codes for usage errors, help, and a good invocation") {
  REQUIRE(run_cli("definitely-not-a-subcommand") == 2);
  REQUIRE(run_cli("evaluate --no-such-flag 3") == 2);
  REQUIRE(run_cli("--help") == 0);
  REQUIRE(run_cli("") == 2);  // a subcommand is required

  // config error surfaces as a runtime failure (exit 1)
  REQUIRE(run_cli("train --dataset NotADataset") == 1);

  // a real micro invocation through the binary (artifacts cached from above)
  pipeline::RunConfig cfg = micro_config();
  const std::string flags =
      " --data-root " + cfg.data_root + " --out-dir " + cfg.out_dir +
      " --dataset AdvMNIST --benchmark cross-adversary --victim-epochs 1"
      " --victim-max-images 400 --max-train-images 120 --max-test-images 80"
      " --real-train-images 120 --real-test-images 80 --total-tasks 24 --task-number 4"
      " --inner-update-times 2 --train-query-size 10 --test-query-size 6 --epochs 1"
      " --test-tasks 12 --validation-tasks 6 --finetune-times 3 --meta-mode first_order"
      " --seed 11";
  REQUIRE(run_cli("evaluate" + flags) == 0);
}

TEST_CASE("report subcommand refuses to mix advset provenances") {
  const fs::path dir = work_root() / "mixed";
  fs::create_directories(dir);
  io::json a = {{"method", "meta"}, {"mean_f1", 0.8}, {"hashes", {{"advset", "aaaa"}}}};
  io::json b = {{"method", "meta"}, {"mean_f1", 0.7}, {"hashes", {{"advset", "bbbb"}}}};
  io::save_json(dir / "a.json", a);
  io::save_json(dir / "b.json", b);
  const std::string base = " --out-dir " + (work_root() / "runs").string();
  REQUIRE(run_cli("report --inputs " + (dir / "a.json").string() + "," +
                  (dir / "b.json").string() + base) == 1);
  REQUIRE(run_cli("report --inputs " + (dir / "a.json").string() + base) == 0);
}
