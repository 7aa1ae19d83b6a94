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

#pragma once

#include <iostream>

#include "metadet/plots.hpp"
#include "metadet/train.hpp"

// Pipeline stages behind the CLI: every stage reads/writes one run directory
// named by the config hash, caches its artifacts, and embeds that hash in
// everything it produces so mixed-provenance artifacts are rejected early.

namespace metadet::pipeline {

namespace fs = std::filesystem;
using io::json;

struct RunConfig {
  // Tab-6 style experiment keys
  int shots = 1;
  int ways = 2;
  int train_query_size = 70;
  int test_query_size = 30;
  int task_number = 30;        // tasks per mini-batch (K)
  int inner_update_times = 12; // inner update iterations (T)
  int finetune_times = 20;     // fine-tune iterations at test time
  std::int64_t total_tasks = 20000;
  double inner_lr = 0.001;
  double outer_lr = 0.0001;
  std::string dataset = "AdvCIFAR";
  std::string backbone = "conv3";
  std::string benchmark = "cross-adversary";
  int epochs = 4;

  // method / modes
  std::string method = "meta";  // meta | dnn | dnn_balanced
  std::string way_mode = "fixed";
  std::string meta_mode = "second_order";

  // seeds and paths
  std::uint64_t seed = 0;
  std::string data_root;
  std::string out_dir = "runs";

  // victims and attack generation
  std::string victim_arch = "conv4";
  std::string test_arch;    // cross-architecture only
  std::string test_domain;  // cross-domain only
  int victim_epochs = 5;
  std::int64_t victim_max_images = 0;
  std::string validation_adversary = "MI-FGSM";
  std::int64_t max_train_images = 0;
  std::int64_t max_test_images = 0;
  std::int64_t real_train_images = 0;
  std::int64_t real_test_images = 0;

  // evaluation
  std::int64_t test_tasks = 1000;
  std::int64_t validation_tasks = 200;
  std::string white_box_adversary = "I-FGSM";
  std::int64_t white_box_images = 512;

  json to_json() const {
    return {{"shots", shots},
            {"ways", ways},
            {"train_query_size", train_query_size},
            {"test_query_size", test_query_size},
            {"task_number", task_number},
            {"inner_update_times", inner_update_times},
            {"finetune_times", finetune_times},
            {"total_tasks", total_tasks},
            {"inner_lr", inner_lr},
            {"outer_lr", outer_lr},
            {"dataset", dataset},
            {"backbone", backbone},
            {"benchmark", benchmark},
            {"epochs", epochs},
            {"method", method},
            {"way_mode", way_mode},
            {"meta_mode", meta_mode},
            {"seed", seed},
            {"data_root", data_root},
            {"out_dir", out_dir},
            {"victim_arch", victim_arch},
            {"test_arch", test_arch},
            {"test_domain", test_domain},
            {"victim_epochs", victim_epochs},
            {"victim_max_images", victim_max_images},
            {"validation_adversary", validation_adversary},
            {"max_train_images", max_train_images},
            {"max_test_images", max_test_images},
            {"real_train_images", real_train_images},
            {"real_test_images", real_test_images},
            {"test_tasks", test_tasks},
            {"validation_tasks", validation_tasks},
            {"white_box_adversary", white_box_adversary},
            {"white_box_images", white_box_images}};
  }

  static RunConfig from_json(const json& j) {
    RunConfig c;
    const json defaults = c.to_json();
    for (const auto& [key, value] : j.items())
      MD_CHECK(defaults.contains(key), ConfigError, "unknown config key: " + key);
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("shots", c.shots);
    get("ways", c.ways);
    get("train_query_size", c.train_query_size);
    get("test_query_size", c.test_query_size);
    get("task_number", c.task_number);
    get("inner_update_times", c.inner_update_times);
    get("finetune_times", c.finetune_times);
    get("total_tasks", c.total_tasks);
    get("inner_lr", c.inner_lr);
    get("outer_lr", c.outer_lr);
    get("dataset", c.dataset);
    get("backbone", c.backbone);
    get("benchmark", c.benchmark);
    get("epochs", c.epochs);
    get("method", c.method);
    get("way_mode", c.way_mode);
    get("meta_mode", c.meta_mode);
    get("seed", c.seed);
    get("data_root", c.data_root);
    get("out_dir", c.out_dir);
    get("victim_arch", c.victim_arch);
    get("test_arch", c.test_arch);
    get("test_domain", c.test_domain);
    get("victim_epochs", c.victim_epochs);
    get("victim_max_images", c.victim_max_images);
    get("validation_adversary", c.validation_adversary);
    get("max_train_images", c.max_train_images);
    get("max_test_images", c.max_test_images);
    get("real_train_images", c.real_train_images);
    get("real_test_images", c.real_test_images);
    get("test_tasks", c.test_tasks);
    get("validation_tasks", c.validation_tasks);
    get("white_box_adversary", c.white_box_adversary);
    get("white_box_images", c.white_box_images);
    c.validate();
    return c;
  }

  void validate() const {
    MD_CHECK(ways == 2, ConfigError, "ways must be 2");
    MD_CHECK(backbone == "conv3", ConfigError, "only the conv-3 backbone is supported");
    MD_CHECK(method == "meta" || method == "dnn" || method == "dnn_balanced", ConfigError,
             "method must be meta, dnn or dnn_balanced");
    MD_CHECK(dataset.rfind("Adv", 0) == 0, ConfigError,
             "dataset must be AdvMNIST, AdvFashionMNIST or AdvCIFAR");
  }

  data::Domain domain() const {
    const std::string d = dataset.substr(3);
    if (d == "CIFAR" || d == "CIFAR10") return data::Domain::CIFAR10;
    return data::domain_from_name(d);
  }
  data::Domain resolved_test_domain() const {
    if (test_domain.empty()) return domain();
    const std::string d = test_domain.rfind("Adv", 0) == 0 ? test_domain.substr(3) : test_domain;
    if (d == "CIFAR" || d == "CIFAR10") return data::Domain::CIFAR10;
    return data::domain_from_name(d);
  }
  VictimArch resolved_test_arch() const {
    return arch_from_name(test_arch.empty() ? victim_arch : test_arch);
  }

  std::string hash() const { return io::json_hash(to_json()).substr(0, 12); }
  fs::path run_dir() const { return fs::path(out_dir) / hash(); }

  meta::MetaConfig meta_config() const {
    meta::MetaConfig m;
    m.inner_lr = inner_lr;
    m.outer_lr = outer_lr;
    m.inner_steps = inner_update_times;
    m.tasks_per_batch = task_number;
    m.epochs = epochs;
    m.way_mode = way_mode == "fixed" ? meta::WayMode::fixed : meta::WayMode::randomized;
    m.shots = shots;
    m.meta_gradient_mode = meta::mode_from_name(meta_mode);
    return m;
  }

  tasks::TaskConfig task_config() const {
    tasks::TaskConfig t;
    t.shots = shots;
    t.train_query_size = train_query_size;
    t.test_query_size = test_query_size;
    t.way_mode = way_mode == "fixed" ? meta::WayMode::fixed : meta::WayMode::randomized;
    t.total_tasks = total_tasks;
    t.seed = seed;
    return t;
  }

  evalbench::ProtocolKind protocol_kind() const {
    if (benchmark == "cross-adversary") return evalbench::ProtocolKind::cross_adversary;
    if (benchmark == "cross-domain") return evalbench::ProtocolKind::cross_domain;
    if (benchmark == "cross-architecture") return evalbench::ProtocolKind::cross_architecture;
    if (benchmark == "white-box") return evalbench::ProtocolKind::white_box;
    throw ConfigError("unknown benchmark: " + benchmark);
  }

  evalbench::BenchmarkProtocol protocol() const {
    evalbench::ProtocolSpec spec;
    spec.domain = domain();
    spec.test_domain = resolved_test_domain();
    spec.arch = arch_from_name(victim_arch);
    spec.test_arch = resolved_test_arch();
    spec.shots = shots;
    spec.test_tasks = test_tasks;
    spec.validation_adversary = validation_adversary;
    spec.white_box_adversary = white_box_adversary;
    return evalbench::make_protocol(protocol_kind(), spec);
  }
};

inline void log_line(const std::string& stage, const std::string& msg) {
  std::cout << "[" << stage << "] " << msg << "\n" << std::flush;
}

/// Writes (or verifies) the pinned config of a run directory.
inline void pin_config(const RunConfig& cfg) {
  const fs::path p = cfg.run_dir() / "config.json";
  if (fs::exists(p)) {
    MD_CHECK(io::load_json(p) == cfg.to_json(), ConfigError,
             "run directory " + cfg.run_dir().string() + " holds a different config");
    return;
  }
  io::save_json(p, cfg.to_json());
}

// -- stage: data -------------------------------------------------------------------

/// Ensures the source files for every domain the benchmark touches exist.
/// With allow_synth, missing domains are synthesized in the published formats
/// (offline stand-in) and tagged as synthetic.
inline void run_prepare_data(const RunConfig& cfg, bool allow_synth,
                             std::int64_t synth_train = 60000, std::int64_t synth_test = 10000) {
  const fs::path root = data::resolve_data_root(cfg.data_root);
  std::vector<data::Domain> needed{cfg.domain()};
  if (cfg.resolved_test_domain() != cfg.domain()) needed.push_back(cfg.resolved_test_domain());
  for (auto d : needed) {
    if (data::split_files_present(d, root)) {
      log_line("prepare-data", data::domain_name(d) + ": present under " + root.string());
      continue;
    }
    MD_CHECK(allow_synth, IngestError,
             "dataset files for " + data::domain_name(d) + " not found under " + root.string() +
                 "; download them there, or pass --synth to generate the offline stand-in corpus");
    log_line("prepare-data", data::domain_name(d) + ": synthesizing stand-in corpus");
    data::synthesize_domain_files(d, root, {synth_train, synth_test, cfg.seed});
  }
}

// ---------------------------------------------------------------------------
// Stage cache keys. Heavy artifacts (victims, advsets, pools) are shared
// across run configs that agree on the inputs that actually shape them, so a
// method or shots change never regenerates an attack corpus. Each artifact
// directory records the key inputs plus the hash of the run that created it.
// ---------------------------------------------------------------------------

inline std::string domain_fingerprint(const RunConfig& cfg, data::Domain domain) {
  const fs::path root = data::resolve_data_root(cfg.data_root);
  const fs::path dir = root / data::domain_dirname(domain);
  std::string acc;
  if (domain == data::Domain::CIFAR10) {
    for (int i = 1; i <= 5; ++i) {
      const fs::path f = dir / ("data_batch_" + std::to_string(i) + ".bin");
      if (fs::exists(f)) acc += io::file_hash(f);
    }
    if (fs::exists(dir / "test_batch.bin")) acc += io::file_hash(dir / "test_batch.bin");
  } else {
    for (const char* f : {"train-images-idx3-ubyte", "t10k-images-idx3-ubyte"})
      if (fs::exists(dir / f)) acc += io::file_hash(dir / f);
  }
  MD_CHECK(!acc.empty(), IngestError,
           "no dataset files for " + data::domain_name(domain) + " under " + dir.string());
  return hex64(fnv1a64(acc));
}

inline json victim_key_inputs(const RunConfig& cfg, VictimArch arch, data::Domain domain) {
  return {{"arch", arch_name(arch)},
          {"domain", data::domain_name(domain)},
          {"epochs", cfg.victim_epochs},
          {"max_images", cfg.victim_max_images},
          {"seed", cfg.seed},
          {"data", domain_fingerprint(cfg, domain)}};
}

// -- stage: victims ------------------------------------------------------------------

inline fs::path victim_dir(const RunConfig& cfg, VictimArch arch, data::Domain domain) {
  const json key = victim_key_inputs(cfg, arch, domain);
  return fs::path(cfg.out_dir) / "victims" /
         (arch_name(arch) + "_" + data::domain_name(domain) + "_" +
          io::json_hash(key).substr(0, 12));
}

inline victims::VictimClassifier run_train_victim(const RunConfig& cfg, VictimArch arch,
                                                  data::Domain domain) {
  pin_config(cfg);
  const fs::path dir = victim_dir(cfg, arch, domain);
  if (fs::exists(dir / "victim.json")) {
    log_line("train-victim", dir.string() + ": cached");
    return victims::load_victim(dir);
  }
  const fs::path root = data::resolve_data_root(cfg.data_root);
  auto train = data::load_split(domain, data::Split::train, root);
  auto test = data::load_split(domain, data::Split::test, root);
  auto victim = victims::build_victim(arch, domain);
  victims::VictimConfig vcfg;
  vcfg.epochs = cfg.victim_epochs;
  vcfg.seed = cfg.seed;
  vcfg.max_train_images = cfg.victim_max_images;
  log_line("train-victim", "training " + arch_name(arch) + " on " + data::domain_name(domain));
  victims::train_victim(victim, train, vcfg, &test);
  victim.meta()["provenance"] = train.provenance;
  victim.meta()["config_hash"] = cfg.hash();
  victims::save_victim(dir, victim);
  log_line("train-victim",
           "test accuracy " + std::to_string(real(victim.meta().at("test_accuracy"))));
  return victim;
}

// -- stage: attacks -------------------------------------------------------------------

/// Adversaries a protocol needs from one advset side.
inline std::vector<std::string> side_adversaries(const evalbench::BenchmarkProtocol& p,
                                                 bool train_side) {
  std::vector<std::string> out = train_side ? p.train_adversaries : p.test_adversaries;
  if (train_side && !p.validation_adversary.empty()) out.push_back(p.validation_adversary);
  return out;
}

inline json advset_key_inputs(const RunConfig& cfg, VictimArch arch, data::Domain domain,
                              const std::vector<std::string>& adversaries) {
  return {{"victim", victim_key_inputs(cfg, arch, domain)},
          {"adversaries", adversaries},
          {"max_train_images", cfg.max_train_images},
          {"max_test_images", cfg.max_test_images},
          {"real_train_images", cfg.real_train_images},
          {"real_test_images", cfg.real_test_images},
          {"seed", cfg.seed}};
}

inline fs::path advset_dir(const RunConfig& cfg, VictimArch arch, data::Domain domain,
                           const std::vector<std::string>& adversaries) {
  const json key = advset_key_inputs(cfg, arch, domain, adversaries);
  return fs::path(cfg.out_dir) / "advsets" /
         (data::domain_name(domain) + "_" + arch_name(arch) + "_" +
          io::json_hash(key).substr(0, 12));
}

inline attacks::AdvExampleSet run_gen_attacks(const RunConfig& cfg, VictimArch arch,
                                              data::Domain domain,
                                              const std::vector<std::string>& adversaries) {
  pin_config(cfg);
  const fs::path dir = advset_dir(cfg, arch, domain, adversaries);
  if (fs::exists(dir / "manifest.json")) {
    log_line("gen-attacks", dir.string() + ": cached");
    return attacks::load_advset(dir);
  }
  auto victim = run_train_victim(cfg, arch, domain);
  const fs::path root = data::resolve_data_root(cfg.data_root);
  auto train = data::load_split(domain, data::Split::train, root);
  auto test = data::load_split(domain, data::Split::test, root);

  attacks::BuildLimits limits;
  limits.max_train_images = cfg.max_train_images;
  limits.max_test_images = cfg.max_test_images;
  limits.real_train_images = cfg.real_train_images;
  limits.real_test_images = cfg.real_test_images;
  std::map<std::string, attacks::AttackBudget> budgets;  // per-domain defaults apply

  log_line("gen-attacks", "generating " + std::to_string(adversaries.size()) +
                              " adversaries against " + arch_name(arch) + " on " +
                              data::domain_name(domain));
  auto set = attacks::build_adv_dataset(
      victim, train, test, adversaries, budgets, limits, cfg.seed,
      victims::victim_hash(victim_dir(cfg, arch, domain)),
      [](const std::string& msg) { log_line("gen-attacks", msg); });
  set.manifest["config_hash"] = cfg.hash();
  set.manifest["stage_key"] = advset_key_inputs(cfg, arch, domain, adversaries);
  attacks::save_advset(dir, set);
  for (const auto& e : set.entries)
    log_line("gen-attacks", e.adversary + "/" + data::split_name(e.split) + ": " +
                                std::to_string(e.images.dim(0)) + " examples");
  return set;
}

// -- stage: pools ----------------------------------------------------------------------

struct PoolPaths {
  fs::path train, validation, test;
};

inline json pool_key_inputs(const RunConfig& cfg) {
  const auto protocol = cfg.protocol();
  return {{"task_config", cfg.task_config().to_json()},
          {"protocol", protocol.to_json()},
          {"train_advset",
           advset_key_inputs(cfg, protocol.train_arch, protocol.train_domain,
                             side_adversaries(protocol, true))},
          {"validation_tasks", cfg.validation_tasks}};
}

inline PoolPaths pool_paths(const RunConfig& cfg) {
  const fs::path d = fs::path(cfg.out_dir) / "pools" /
                     io::json_hash(pool_key_inputs(cfg)).substr(0, 12);
  return {d / "train.bin", d / "validation.bin", d / "test.bin"};
}

struct PipelineData {
  attacks::AdvExampleSet train_set;  // train-side advset
  attacks::AdvExampleSet test_set;   // test-side advset (may equal train_set)
  bool split_sets = false;           // true when the two differ
};

/// Loads (generating if needed) the advsets a protocol touches.
inline PipelineData load_pipeline_data(const RunConfig& cfg) {
  const auto protocol = cfg.protocol();
  PipelineData out;
  if (protocol.kind == evalbench::ProtocolKind::cross_domain) {
    out.train_set = run_gen_attacks(cfg, protocol.train_arch, protocol.train_domain,
                                    side_adversaries(protocol, true));
    out.test_set = run_gen_attacks(cfg, protocol.test_arch, protocol.test_domain,
                                   side_adversaries(protocol, false));
    out.split_sets = true;
  } else if (protocol.kind == evalbench::ProtocolKind::cross_architecture) {
    out.train_set = run_gen_attacks(cfg, protocol.train_arch, protocol.train_domain,
                                    side_adversaries(protocol, true));
    out.test_set = run_gen_attacks(cfg, protocol.test_arch, protocol.test_domain,
                                   side_adversaries(protocol, false));
    out.split_sets = true;
  } else {
    // cross-adversary and white-box share one advset over train+val+test groups
    std::vector<std::string> all = side_adversaries(protocol, true);
    if (protocol.kind == evalbench::ProtocolKind::cross_adversary)
      for (const auto& a : side_adversaries(protocol, false)) all.push_back(a);
    out.train_set = run_gen_attacks(cfg, protocol.train_arch, protocol.train_domain, all);
    out.test_set = out.train_set;
  }
  return out;
}

struct Pools {
  tasks::TaskPool train, validation, test;
};

inline Pools run_build_pools(const RunConfig& cfg) {
  pin_config(cfg);
  const auto paths = pool_paths(cfg);
  if (fs::exists(paths.train) && fs::exists(paths.validation) && fs::exists(paths.test)) {
    log_line("build-pool", "cached under " + paths.train.parent_path().string());
    return {tasks::load_pool(paths.train), tasks::load_pool(paths.validation),
            tasks::load_pool(paths.test)};
  }
  const auto protocol = cfg.protocol();
  auto data_sets = load_pipeline_data(cfg);
  const auto tcfg = cfg.task_config();

  tasks::PoolSpec train_spec;
  train_spec.split = data::Split::train;
  train_spec.adversaries = protocol.train_adversaries;
  train_spec.name = "train";
  tasks::TaskPool train_pool = tasks::build_task_pool(data_sets.train_set, tcfg, train_spec);

  // validation: held-out adversary for cross-adversary; otherwise the
  // train-side test split (never the protocol's own test source)
  tasks::PoolSpec val_spec;
  val_spec.n_tasks = cfg.validation_tasks;
  val_spec.name = "validation";
  val_spec.use_test_query_size = true;
  if (protocol.kind == evalbench::ProtocolKind::cross_adversary && !protocol.validation_adversary.empty()) {
    val_spec.split = data::Split::train;
    val_spec.adversaries = {protocol.validation_adversary};
  } else {
    val_spec.split = data::Split::test;
    val_spec.adversaries = protocol.train_adversaries;
  }
  tasks::TaskPool val_pool = tasks::build_task_pool(data_sets.train_set, tcfg, val_spec);

  tasks::TaskPool test_pool;
  if (protocol.kind == evalbench::ProtocolKind::white_box) {
    test_pool = tasks::TaskPool{};  // built later from generated white-box examples
    test_pool.config = tcfg;
  } else {
    tasks::PoolSpec test_spec;
    test_spec.split = data::Split::test;
    test_spec.adversaries = protocol.test_adversaries;
    test_spec.n_tasks = protocol.test_tasks;
    test_spec.name = "test";
    test_spec.use_test_query_size = true;
    test_pool = tasks::build_task_pool(data_sets.test_set, tcfg, test_spec);
  }

  fs::create_directories(paths.train.parent_path());
  tasks::save_pool(paths.train, train_pool);
  tasks::save_pool(paths.validation, val_pool);
  if (!test_pool.tasks.empty() || protocol.kind == evalbench::ProtocolKind::white_box)
    tasks::save_pool(paths.test, test_pool);
  log_line("build-pool", "train " + std::to_string(train_pool.tasks.size()) + ", validation " +
                             std::to_string(val_pool.tasks.size()) + ", test " +
                             std::to_string(test_pool.tasks.size()) + " tasks");
  return {std::move(train_pool), std::move(val_pool), std::move(test_pool)};
}

// -- stage: training -------------------------------------------------------------------

inline fs::path checkpoint_dir(const RunConfig& cfg) {
  return cfg.run_dir() / "checkpoints" / cfg.method;
}

inline train::MasterCheckpoint run_train(const RunConfig& cfg) {
  pin_config(cfg);
  const fs::path dir = checkpoint_dir(cfg);
  if (fs::exists(dir / "checkpoint.json")) {
    log_line("train", dir.string() + ": cached");
    return train::load_checkpoint(dir);
  }
  auto data_sets = load_pipeline_data(cfg);
  auto pools = run_build_pools(cfg);

  if (cfg.method == "dnn" || cfg.method == "dnn_balanced") {
    train::DnnConfig dcfg;
    dcfg.epochs = cfg.epochs;
    dcfg.seed = cfg.seed;
    log_line("train", "training " + cfg.method + " baseline");
    auto ckpt = train::train_dnn(data_sets.train_set, cfg.method == "dnn_balanced", dcfg,
                                 cfg.protocol().train_adversaries);
    ckpt.provenance["config_hash"] = cfg.hash();
    train::save_checkpoint(dir, ckpt);
    return ckpt;
  }

  train::TrainMetaOptions topt;
  topt.seed = cfg.seed;
  topt.validation_pool = &pools.validation;
  topt.validation_eval.finetune_steps = cfg.finetune_times;
  topt.validation_eval.lr = cfg.inner_lr;
  topt.checkpoint_dir = dir / "epochs";
  topt.on_epoch = [](int epoch, std::int64_t iter, real val_f1) {
    log_line("train", "epoch " + std::to_string(epoch) + " (iter " + std::to_string(iter) +
                          "): validation F1 " + std::to_string(val_f1));
  };
  topt.on_progress = [](std::int64_t iter, std::int64_t total) {
    if (iter % 50 == 0 || iter == total)
      log_line("train", "iteration " + std::to_string(iter) + "/" + std::to_string(total));
  };
  log_line("train", "meta-training (" + cfg.meta_mode + ", shots " + std::to_string(cfg.shots) +
                        ", " + cfg.way_mode + " way)");
  auto ckpt = train::train_meta(data_sets.train_set, pools.train, cfg.meta_config(), topt);
  ckpt.provenance["config_hash"] = cfg.hash();
  train::save_checkpoint(dir, ckpt);
  return ckpt;
}

// -- stage: evaluation -------------------------------------------------------------------

/// Builds the white-box test pool: targeted attacks on the combined
/// classifier+detector model over original test images.
inline std::pair<attacks::AdvExampleSet, tasks::TaskPool> build_white_box_pool(
    const RunConfig& cfg, const train::MasterCheckpoint& master) {
  const auto protocol = cfg.protocol();
  const fs::path root = data::resolve_data_root(cfg.data_root);
  auto test = data::load_split(protocol.train_domain, data::Split::test, root);
  auto victim = run_train_victim(cfg, protocol.train_arch, protocol.train_domain);

  // source subset, stratified
  attacks::BuildLimits lim;
  auto idx = attacks::detail::stratified_take(test, cfg.white_box_images);
  Tensor source = victims::VictimClassifier::gather_images(test.images, idx);
  std::vector<int> labels;
  for (auto i : idx) labels.push_back(test.labels[static_cast<std::size_t>(i)]);

  evalbench::CombinedModel model{attacks::wrap_victim(victim), &master.net, master.params, 0};
  attacks::AttackBudget budget = attacks::default_budget(protocol.train_domain);
  budget.iterations = 100;
  if (protocol.white_box_adversary == "CW") {
    budget.iterations = 30;
    budget.cw_search_steps = 3;
  }
  budget.seed = cfg.seed;

  log_line("white-box", "generating " + protocol.white_box_adversary + " examples over " +
                            std::to_string(source.dim(0)) + " test images");
  evalbench::WhiteBoxResult wb;
  {
    // shard for memory; detector batch statistics are per shard
    const std::int64_t shard = 64;
    const std::int64_t n = source.dim(0);
    wb.images = Tensor(source.shape());
    wb.targets.resize(static_cast<std::size_t>(n));
    wb.success.resize(static_cast<std::size_t>(n));
    const std::int64_t stride = source.dim(1) * source.dim(2) * source.dim(3);
    for (std::int64_t at = 0; at < n; at += shard) {
      const std::int64_t k = std::min(shard, n - at);
      Tensor chunk = victims::VictimClassifier::slice_images(source, at, k);
      std::vector<int> chunk_labels(labels.begin() + at, labels.begin() + at + k);
      auto part = evalbench::white_box_generate(model, chunk, chunk_labels,
                                                protocol.white_box_adversary, budget);
      std::copy(part.images.data(), part.images.data() + k * stride,
                wb.images.data() + at * stride);
      for (std::int64_t i = 0; i < k; ++i) {
        wb.targets[static_cast<std::size_t>(at + i)] = part.targets[static_cast<std::size_t>(i)];
        wb.success[static_cast<std::size_t>(at + i)] = part.success[static_cast<std::size_t>(i)];
        if (part.success[static_cast<std::size_t>(i)]) ++wb.success_count;
      }
    }
  }
  MD_CHECK(wb.success_count > 0, BenchmarkError,
           "white-box attack produced no successful examples");
  log_line("white-box", std::to_string(wb.success_count) + "/" +
                            std::to_string(source.dim(0)) + " successful");

  // assemble an in-memory advset: successful white-box examples + real images
  attacks::AdvExampleSet set;
  set.domain = protocol.train_domain;
  set.victim_arch = protocol.train_arch;
  attacks::AdvEntry adv;
  adv.adversary = protocol.white_box_adversary + "-wb";
  adv.split = data::Split::test;
  std::vector<std::int64_t> ok;
  for (std::int64_t i = 0; i < source.dim(0); ++i)
    if (wb.success[static_cast<std::size_t>(i)]) ok.push_back(i);
  adv.images = victims::VictimClassifier::gather_images(wb.images, ok);
  for (auto i : ok) adv.original_class.push_back(labels[static_cast<std::size_t>(i)]);
  set.entries.push_back(std::move(adv));

  attacks::AdvEntry real_entry;
  real_entry.adversary = attacks::kRealEntry;
  real_entry.split = data::Split::test;
  real_entry.images = source;
  real_entry.original_class = labels;
  set.entries.push_back(std::move(real_entry));
  set.manifest = {{"domain", data::domain_name(set.domain)},
                  {"arch", arch_name(set.victim_arch)},
                  {"white_box", protocol.white_box_adversary},
                  {"success_count", wb.success_count},
                  {"budget", budget.to_json()},
                  {"config_hash", cfg.hash()}};

  tasks::PoolSpec spec;
  spec.split = data::Split::test;
  spec.n_tasks = protocol.test_tasks;
  spec.name = "white-box-test";
  spec.use_test_query_size = true;
  auto pool = tasks::build_task_pool(set, cfg.task_config(), spec);
  return {std::move(set), std::move(pool)};
}

inline fs::path report_path(const RunConfig& cfg, const std::string& name) {
  return cfg.run_dir() / "reports" / (name + ".json");
}

inline json run_evaluate(const RunConfig& cfg, const std::string& report_name = "evaluate") {
  pin_config(cfg);
  const fs::path rpath = report_path(cfg, report_name);
  if (fs::exists(rpath)) {
    log_line("evaluate", rpath.string() + ": cached");
    return io::load_json(rpath);
  }
  auto ckpt = run_train(cfg);
  const auto protocol = cfg.protocol();

  evalbench::EvaluationReport report;
  if (protocol.kind == evalbench::ProtocolKind::white_box) {
    auto [wb_set, wb_pool] = build_white_box_pool(cfg, ckpt);
    evalbench::EvalOptions eopt{cfg.finetune_times, cfg.inner_lr};
    report = evalbench::evaluate(ckpt.net, ckpt.params, wb_set, wb_pool, eopt);
    report.protocol_meta = protocol.to_json();
    report.protocol_meta["white_box_manifest"] = wb_set.manifest;
  } else {
    auto data_sets = load_pipeline_data(cfg);
    auto pools = run_build_pools(cfg);
    evalbench::EvalOptions eopt{cfg.finetune_times, cfg.inner_lr};
    report = evalbench::evaluate(ckpt.net, ckpt.params, data_sets.test_set, pools.test, eopt);
    report.protocol_meta = protocol.to_json();
  }

  json out = report.to_json();
  out["method"] = cfg.method;
  out["config_hash"] = cfg.hash();
  out["config"] = cfg.to_json();
  out["checkpoint"] = ckpt.provenance;

  // inference timing on a query-sized batch (excluded from determinism checks)
  {
    const auto shape = data::domain_shape(cfg.domain());
    Rng rng(cfg.seed);
    Tensor batch = Tensor::rand_uniform({cfg.test_query_size, shape.channels, shape.height,
                                         shape.width}, rng, 0, 1);
    out["timing"]["inference"] = evalbench::measure_inference(ckpt.net, ckpt.params, batch, 30)
                                     .to_json();
  }

  io::save_json(rpath, out);
  log_line("evaluate", report_name + ": mean F1 " + std::to_string(report.mean_f1) + " over " +
                           std::to_string(report.per_task_f1.size()) + " tasks");
  return out;
}

// -- stage: sweeps -------------------------------------------------------------------------

/// finetune_times sweeps reuse the checkpoint; anything else re-runs the
/// training pipeline per value in its own (hash-keyed) run directory.
inline std::vector<json> run_sweep(const RunConfig& cfg, const std::string& param,
                                   const std::vector<double>& values) {
  std::vector<json> reports;
  for (double v : values) {
    RunConfig c = cfg;
    if (param == "finetune_times") {
      c.finetune_times = static_cast<int>(v);
    } else if (param == "shots") {
      c.shots = static_cast<int>(v);
    } else if (param == "task_number") {
      c.task_number = static_cast<int>(v);
    } else if (param == "train_query_size") {
      c.train_query_size = static_cast<int>(v);
    } else if (param == "inner_update_times") {
      c.inner_update_times = static_cast<int>(v);
    } else {
      throw ConfigError("unsupported sweep parameter: " + param);
    }
    const std::string name = "sweep_" + param + "_" + std::to_string(static_cast<long long>(v));
    json r = run_evaluate(c, param == "finetune_times" ? name : "evaluate");
    r["sweep_param"] = param;
    r["sweep_value"] = v;
    reports.push_back(std::move(r));
  }
  return reports;
}

/// Line plot + CSV sidecar for a set of sweep reports.
inline void emit_sweep_outputs(const RunConfig& cfg, const std::string& param,
                               const std::vector<json>& reports, const std::string& stem) {
  plots::Series series;
  series.name = reports.empty() ? "mean_f1" : reports.front().value("method", "mean_f1");
  for (const auto& r : reports)
    series.points.emplace_back(r.at("sweep_value").get<double>(),
                               r.at("mean_f1").get<double>());
  const fs::path dir = cfg.run_dir() / "reports";
  fs::create_directories(dir);
  plots::write_line_plot_svg(dir / (stem + ".svg"), "mean F1 vs " + param, param, "mean F1",
                             {series});
  plots::write_csv(dir / (stem + ".csv"), param, {series});
  log_line("sweep", "wrote " + (dir / (stem + ".svg")).string());
}

}  // namespace metadet::pipeline
