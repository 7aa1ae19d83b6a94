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

#include "metadet/evalbench.hpp"

// Training drivers. train_meta runs the double-update loop: per mini-batch,
// every task adapts a fresh copy of the master on its support set and
// contributes a query-set gradient; the master then takes one step along the
// accumulated sum. train_dnn is the conventional single-network baseline
// (optionally class-balanced) on the same backbone, producing checkpoints the
// same evaluator consumes.

namespace metadet::train {

namespace fs = std::filesystem;
using io::json;

constexpr const char* kMinibatchStream = "train-meta:minibatch";

struct MasterCheckpoint {
  Conv3Detector net;
  ParamList params;
  meta::MetaConfig config;
  json provenance;  // method, pool hash, seed, epoch, validation f1 history

  MasterCheckpoint(const Conv3Detector& n, ParamList p) : net(n), params(std::move(p)) {}
};

inline void save_checkpoint(const fs::path& dir, const MasterCheckpoint& ckpt) {
  fs::create_directories(dir);
  std::vector<std::pair<std::string, Tensor>> items;
  auto defs = ckpt.net.param_defs();
  for (std::size_t i = 0; i < defs.size(); ++i) items.emplace_back(defs[i].name, ckpt.params[i]);
  io::save_named_tensors(dir / "params.bin", items);
  json side = ckpt.provenance;
  side["in_ch"] = ckpt.net.in_ch();
  side["in_h"] = ckpt.net.in_h();
  side["in_w"] = ckpt.net.in_w();
  side["config"] = {{"inner_lr", ckpt.config.inner_lr},
                    {"outer_lr", ckpt.config.outer_lr},
                    {"inner_steps", ckpt.config.inner_steps},
                    {"tasks_per_batch", ckpt.config.tasks_per_batch},
                    {"epochs", ckpt.config.epochs},
                    {"way_mode",
                     ckpt.config.way_mode == meta::WayMode::fixed ? "fixed" : "randomized"},
                    {"shots", ckpt.config.shots},
                    {"meta_gradient_mode", meta::mode_name(ckpt.config.meta_gradient_mode)}};
  side["params_hash"] = io::file_hash(dir / "params.bin");
  io::save_json(dir / "checkpoint.json", side);
}

inline MasterCheckpoint load_checkpoint(const fs::path& dir) {
  json side = io::load_json(dir / "checkpoint.json");
  Conv3Detector net(side.at("in_ch"), side.at("in_h"), side.at("in_w"));
  auto items = io::load_named_tensors(dir / "params.bin");
  auto defs = net.param_defs();
  MD_CHECK(items.size() == defs.size(), IngestError, "checkpoint parameter count mismatch");
  ParamList params;
  for (std::size_t i = 0; i < defs.size(); ++i) {
    MD_CHECK(items[i].first == defs[i].name, IngestError,
             "checkpoint parameter order mismatch at " + items[i].first);
    params.push_back(items[i].second);
  }
  MasterCheckpoint ckpt(net, std::move(params));
  const auto& c = side.at("config");
  ckpt.config.inner_lr = c.at("inner_lr");
  ckpt.config.outer_lr = c.at("outer_lr");
  ckpt.config.inner_steps = c.at("inner_steps");
  ckpt.config.tasks_per_batch = c.at("tasks_per_batch");
  ckpt.config.epochs = c.at("epochs");
  ckpt.config.way_mode =
      c.at("way_mode") == "fixed" ? meta::WayMode::fixed : meta::WayMode::randomized;
  ckpt.config.shots = c.at("shots");
  ckpt.config.meta_gradient_mode = meta::mode_from_name(c.at("meta_gradient_mode"));
  ckpt.provenance = side;
  return ckpt;
}

struct TrainMetaOptions {
  std::uint64_t seed = 0;
  // optional per-epoch validation; best-epoch parameters are retained
  const tasks::TaskPool* validation_pool = nullptr;
  evalbench::EvalOptions validation_eval;
  fs::path checkpoint_dir;  // when set, per-epoch checkpoints are written
  bool resume = true;       // continue from the newest epoch checkpoint
  std::function<void(int epoch, std::int64_t iter, real val_f1)> on_epoch;
  std::function<void(std::int64_t iter, std::int64_t total)> on_progress;
};

/// The double-update training loop over a task pool.
inline MasterCheckpoint train_meta(const attacks::AdvExampleSet& set,
                                   const tasks::TaskPool& pool, const meta::MetaConfig& cfg,
                                   const TrainMetaOptions& opt = {}) {
  cfg.validate();
  MD_CHECK(cfg.shots == pool.config.shots, ConfigError,
           "pool was built with different shots than the meta config");
  MD_CHECK((cfg.way_mode == pool.config.way_mode), ConfigError,
           "pool was built with a different way mode");

  Conv3Detector net(set.entries.at(0).images.dim(1), set.entries.at(0).images.dim(2),
                    set.entries.at(0).images.dim(3));
  Rng init_rng = stage_rng(opt.seed, "train-meta:init");
  ParamList master = net.init(init_rng);

  const std::int64_t pool_size = static_cast<std::int64_t>(pool.tasks.size());
  const std::int64_t k = cfg.tasks_per_batch;
  const std::int64_t total_iters =
      (static_cast<std::int64_t>(cfg.epochs) * pool_size + k - 1) / k;
  Rng batch_rng = stage_rng(opt.seed, kMinibatchStream);

  MasterCheckpoint best(net, clone_params(master));
  best.config = cfg;
  real best_f1 = -1;
  json val_history = json::array();
  int epoch = 0;
  std::int64_t start_iter = 1;

  // resume from the newest per-epoch checkpoint: restore the master and the
  // validation bookkeeping, then replay the minibatch rng stream so the
  // continued run is bitwise-identical to an uninterrupted one
  if (opt.resume && !opt.checkpoint_dir.empty()) {
    int newest = 0;
    for (int e = 1; e <= cfg.epochs; ++e)
      if (fs::exists(opt.checkpoint_dir / ("epoch_" + std::to_string(e)) / "checkpoint.json"))
        newest = e;
    if (newest > 0 && newest < cfg.epochs) {
      auto snap = load_checkpoint(opt.checkpoint_dir / ("epoch_" + std::to_string(newest)));
      master = clone_params(snap.params);
      epoch = newest;
      val_history = snap.provenance.value("validation_history", json::array());
      best_f1 = snap.provenance.value("best_f1", real{-1});
      if (snap.provenance.contains("best_epoch") &&
          fs::exists(opt.checkpoint_dir /
                     ("epoch_" + std::to_string(int(snap.provenance.at("best_epoch")))) /
                     "checkpoint.json")) {
        auto bsnap = load_checkpoint(
            opt.checkpoint_dir /
            ("epoch_" + std::to_string(int(snap.provenance.at("best_epoch")))));
        best.params = clone_params(bsnap.params);
        best.provenance["best_epoch"] = snap.provenance.at("best_epoch");
      } else {
        best.params = clone_params(master);
        best.provenance["best_epoch"] = newest;
      }
      // iterations already consumed: everything up to and including the one
      // that closed epoch `newest` (the first iter with iter*k >= epoch*pool)
      while (start_iter * k < static_cast<std::int64_t>(epoch) * pool_size) ++start_iter;
      ++start_iter;
      for (std::int64_t it = 1; it < start_iter; ++it)
        (void)tasks::sample_minibatch(
            pool, static_cast<int>(std::min<std::int64_t>(k, pool_size)), batch_rng);
      if (opt.on_progress) opt.on_progress(start_iter - 1, total_iters);
    } else if (newest == cfg.epochs) {
      auto snap = load_checkpoint(opt.checkpoint_dir / ("epoch_" + std::to_string(newest)));
      // fully trained already; fall through with everything replayed
      master = clone_params(snap.params);
      epoch = newest;
      val_history = snap.provenance.value("validation_history", json::array());
      best_f1 = snap.provenance.value("best_f1", real{-1});
      start_iter = total_iters + 1;
      if (snap.provenance.contains("best_epoch")) {
        auto bdir = opt.checkpoint_dir /
                    ("epoch_" + std::to_string(int(snap.provenance.at("best_epoch"))));
        if (fs::exists(bdir / "checkpoint.json"))
          best.params = clone_params(load_checkpoint(bdir).params);
        best.provenance["best_epoch"] = snap.provenance.at("best_epoch");
      }
    }
  }

  for (std::int64_t iter = start_iter; iter <= total_iters; ++iter) {
    auto batch = tasks::sample_minibatch(pool, static_cast<int>(std::min<std::int64_t>(k, pool_size)),
                                         batch_rng);
    std::vector<ParamList> task_grads;
    task_grads.reserve(batch.size());
    for (const auto* task : batch) {
      auto m = tasks::materialize(set, pool, *task);
      auto support_loss = meta::detector_loss(net, m.support);
      auto query_loss = meta::detector_loss(net, m.query);
      // the task-dedicated network starts from a fresh copy of the master
      auto traj = meta::inner_update(master, support_loss, cfg.inner_lr, cfg.inner_steps,
                                     cfg.meta_gradient_mode == meta::MetaMode::second_order);
      task_grads.push_back(
          meta::meta_gradient(traj, support_loss, query_loss, cfg.meta_gradient_mode));
    }
    meta::outer_update(master, task_grads, cfg.outer_lr);
    for (const auto& t : master)
      MD_CHECK(t.all_finite(), TrainError,
               "non-finite master parameters at iteration " + std::to_string(iter));

    if (opt.on_progress) opt.on_progress(iter, total_iters);

    const bool epoch_end = iter * k >= static_cast<std::int64_t>(epoch + 1) * pool_size ||
                           iter == total_iters;
    if (!epoch_end) continue;
    ++epoch;
    real val_f1 = -1;
    if (opt.validation_pool) {
      auto report =
          evalbench::evaluate(net, master, set, *opt.validation_pool, opt.validation_eval);
      val_f1 = report.mean_f1;
      val_history.push_back({{"epoch", epoch}, {"f1", val_f1}});
    }
    if (!opt.validation_pool || val_f1 >= best_f1) {
      best_f1 = val_f1;
      best.params = clone_params(master);
      best.provenance["best_epoch"] = epoch;
    }
    if (!opt.checkpoint_dir.empty()) {
      MasterCheckpoint snap(net, clone_params(master));
      snap.config = cfg;
      snap.provenance = {{"method", "meta"},
                         {"epoch", epoch},
                         {"seed", opt.seed},
                         {"pool_hash", pool.advset_hash},
                         {"validation_f1", val_f1},
                         {"validation_history", val_history},
                         {"best_f1", best_f1},
                         {"best_epoch", best.provenance.value("best_epoch", epoch)}};
      save_checkpoint(opt.checkpoint_dir / ("epoch_" + std::to_string(epoch)), snap);
    }
    if (opt.on_epoch) opt.on_epoch(epoch, iter, val_f1);
  }

  best.provenance["method"] = "meta";
  best.provenance["seed"] = opt.seed;
  best.provenance["pool_hash"] = pool.advset_hash;
  best.provenance["iterations"] = total_iters;
  best.provenance["validation_history"] = val_history;
  best.provenance["epochs"] = epoch;
  return best;
}

// -- conventional baseline -----------------------------------------------------------

struct DnnConfig {
  int epochs = 4;
  std::int64_t batch_size = 128;
  real lr = 0.01;
  real momentum = 0.9;
  std::uint64_t seed = 0;
};

/// Conventional binary detector on (real = 1, adversarial = 0). With
/// balanced=true the adversarial class is down-sampled to the real count.
inline MasterCheckpoint train_dnn(const attacks::AdvExampleSet& set, bool balanced,
                                  const DnnConfig& cfg,
                                  const std::vector<std::string>& adversaries = {}) {
  MD_CHECK(!set.entries.empty(), ConfigError, "advset is empty");
  const auto& shape_entry = set.entries.at(0).images;
  Conv3Detector net(shape_entry.dim(1), shape_entry.dim(2), shape_entry.dim(3));

  // assemble the flat training set from the train split
  std::vector<std::pair<const attacks::AdvEntry*, std::int64_t>> adv_refs, real_refs;
  for (const auto& e : set.entries) {
    if (e.split != data::Split::train) continue;
    const bool is_real = e.adversary == attacks::kRealEntry;
    if (!is_real && !adversaries.empty() &&
        std::find(adversaries.begin(), adversaries.end(), e.adversary) == adversaries.end())
      continue;
    for (std::int64_t i = 0; i < e.images.dim(0); ++i)
      (is_real ? real_refs : adv_refs).emplace_back(&e, i);
  }
  MD_CHECK(!adv_refs.empty() && !real_refs.empty(), ConfigError,
           "dnn training needs both real and adversarial examples");

  Rng rng = stage_rng(cfg.seed, balanced ? "train-dnn-balanced" : "train-dnn");
  if (balanced && adv_refs.size() > real_refs.size()) {
    rng.shuffle(adv_refs);
    adv_refs.resize(real_refs.size());
  }

  struct Ref {
    const attacks::AdvEntry* e;
    std::int64_t i;
    int label;
  };
  std::vector<Ref> refs;
  refs.reserve(adv_refs.size() + real_refs.size());
  for (auto& [e, i] : adv_refs) refs.push_back({e, i, 0});
  for (auto& [e, i] : real_refs) refs.push_back({e, i, 1});

  Rng init_rng = stage_rng(cfg.seed, "train-dnn:init");
  ParamList params = net.init(init_rng);
  nn::MomentumSgd opt{cfg.lr, cfg.momentum, {}};
  const std::int64_t stride = shape_entry.dim(1) * shape_entry.dim(2) * shape_entry.dim(3);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(refs);
    for (std::size_t at = 0; at < refs.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t bn = std::min(static_cast<std::size_t>(cfg.batch_size), refs.size() - at);
      if (bn < 2) continue;  // batch statistics need at least two samples
      Tensor batch({static_cast<std::int64_t>(bn), shape_entry.dim(1), shape_entry.dim(2),
                    shape_entry.dim(3)});
      std::vector<int> labels(bn);
      for (std::size_t j = 0; j < bn; ++j) {
        const Ref& r = refs[at + j];
        std::copy(r.e->images.data() + r.i * stride, r.e->images.data() + (r.i + 1) * stride,
                  batch.data() + static_cast<std::int64_t>(j) * stride);
        labels[j] = r.label;
      }
      auto leaves = nn::as_leaves(params);
      ag::Var loss = nn::cross_entropy(net.forward(leaves, ag::Var::constant(batch)), labels);
      MD_CHECK(std::isfinite(loss.value().item()), TrainError,
               "dnn training diverged at epoch " + std::to_string(epoch));
      auto grads = ag::grad(loss, leaves);
      opt.step(params, grads);
    }
  }

  MasterCheckpoint ckpt(net, std::move(params));
  ckpt.provenance = {{"method", balanced ? "dnn_balanced" : "dnn"},
                     {"seed", cfg.seed},
                     {"epochs", cfg.epochs},
                     {"advset_hash", set.manifest_hash()},
                     {"train_adversarial", adv_refs.size()},
                     {"train_real", real_refs.size()}};
  return ckpt;
}

}  // namespace metadet::train
