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

#include <chrono>

#include "metadet/attacks.hpp"

// The adversarial example dataset: for one (domain, victim architecture),
// per-adversary train/test entries holding only the images that actually fool
// the victim, plus a "real" entry of untouched images. Persisted as raw
// float32 tensor files plus a JSON manifest.

namespace metadet::attacks {

constexpr const char* kRealEntry = "real";

struct AdvEntry {
  std::string adversary;
  data::Split split;
  Tensor images;  // [n,C,H,W]
  std::vector<int> original_class;
};

struct AdvExampleSet {
  data::Domain domain = data::Domain::MNIST;
  VictimArch victim_arch = VictimArch::conv4;
  std::vector<AdvEntry> entries;
  json manifest;

  const AdvEntry* find(const std::string& name, data::Split split) const {
    for (const auto& e : entries)
      if (e.adversary == name && e.split == split) return &e;
    return nullptr;
  }

  std::vector<std::string> adversary_names(data::Split split, bool include_real = false) const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (e.split == split && (include_real || e.adversary != kRealEntry))
        out.push_back(e.adversary);
    return out;
  }

  std::string manifest_hash() const { return io::json_hash(manifest); }
};

// -- adversary registry (pluggable) -----------------------------------------------

struct AttackOutput {
  Tensor images;
};

using AttackFn = std::function<AttackOutput(const Classifier&, const Tensor&,
                                            const std::vector<int>&, const AttackBudget&)>;

inline std::map<std::string, AttackFn>& attack_registry() {
  static std::map<std::string, AttackFn> reg = {
      {"FGSM",
       [](const Classifier& c, const Tensor& x, const std::vector<int>& y,
          const AttackBudget& b) { return AttackOutput{fgsm(c, x, y, b.epsilon)}; }},
      {"BIM",
       [](const Classifier& c, const Tensor& x, const std::vector<int>& y,
          const AttackBudget& b) { return AttackOutput{iterative_linf(LinfVariant::BIM, c, x, y, b)}; }},
      {"PGD",
       [](const Classifier& c, const Tensor& x, const std::vector<int>& y,
          const AttackBudget& b) { return AttackOutput{iterative_linf(LinfVariant::PGD, c, x, y, b)}; }},
      {"MI-FGSM",
       [](const Classifier& c, const Tensor& x, const std::vector<int>& y,
          const AttackBudget& b) {
         return AttackOutput{iterative_linf(LinfVariant::MIFGSM, c, x, y, b)};
       }},
      {"CW",
       [](const Classifier& c, const Tensor& x, const std::vector<int>& y,
          const AttackBudget& b) { return AttackOutput{cw_l2(c, x, y, b).images}; }},
      {"DeepFool",
       [](const Classifier& c, const Tensor& x, const std::vector<int>& y,
          const AttackBudget& b) { return AttackOutput{deepfool(c, x, y, b).images}; }},
      {"semantic",
       [](const Classifier&, const Tensor& x, const std::vector<int>&, const AttackBudget&) {
         return AttackOutput{semantic_attack(x)};
       }},
      {"spatial",
       [](const Classifier& c, const Tensor& x, const std::vector<int>& y, const AttackBudget&) {
         return AttackOutput{spatial_attack(c, x, y, SpatialGrid{})};
       }},
  };
  return reg;
}

/// Third-party adversaries plug in under a fresh name.
inline void register_attack(const std::string& name, AttackFn fn) {
  MD_CHECK(name != kRealEntry, ConfigError, "adversary name 'real' is reserved");
  attack_registry()[name] = std::move(fn);
}

// -- dataset construction -----------------------------------------------------------

struct BuildLimits {
  std::int64_t max_train_images = 0;  // per-adversary source cap, 0 = full split
  std::int64_t max_test_images = 0;
  std::int64_t real_train_images = 0;
  std::int64_t real_test_images = 0;
  std::int64_t shard = 128;
};

using ProgressFn = std::function<void(const std::string&)>;

namespace detail {

/// Deterministic stratified subsample: an equal head of every class list,
/// merged back into file order. cap <= 0 keeps everything.
inline std::vector<std::int64_t> stratified_take(const data::ImageDataset& ds,
                                                 std::int64_t cap) {
  std::vector<std::int64_t> idx;
  if (cap <= 0 || cap >= ds.size()) {
    idx.resize(static_cast<std::size_t>(ds.size()));
    for (std::int64_t i = 0; i < ds.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
    return idx;
  }
  auto part = data::class_partition(ds);
  const std::int64_t classes = static_cast<std::int64_t>(part.size());
  const std::int64_t quota = (cap + classes - 1) / classes;
  for (const auto& [cls, list] : part)
    for (std::int64_t k = 0; k < std::min<std::int64_t>(quota, list.size()); ++k)
      idx.push_back(list[static_cast<std::size_t>(k)]);
  std::sort(idx.begin(), idx.end());
  if (static_cast<std::int64_t>(idx.size()) > cap) idx.resize(static_cast<std::size_t>(cap));
  return idx;
}

}  // namespace detail

/// Runs each adversary over a (capped) slice of each split, keeps only the
/// successful examples, and assembles the set together with its manifest.
inline AdvExampleSet build_adv_dataset(const victims::VictimClassifier& victim,
                                       const data::ImageDataset& train_split,
                                       const data::ImageDataset& test_split,
                                       const std::vector<std::string>& adversaries,
                                       std::map<std::string, AttackBudget> budgets,
                                       const BuildLimits& limits, std::uint64_t seed,
                                       const std::string& victim_hash = "unsaved",
                                       const ProgressFn& progress = {}) {
  MD_CHECK(train_split.domain == victim.domain() && test_split.domain == victim.domain(),
           ConfigError, "split domain does not match victim");
  Classifier clf = wrap_victim(victim);
  AdvExampleSet set;
  set.domain = victim.domain();
  set.victim_arch = victim.arch();

  json adv_meta = json::array();
  auto run_split = [&](const data::ImageDataset& src, data::Split split, std::int64_t cap) {
    auto source_idx = detail::stratified_take(src, cap);
    Tensor source = victims::VictimClassifier::gather_images(src.images, source_idx);
    std::vector<int> labels;
    labels.reserve(source_idx.size());
    for (auto i : source_idx) labels.push_back(src.labels[static_cast<std::size_t>(i)]);

    for (const auto& name : adversaries) {
      auto it = attack_registry().find(name);
      MD_CHECK(it != attack_registry().end(), ConfigError, "unknown adversary: " + name);
      AttackBudget budget =
          budgets.count(name) ? budgets[name] : default_budget_for(name, set.domain);
      budget.seed = seed ^ fnv1a64(name + ":" + data::split_name(split));
      const auto attack_t0 = std::chrono::steady_clock::now();

      const std::int64_t n = source.dim(0);
      const std::int64_t stride = source.dim(1) * source.dim(2) * source.dim(3);
      Tensor produced(source.shape());
      for (std::int64_t at = 0; at < n; at += limits.shard) {
        const std::int64_t k = std::min(limits.shard, n - at);
        Tensor chunk = victims::VictimClassifier::slice_images(source, at, k);
        std::vector<int> chunk_labels(labels.begin() + at, labels.begin() + at + k);
        AttackBudget shard_budget = budget;
        shard_budget.seed = budget.seed + static_cast<std::uint64_t>(at);
        AttackOutput out = it->second(clf, chunk, chunk_labels, shard_budget);
        MD_CHECK(out.images.shape() == chunk.shape(), AttackError,
                 "adversary " + name + " returned a misshaped batch");
        std::copy(out.images.data(), out.images.data() + k * stride,
                  produced.data() + at * stride);
      }

      auto kept = filter_successful(clf, source, produced, labels);
      if (progress) {
        const real secs = std::chrono::duration<real>(std::chrono::steady_clock::now() -
                                                      attack_t0)
                              .count();
        progress(name + "/" + data::split_name(split) + ": " +
                 std::to_string(kept.kept.size()) + "/" + std::to_string(n) +
                 " successful in " + std::to_string(secs) + "s");
      }
      json meta = {{"name", name},
                   {"split", data::split_name(split)},
                   {"source_count", n},
                   {"count", static_cast<std::int64_t>(kept.kept.size())},
                   {"kept_fraction", kept.kept_fraction},
                   {"budget", budget.to_json()},
                   {"seed", budget.seed}};
      if (kept.kept.empty()) {
        meta["warning"] = "zero successful examples; entry omitted";
        adv_meta.push_back(meta);
        continue;
      }
      adv_meta.push_back(meta);

      AdvEntry entry;
      entry.adversary = name;
      entry.split = split;
      entry.images = victims::VictimClassifier::gather_images(produced, kept.kept);
      for (auto i : kept.kept) entry.original_class.push_back(labels[static_cast<std::size_t>(i)]);
      set.entries.push_back(std::move(entry));
    }
  };

  run_split(train_split, data::Split::train, limits.max_train_images);
  run_split(test_split, data::Split::test, limits.max_test_images);

  // untouched real examples, one entry per split
  auto add_real = [&](const data::ImageDataset& src, data::Split split, std::int64_t cap) {
    auto idx = detail::stratified_take(src, cap);
    AdvEntry entry;
    entry.adversary = kRealEntry;
    entry.split = split;
    entry.images = victims::VictimClassifier::gather_images(src.images, idx);
    for (auto i : idx) entry.original_class.push_back(src.labels[static_cast<std::size_t>(i)]);
    adv_meta.push_back({{"name", kRealEntry},
                        {"split", data::split_name(split)},
                        {"count", static_cast<std::int64_t>(idx.size())}});
    set.entries.push_back(std::move(entry));
  };
  add_real(train_split, data::Split::train, limits.real_train_images);
  add_real(test_split, data::Split::test, limits.real_test_images);

  set.manifest = {{"domain", data::domain_name(set.domain)},
                  {"arch", arch_name(set.victim_arch)},
                  {"victim_hash", victim_hash},
                  {"provenance", train_split.provenance},
                  {"seed", seed},
                  {"adversaries", adv_meta}};
  return set;
}

// -- persistence ---------------------------------------------------------------------

inline std::string entry_stem(const AdvEntry& e) {
  return e.adversary + "_" + data::split_name(e.split);
}

inline void save_advset(const fs::path& dir, const AdvExampleSet& set) {
  fs::create_directories(dir);
  json files = json::array();
  for (const auto& e : set.entries) {
    const std::string stem = entry_stem(e);
    io::save_tensor_f32(dir / (stem + ".bin"), e.images);
    io::save_labels(dir / (stem + "_labels.bin"), e.original_class);
    files.push_back({{"adversary", e.adversary},
                     {"split", data::split_name(e.split)},
                     {"images", stem + ".bin"},
                     {"labels", stem + "_labels.bin"},
                     {"count", e.images.dim(0)},
                     {"images_hash", io::file_hash(dir / (stem + ".bin"))}});
  }
  json manifest = set.manifest;
  manifest["files"] = files;
  io::save_json(dir / "manifest.json", manifest);
}

inline AdvExampleSet load_advset(const fs::path& dir) {
  AdvExampleSet set;
  set.manifest = io::load_json(dir / "manifest.json");
  set.domain = data::domain_from_name(set.manifest.at("domain"));
  set.victim_arch = arch_from_name(set.manifest.at("arch"));
  for (const auto& f : set.manifest.at("files")) {
    AdvEntry e;
    e.adversary = f.at("adversary");
    e.split = f.at("split") == "train" ? data::Split::train : data::Split::test;
    e.images = io::load_tensor_f32(dir / std::string(f.at("images")));
    e.original_class = io::load_labels(dir / std::string(f.at("labels")));
    MD_CHECK(e.images.dim(0) == static_cast<std::int64_t>(e.original_class.size()), IngestError,
             "advset entry misaligned: " + e.adversary);
    set.entries.push_back(std::move(e));
  }
  return set;
}

}  // namespace metadet::attacks
