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

#include "metadet/advset.hpp"
#include "metadet/meta.hpp"

// Episodes: each task pairs one way of real examples with one way of
// adversarial examples that share a single (adversary, image class) slice.
// Tasks store indices into the adversarial example set, never pixels; a pool
// of tasks serializes to a JSON header plus a fixed-width binary index table.

namespace metadet::tasks {

namespace fs = std::filesystem;
using io::json;

struct TaskConfig {
  int ways = 2;
  int shots = 1;
  int train_query_size = 70;
  int test_query_size = 30;
  meta::WayMode way_mode = meta::WayMode::fixed;
  std::int64_t total_tasks = 20000;
  std::uint64_t seed = 0;

  void validate() const {
    MD_CHECK(ways == 2, ConfigError, "the detector is strictly two-way");
    MD_CHECK(shots >= 1, ConfigError, "shots must be >= 1");
    MD_CHECK(train_query_size >= 2 && train_query_size % 2 == 0, ConfigError,
             "train query size must be even (split across the two ways)");
    MD_CHECK(test_query_size >= 2 && test_query_size % 2 == 0, ConfigError,
             "test query size must be even (split across the two ways)");
    MD_CHECK(total_tasks >= 1, ConfigError, "total_tasks must be >= 1");
  }

  json to_json() const {
    return {{"ways", ways},
            {"shots", shots},
            {"train_query_size", train_query_size},
            {"test_query_size", test_query_size},
            {"way_mode", way_mode == meta::WayMode::fixed ? "fixed" : "randomized"},
            {"total_tasks", total_tasks},
            {"seed", seed}};
  }

  static TaskConfig from_json(const json& j) {
    TaskConfig c;
    c.ways = j.at("ways");
    c.shots = j.at("shots");
    c.train_query_size = j.at("train_query_size");
    c.test_query_size = j.at("test_query_size");
    c.way_mode = j.at("way_mode") == "fixed" ? meta::WayMode::fixed : meta::WayMode::randomized;
    c.total_tasks = j.at("total_tasks");
    c.seed = j.at("seed");
    c.validate();
    return c;
  }
};

struct Task {
  std::int32_t adversary_id = 0;  // index into TaskPool::adversaries
  int image_class = 0;
  int real_way_label = 1;  // fixed mode: real == 1, adversarial == 0
  std::vector<std::int64_t> adv_support, real_support, adv_query, real_query;
};

struct TaskPool {
  TaskConfig config;
  data::Split split = data::Split::train;
  int query_size = 70;
  std::vector<std::string> adversaries;  // id -> entry name
  std::string advset_hash;
  std::vector<Task> tasks;

  const std::string& adversary_of(const Task& t) const {
    return adversaries.at(static_cast<std::size_t>(t.adversary_id));
  }
};

namespace detail {

struct SliceIndex {
  // adversary id -> class -> indices into that adversary's entry
  std::vector<std::map<int, std::vector<std::int64_t>>> by_adversary;
  std::map<int, std::vector<std::int64_t>> real;
};

inline std::map<int, std::vector<std::int64_t>> partition_entry(const attacks::AdvEntry& e) {
  std::map<int, std::vector<std::int64_t>> out;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(e.original_class.size()); ++i)
    out[e.original_class[static_cast<std::size_t>(i)]].push_back(i);
  return out;
}

}  // namespace detail

/// One sampled episode. Support and query are drawn without replacement from
/// the same (adversary, class) slice; the real way uses the same image class.
inline Task sample_task(const attacks::AdvExampleSet& set, const TaskPool& pool, Rng& rng,
                        const detail::SliceIndex& slices) {
  const int need = pool.config.shots + pool.query_size / 2;

  // adversaries that own at least one class slice deep enough on both ways
  std::vector<std::int32_t> ok_advs;
  std::vector<std::vector<int>> ok_classes(pool.adversaries.size());
  for (std::size_t a = 0; a < pool.adversaries.size(); ++a) {
    for (const auto& [cls, idx] : slices.by_adversary[a]) {
      auto real_it = slices.real.find(cls);
      if (static_cast<int>(idx.size()) >= need && real_it != slices.real.end() &&
          static_cast<int>(real_it->second.size()) >= need)
        ok_classes[a].push_back(cls);
    }
    if (!ok_classes[a].empty()) ok_advs.push_back(static_cast<std::int32_t>(a));
  }
  MD_CHECK(!ok_advs.empty(), PoolError,
           "no (adversary, class) slice holds shots + query/2 = " + std::to_string(need) +
               " samples (pool over " + data::split_name(pool.split) + " split, query size " +
               std::to_string(pool.query_size) + ")");

  Task t;
  t.adversary_id = ok_advs[rng.below(ok_advs.size())];
  const auto& classes = ok_classes[static_cast<std::size_t>(t.adversary_id)];
  t.image_class = classes[rng.below(classes.size())];
  t.real_way_label = pool.config.way_mode == meta::WayMode::fixed ? 1 : (rng.coin() ? 1 : 0);

  const auto& adv_slice =
      slices.by_adversary[static_cast<std::size_t>(t.adversary_id)].at(t.image_class);
  const auto& real_slice = slices.real.at(t.image_class);
  auto pick = [&](const std::vector<std::int64_t>& slice, std::vector<std::int64_t>& support,
                  std::vector<std::int64_t>& query) {
    auto chosen = rng.sample_without_replacement(static_cast<std::int64_t>(slice.size()), need);
    for (int i = 0; i < pool.config.shots; ++i)
      support.push_back(slice[static_cast<std::size_t>(chosen[static_cast<std::size_t>(i)])]);
    for (int i = pool.config.shots; i < need; ++i)
      query.push_back(slice[static_cast<std::size_t>(chosen[static_cast<std::size_t>(i)])]);
  };
  pick(adv_slice, t.adv_support, t.adv_query);
  pick(real_slice, t.real_support, t.real_query);
  return t;
}

struct PoolSpec {
  data::Split split = data::Split::train;
  std::int64_t n_tasks = 0;                // 0 -> config.total_tasks
  std::vector<std::string> adversaries;    // empty -> all non-real entries of the split
  std::string name = "train";              // seeds the pool's rng stream
  bool use_test_query_size = false;
};

/// Builds a pool of episodes. Every admissible adversary is guaranteed to
/// appear at least once (under-sampled ones take over uniformly chosen slots).
inline TaskPool build_task_pool(const attacks::AdvExampleSet& set, const TaskConfig& config,
                                const PoolSpec& spec) {
  config.validate();
  TaskPool pool;
  pool.config = config;
  pool.split = spec.split;
  pool.query_size = spec.use_test_query_size ? config.test_query_size : config.train_query_size;
  pool.advset_hash = set.manifest_hash();
  pool.adversaries =
      spec.adversaries.empty() ? set.adversary_names(spec.split) : spec.adversaries;
  MD_CHECK(!pool.adversaries.empty(), PoolError, "advset has no adversarial entries for split");

  detail::SliceIndex slices;
  slices.by_adversary.resize(pool.adversaries.size());
  for (std::size_t a = 0; a < pool.adversaries.size(); ++a) {
    const auto* e = set.find(pool.adversaries[a], spec.split);
    MD_CHECK(e != nullptr, PoolError,
             "adversary " + pool.adversaries[a] + " missing from advset split");
    slices.by_adversary[a] = detail::partition_entry(*e);
  }
  const auto* real_entry = set.find(attacks::kRealEntry, spec.split);
  MD_CHECK(real_entry != nullptr, PoolError, "advset has no real entry for split");
  slices.real = detail::partition_entry(*real_entry);

  const std::int64_t n = spec.n_tasks > 0 ? spec.n_tasks : config.total_tasks;
  Rng rng = stage_rng(config.seed, "pool:" + spec.name);
  pool.tasks.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) pool.tasks.push_back(sample_task(set, pool, rng, slices));

  // coverage fix-up: any admissible adversary that never came up takes over a
  // uniformly chosen slot (rare for realistic pool sizes)
  std::vector<bool> seen(pool.adversaries.size(), false);
  for (const auto& t : pool.tasks) seen[static_cast<std::size_t>(t.adversary_id)] = true;
  for (std::size_t a = 0; a < pool.adversaries.size(); ++a) {
    if (seen[a]) continue;
    for (std::int64_t attempt = 0; attempt < 64 && !seen[a]; ++attempt) {
      Task t = sample_task(set, pool, rng, slices);
      if (t.adversary_id == static_cast<std::int32_t>(a)) {
        pool.tasks[rng.below(static_cast<std::uint64_t>(n))] = t;
        seen[a] = true;
      }
    }
  }
  return pool;
}

/// K distinct tasks, uniform without replacement within the batch.
inline std::vector<const Task*> sample_minibatch(const TaskPool& pool, int k, Rng& rng) {
  MD_CONTRACT(k >= 1 && static_cast<std::size_t>(k) <= pool.tasks.size(),
              "sample_minibatch: K exceeds pool size");
  auto idx = rng.sample_without_replacement(static_cast<std::int64_t>(pool.tasks.size()), k);
  std::vector<const Task*> out;
  out.reserve(static_cast<std::size_t>(k));
  for (auto i : idx) out.push_back(&pool.tasks[static_cast<std::size_t>(i)]);
  return out;
}

struct MaterializedTask {
  meta::LabeledBatch support;
  meta::LabeledBatch query;
  std::string adversary;
  int real_way_label = 1;
};

/// Gathers pixels for one task: adversarial way first, then the real way.
inline MaterializedTask materialize(const attacks::AdvExampleSet& set, const TaskPool& pool,
                                    const Task& t) {
  const auto* adv = set.find(pool.adversary_of(t), pool.split);
  const auto* real = set.find(attacks::kRealEntry, pool.split);
  MD_CHECK(adv && real, PoolError, "task references entries missing from the advset");
  const int adv_label = 1 - t.real_way_label;

  MaterializedTask m;
  m.adversary = pool.adversary_of(t);
  m.real_way_label = t.real_way_label;

  auto fill = [&](const std::vector<std::int64_t>& adv_idx,
                  const std::vector<std::int64_t>& real_idx) {
    meta::LabeledBatch b;
    Tensor adv_imgs = victims::VictimClassifier::gather_images(adv->images, adv_idx);
    Tensor real_imgs = victims::VictimClassifier::gather_images(real->images, real_idx);
    const auto& s = adv_imgs.shape();
    b.images = Tensor({s[0] + real_imgs.dim(0), s[1], s[2], s[3]});
    std::copy(adv_imgs.data(), adv_imgs.data() + adv_imgs.numel(), b.images.data());
    std::copy(real_imgs.data(), real_imgs.data() + real_imgs.numel(),
              b.images.data() + adv_imgs.numel());
    b.labels.assign(adv_idx.size(), adv_label);
    b.labels.insert(b.labels.end(), real_idx.size(), t.real_way_label);
    return b;
  };
  m.support = fill(t.adv_support, t.real_support);
  m.query = fill(t.adv_query, t.real_query);
  return m;
}

// -- pool persistence: JSON header + binary index table --------------------------

constexpr char kPoolMagic[8] = {'M', 'D', 'P', 'O', 'O', 'L', '1', '\n'};

inline void save_pool(const fs::path& path, const TaskPool& pool) {
  json header = {{"config", pool.config.to_json()},
                 {"split", data::split_name(pool.split)},
                 {"query_size", pool.query_size},
                 {"adversaries", pool.adversaries},
                 {"advset_hash", pool.advset_hash},
                 {"n_tasks", pool.tasks.size()}};
  const std::string hs = header.dump();
  std::vector<unsigned char> buf;
  buf.insert(buf.end(), kPoolMagic, kPoolMagic + 8);
  io::put<std::uint32_t>(buf, static_cast<std::uint32_t>(hs.size()));
  buf.insert(buf.end(), hs.begin(), hs.end());
  for (const auto& t : pool.tasks) {
    io::put<std::int32_t>(buf, t.adversary_id);
    io::put<std::int32_t>(buf, t.image_class);
    io::put<std::int32_t>(buf, t.real_way_label);
    auto put_vec = [&](const std::vector<std::int64_t>& v) {
      for (auto i : v) io::put<std::uint32_t>(buf, static_cast<std::uint32_t>(i));
    };
    put_vec(t.adv_support);
    put_vec(t.real_support);
    put_vec(t.adv_query);
    put_vec(t.real_query);
  }
  io::write_bytes(path, buf.data(), buf.size());
}

inline TaskPool load_pool(const fs::path& path) {
  auto buf = io::read_bytes(path);
  MD_CHECK(buf.size() >= 12 && std::memcmp(buf.data(), kPoolMagic, 8) == 0, IngestError,
           "bad pool magic in " + path.string());
  std::size_t off = 8;
  const auto hlen = io::take<std::uint32_t>(buf, off);
  MD_CHECK(off + hlen <= buf.size(), IngestError, "truncated pool header");
  json header = json::parse(buf.begin() + static_cast<std::ptrdiff_t>(off),
                            buf.begin() + static_cast<std::ptrdiff_t>(off + hlen));
  off += hlen;

  TaskPool pool;
  pool.config = TaskConfig::from_json(header.at("config"));
  pool.split = header.at("split") == "train" ? data::Split::train : data::Split::test;
  pool.query_size = header.at("query_size");
  pool.adversaries = header.at("adversaries").get<std::vector<std::string>>();
  pool.advset_hash = header.at("advset_hash");
  const std::int64_t n = header.at("n_tasks");
  const int qh = pool.query_size / 2;
  pool.tasks.reserve(static_cast<std::size_t>(n));
  for (std::int64_t k = 0; k < n; ++k) {
    Task t;
    t.adversary_id = io::take<std::int32_t>(buf, off);
    t.image_class = io::take<std::int32_t>(buf, off);
    t.real_way_label = io::take<std::int32_t>(buf, off);
    auto take_vec = [&](std::vector<std::int64_t>& v, int count) {
      v.reserve(static_cast<std::size_t>(count));
      for (int i = 0; i < count; ++i) v.push_back(io::take<std::uint32_t>(buf, off));
    };
    take_vec(t.adv_support, pool.config.shots);
    take_vec(t.real_support, pool.config.shots);
    take_vec(t.adv_query, qh);
    take_vec(t.real_query, qh);
    pool.tasks.push_back(std::move(t));
  }
  return pool;
}

}  // namespace metadet::tasks
