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

#include <optional>

#include "metadet/datasets.hpp"
#include "metadet/models.hpp"
#include "metadet/nn.hpp"

// Victim classifiers: the networks the adversaries attack. Victims only need
// to be competent targets; training is plain cross-entropy with momentum SGD
// under a fixed seed, and the resulting accuracy is recorded in the
// checkpoint rather than asserted against any external number.

namespace metadet::victims {

namespace fs = std::filesystem;
using io::json;

struct VictimConfig {
  int epochs = 5;
  std::int64_t batch_size = 128;
  real lr = 0.05;
  real momentum = 0.9;
  std::uint64_t seed = 0;
  std::int64_t max_train_images = 0;  // 0 = use the full split
};

class VictimClassifier {
 public:
  VictimClassifier(VictimArch arch, data::Domain domain)
      : net_(arch, data::domain_shape(domain).channels, data::domain_shape(domain).height,
             data::domain_shape(domain).width),
        domain_(domain),
        bn_(net_.fresh_bn()) {
    Rng rng = stage_rng(0, "victim-init:" + arch_name(arch) + ":" + data::domain_name(domain));
    params_ = net_.init(rng);
    meta_ = {{"arch", arch_name(arch)},
             {"domain", data::domain_name(domain)},
             {"seed", 0},
             {"epochs", 0},
             {"test_accuracy", 0.0}};
  }

  const VictimNet& net() const { return net_; }
  data::Domain domain() const { return domain_; }
  VictimArch arch() const { return net_.arch(); }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }
  BnState& bn() { return bn_; }
  const BnState& bn() const { return bn_; }
  json& meta() { return meta_; }
  const json& meta() const { return meta_; }

  /// Inference-mode logits for a pixel batch in [0,1].
  Tensor classify(const Tensor& images) const {
    check_input(images);
    BnState frozen = bn_;  // shallow; inference never mutates it
    return net_.logits_values(params_, images, frozen);
  }

  std::vector<int> predict(const Tensor& images) const {
    return nn::argmax_rows(classify(images));
  }

  /// Differentiable inference-mode graph (used by gradient-based attacks).
  ag::Var logits_graph(const ag::Var& images) const {
    BnState frozen = bn_;
    return net_.forward(nn::as_leaves(params_), images, /*train_mode=*/false, frozen);
  }

  real accuracy(const data::ImageDataset& ds, std::int64_t batch = 256) const {
    std::int64_t correct = 0;
    for (std::int64_t at = 0; at < ds.size(); at += batch) {
      const std::int64_t n = std::min(batch, ds.size() - at);
      Tensor chunk = slice_images(ds.images, at, n);
      auto pred = predict(chunk);
      for (std::int64_t i = 0; i < n; ++i)
        if (pred[static_cast<std::size_t>(i)] == ds.labels[static_cast<std::size_t>(at + i)])
          ++correct;
    }
    return ds.size() ? static_cast<real>(correct) / static_cast<real>(ds.size()) : 0;
  }

  static Tensor slice_images(const Tensor& images, std::int64_t at, std::int64_t n) {
    const auto& s = images.shape();
    const std::int64_t stride = s[1] * s[2] * s[3];
    Tensor out({n, s[1], s[2], s[3]});
    std::copy(images.data() + at * stride, images.data() + (at + n) * stride, out.data());
    return out;
  }

  static Tensor gather_images(const Tensor& images, const std::vector<std::int64_t>& idx) {
    const auto& s = images.shape();
    const std::int64_t stride = s[1] * s[2] * s[3];
    Tensor out({static_cast<std::int64_t>(idx.size()), s[1], s[2], s[3]});
    for (std::size_t k = 0; k < idx.size(); ++k)
      std::copy(images.data() + idx[k] * stride, images.data() + (idx[k] + 1) * stride,
                out.data() + static_cast<std::int64_t>(k) * stride);
    return out;
  }

 private:
  void check_input(const Tensor& images) const {
    const auto& s = images.shape();
    MD_CONTRACT(s.size() == 4 && s[1] == net_.in_ch() && s[2] == net_.in_h() &&
                    s[3] == net_.in_w(),
                "victim input shape mismatch: got " + shape_str(images.shape()));
  }

  VictimNet net_;
  data::Domain domain_;
  ParamList params_;
  BnState bn_;
  json meta_;
};

inline VictimClassifier build_victim(VictimArch arch, data::Domain domain) {
  return VictimClassifier(arch, domain);
}

/// Cross-entropy training with momentum SGD; deterministic under `seed`.
inline void train_victim(VictimClassifier& victim, const data::ImageDataset& train_set,
                         const VictimConfig& cfg,
                         const data::ImageDataset* test_set = nullptr) {
  MD_CHECK(train_set.domain == victim.domain(), ConfigError,
           "train split domain does not match victim");
  Rng rng = stage_rng(cfg.seed, "victim-train:" + arch_name(victim.arch()) + ":" +
                                    data::domain_name(victim.domain()));
  victim.params() = nn::init_params(victim.net().param_defs(), rng);
  victim.bn() = victim.net().fresh_bn();

  std::vector<std::int64_t> order(static_cast<std::size_t>(train_set.size()));
  for (std::int64_t i = 0; i < train_set.size(); ++i) order[static_cast<std::size_t>(i)] = i;
  if (cfg.max_train_images > 0 && cfg.max_train_images < train_set.size()) {
    rng.shuffle(order);
    order.resize(static_cast<std::size_t>(cfg.max_train_images));
  }

  nn::MomentumSgd opt{cfg.lr, cfg.momentum, {}};
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t n = std::min(static_cast<std::size_t>(cfg.batch_size),
                                     order.size() - at);
      std::vector<std::int64_t> idx(order.begin() + static_cast<std::ptrdiff_t>(at),
                                    order.begin() + static_cast<std::ptrdiff_t>(at + n));
      Tensor batch = VictimClassifier::gather_images(train_set.images, idx);
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (auto i : idx) labels.push_back(train_set.labels[static_cast<std::size_t>(i)]);

      auto leaves = nn::as_leaves(victim.params());
      ag::Var logits =
          victim.net().forward(leaves, ag::Var::constant(batch), /*train_mode=*/true,
                               victim.bn());
      ag::Var loss = nn::cross_entropy(logits, labels);
      MD_CHECK(std::isfinite(loss.value().item()), TrainError,
               "victim training diverged at epoch " + std::to_string(epoch));
      auto grads = ag::grad(loss, leaves);
      opt.step(victim.params(), grads);
    }
  }

  victim.meta()["seed"] = cfg.seed;
  victim.meta()["epochs"] = cfg.epochs;
  victim.meta()["train_images"] = static_cast<std::int64_t>(order.size());
  if (test_set) victim.meta()["test_accuracy"] = victim.accuracy(*test_set);
}

// -- checkpointing -------------------------------------------------------------

inline void save_victim(const fs::path& dir, const VictimClassifier& victim) {
  fs::create_directories(dir);
  std::vector<std::pair<std::string, Tensor>> items;
  const auto& defs = victim.net().param_defs();
  for (std::size_t i = 0; i < defs.size(); ++i) items.emplace_back(defs[i].name, victim.params()[i]);
  for (std::size_t i = 0; i < victim.bn().mean.size(); ++i) {
    items.emplace_back("running_mean." + std::to_string(i), victim.bn().mean[i]);
    items.emplace_back("running_var." + std::to_string(i), victim.bn().var[i]);
  }
  io::save_named_tensors(dir / "params.bin", items);
  json side = victim.meta();
  side["params_hash"] = io::file_hash(dir / "params.bin");
  io::save_json(dir / "victim.json", side);
}

inline VictimClassifier load_victim(const fs::path& dir) {
  json side = io::load_json(dir / "victim.json");
  VictimClassifier victim(arch_from_name(side.at("arch")),
                          data::domain_from_name(side.at("domain")));
  auto items = io::load_named_tensors(dir / "params.bin");
  std::size_t cursor = 0;
  const auto& defs = victim.net().param_defs();
  MD_CHECK(items.size() >= defs.size(), IngestError, "victim checkpoint truncated");
  for (std::size_t i = 0; i < defs.size(); ++i, ++cursor) {
    MD_CHECK(items[cursor].first == defs[i].name, IngestError,
             "victim checkpoint parameter order mismatch at " + items[cursor].first);
    victim.params()[i] = items[cursor].second;
  }
  for (std::size_t i = 0; i < victim.bn().mean.size(); ++i) {
    victim.bn().mean[i] = items.at(cursor++).second;
    victim.bn().var[i] = items.at(cursor++).second;
  }
  victim.meta() = side;
  return victim;
}

inline std::string victim_hash(const fs::path& dir) {
  return io::file_hash(dir / "params.bin");
}

}  // namespace metadet::victims
