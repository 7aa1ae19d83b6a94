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

#include "metadet/victims.hpp"

using namespace metadet;
namespace fs = std::filesystem;

namespace {

const fs::path& fixture_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "metadet_test_victims";
    fs::remove_all(p);
    data::synthesize_domain_files(data::Domain::MNIST, p, {1600, 320, 5});
    return p;
  }();
  return root;
}

const data::ImageDataset& train_set() {
  static auto ds = data::load_split(data::Domain::MNIST, data::Split::train, fixture_root());
  return ds;
}
const data::ImageDataset& test_set() {
  static auto ds = data::load_split(data::Domain::MNIST, data::Split::test, fixture_root());
  return ds;
}

const victims::VictimClassifier& trained_victim() {
  static auto v = [] {
    auto victim = victims::build_victim(VictimArch::conv4, data::Domain::MNIST);
    victims::VictimConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 64;
    cfg.seed = 11;
    victims::train_victim(victim, train_set(), cfg, &test_set());
    return victim;
  }();
  return v;
}

}  // namespace

TEST_CASE("untrained victims produce finite 10-way logits") {
  auto v = victims::build_victim(VictimArch::conv4, data::Domain::MNIST);
  Rng rng(1);
  Tensor x = Tensor::rand_uniform({8, 1, 28, 28}, rng, 0, 1);
  Tensor logits = v.classify(x);
  REQUIRE(logits.shape() == Shape{8, 10});
  REQUIRE(logits.all_finite());

  auto r10 = victims::build_victim(VictimArch::resnet10, data::Domain::CIFAR10);
  Tensor xc = Tensor::rand_uniform({4, 3, 32, 32}, rng, 0, 1);
  REQUIRE(r10.classify(xc).shape() == Shape{4, 10});
}

TEST_CASE("untrained victim sits at chance accuracy") {
  auto v = victims::build_victim(VictimArch::conv4, data::Domain::MNIST);
  const real acc = v.accuracy(test_set());
  REQUIRE(acc == Approx(0.10).margin(0.05));
}

TEST_CASE("wrong input shape raises a contract error") {
  auto v = victims::build_victim(VictimArch::conv4, data::Domain::MNIST);
  REQUIRE_THROWS_AS(v.classify(Tensor::zeros({2, 3, 32, 32})), ContractError);
}

TEST_CASE("training reaches high accuracy on the stand-in corpus") {
  const auto& v = trained_victim();
  const real acc = v.meta().at("test_accuracy");
  INFO("test accuracy " << acc);
  REQUIRE(acc >= 0.9);
}

TEST_CASE("victim training is deterministic under a fixed seed") {
  auto a = victims::build_victim(VictimArch::conv4, data::Domain::MNIST);
  auto b = victims::build_victim(VictimArch::conv4, data::Domain::MNIST);
  victims::VictimConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 64;
  cfg.seed = 3;
  cfg.max_train_images = 320;
  victims::train_victim(a, train_set(), cfg);
  victims::train_victim(b, train_set(), cfg);
  REQUIRE(params_bitwise_equal(a.params(), b.params()));
}

TEST_CASE("non-finite loss aborts training with the epoch index") {
  // an lr at the double-overflow edge drives the fc weights (which have no
  // normalization behind them) to inf, making the logit shift inf - inf
  auto v = victims::build_victim(VictimArch::conv4, data::Domain::MNIST);
  victims::VictimConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 64;
  cfg.lr = 1e308;
  cfg.max_train_images = 256;
  bool threw = false;
  try {
    victims::train_victim(v, train_set(), cfg);
  } catch (const TrainError& e) {
    threw = true;
    REQUIRE(std::string(e.what()).find("epoch") != std::string::npos);
  }
  REQUIRE(threw);
}

TEST_CASE("checkpoints round-trip to identical logits") {
  const auto& v = trained_victim();
  const fs::path dir = fixture_root() / "ckpt";
  victims::save_victim(dir, v);
  auto loaded = victims::load_victim(dir);

  Rng rng(9);
  Tensor probe = Tensor::rand_uniform({6, 1, 28, 28}, rng, 0, 1);
  REQUIRE(bitwise_equal(v.classify(probe), loaded.classify(probe)));

  // recorded accuracy is reproducible from the reloaded checkpoint
  const real recomputed = loaded.accuracy(test_set());
  REQUIRE(recomputed == Approx(real(v.meta().at("test_accuracy"))).margin(1e-12));
}

TEST_CASE("classify is deterministic over repeated calls") {
  const auto& v = trained_victim();
  Rng rng(13);
  Tensor probe = Tensor::rand_uniform({5, 1, 28, 28}, rng, 0, 1);
  REQUIRE(bitwise_equal(v.classify(probe), v.classify(probe)));
}
