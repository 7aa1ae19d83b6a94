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

#include "finite_diff.hpp"
#include "metadet/meta.hpp"

using namespace metadet;
using ag::Var;

TEST_CASE("conv-3 shape arithmetic follows the pad-0 / pool-2 schedule") {
  Conv3Detector mnist(1, 28, 28);
  REQUIRE(mnist.feature_dim() == 64);  // 28 -> 26 -> 13 -> 11 -> 5 -> 3 -> 1
  Conv3Detector cifar(3, 32, 32);
  REQUIRE(cifar.feature_dim() == 64 * 2 * 2);  // 32 -> ... -> 2

  Rng rng(1);
  ParamList p = mnist.init(rng);
  Tensor x = Tensor::rand_uniform({5, 1, 28, 28}, rng, 0, 1);
  Tensor logits = mnist.logits_values(p, x);
  REQUIRE(logits.shape() == Shape{5, 2});
  REQUIRE(logits.all_finite());

  ParamList pc = cifar.init(rng);
  Tensor xc = Tensor::rand_uniform({3, 3, 32, 32}, rng, 0, 1);
  REQUIRE(cifar.logits_values(pc, xc).shape() == Shape{3, 2});
}

TEST_CASE("conv-3 rejects mismatched input shapes") {
  Conv3Detector net(1, 28, 28);
  Rng rng(2);
  ParamList p = net.init(rng);
  Tensor bad = Tensor::zeros({2, 3, 28, 28});
  REQUIRE_THROWS_AS(net.logits_values(p, bad), ContractError);
}

TEST_CASE("conv-3 forward duplicates logits when the batch is duplicated") {
  // batch statistics are unchanged when every row is repeated
  Conv3Detector net(1, 22, 22);
  Rng rng(3);
  ParamList p = net.init(rng);
  Tensor x = Tensor::rand_uniform({4, 1, 22, 22}, rng, 0, 1);
  Tensor x2({8, 1, 22, 22});
  for (int r = 0; r < 2; ++r)
    for (std::int64_t i = 0; i < x.numel(); ++i) x2.at(r * x.numel() + i) = x.at(i);
  Tensor l1 = net.logits_values(p, x);
  Tensor l2 = net.logits_values(p, x2);
  for (std::int64_t i = 0; i < l1.numel(); ++i) {
    REQUIRE(l2.at(i) == Approx(l1.at(i)).margin(1e-12));
    REQUIRE(l2.at(l1.numel() + i) == Approx(l1.at(i)).margin(1e-12));
  }
}

TEST_CASE("conv-3 loss gradient agrees with finite differences (sampled coords)") {
  Conv3Detector net(1, 22, 22);
  Rng rng(5);
  ParamList p = net.init(rng);
  Tensor x = Tensor::rand_uniform({3, 1, 22, 22}, rng, 0, 1);
  std::vector<int> y{0, 1, 1};
  meta::LabeledBatch batch{x, y};
  auto loss_fn = meta::detector_loss(net, batch);

  auto analytic = meta::loss_gradient(loss_fn, p);
  auto value_of = [&](const ParamList& at) {
    ag::NoGradGuard ng;
    std::vector<Var> leaves;
    for (const auto& t : at) leaves.push_back(Var::constant(t));
    return loss_fn(leaves).value().item();
  };
  Rng pick(7);
  REQUIRE(testing::fd_subset_max_rel_error(value_of, p, analytic, pick, 60) < 2e-4);
}

TEST_CASE("cross entropy analytic values") {
  // uniform logits over 2 classes -> ln 2; certain correct -> ~0
  Tensor uniform({2, 2}, {0.3, 0.3, -1.0, -1.0});
  Var loss = nn::cross_entropy(Var::constant(uniform), {0, 1});
  REQUIRE(loss.value().item() == Approx(std::log(2.0)).epsilon(1e-12));

  Tensor sharp({1, 2}, {30.0, -30.0});
  REQUIRE(nn::cross_entropy(Var::constant(sharp), {0}).value().item() ==
          Approx(0.0).margin(1e-12));

  // batch loss is the mean of per-sample losses
  Tensor a({1, 2}, {0.7, -0.2});
  Tensor b({1, 2}, {-1.1, 0.4});
  Tensor both({2, 2}, {0.7, -0.2, -1.1, 0.4});
  const real la = nn::cross_entropy(Var::constant(a), {0}).value().item();
  const real lb = nn::cross_entropy(Var::constant(b), {1}).value().item();
  const real lab = nn::cross_entropy(Var::constant(both), {0, 1}).value().item();
  REQUIRE(lab == Approx((la + lb) / 2).epsilon(1e-12));
}

TEST_CASE("batchnorm normalizes channel statistics") {
  Rng rng(11);
  Tensor x = Tensor::randn({4, 200}, rng, 3.0);
  Var y = nn::batchnorm_cols(Var::constant(x), Var::constant(Tensor::full({4}, 2.0)),
                             Var::constant(Tensor::full({4}, 0.5)));
  for (std::int64_t c = 0; c < 4; ++c) {
    real mean = 0, var = 0;
    for (std::int64_t j = 0; j < 200; ++j) mean += y.value().at(c * 200 + j);
    mean /= 200;
    for (std::int64_t j = 0; j < 200; ++j) {
      const real d = y.value().at(c * 200 + j) - mean;
      var += d * d;
    }
    var /= 200;
    REQUIRE(mean == Approx(0.5).margin(1e-9));
    REQUIRE(std::sqrt(var) == Approx(2.0).epsilon(1e-3));
  }
}

TEST_CASE("victim forward shapes across architectures") {
  Rng rng(13);
  VictimNet conv4_mnist(VictimArch::conv4, 1, 28, 28);
  auto p = conv4_mnist.init(rng);
  auto bn = conv4_mnist.fresh_bn();
  Tensor x = Tensor::rand_uniform({8, 1, 28, 28}, rng, 0, 1);
  Tensor logits = conv4_mnist.logits_values(p, x, bn);
  REQUIRE(logits.shape() == Shape{8, 10});
  REQUIRE(logits.all_finite());

  VictimNet r10(VictimArch::resnet10, 3, 32, 32);
  auto pr = r10.init(rng);
  auto bnr = r10.fresh_bn();
  Tensor xc = Tensor::rand_uniform({4, 3, 32, 32}, rng, 0, 1);
  Tensor lr10 = r10.logits_values(pr, xc, bnr);
  REQUIRE(lr10.shape() == Shape{4, 10});
  REQUIRE(lr10.all_finite());
}

TEST_CASE("resnet18 has more parameters than resnet10") {
  VictimNet r10(VictimArch::resnet10, 1, 28, 28);
  VictimNet r18(VictimArch::resnet18, 1, 28, 28);
  Rng rng(17);
  REQUIRE(param_count(r18.init(rng)) > param_count(r10.init(rng)));
}

TEST_CASE("victim inference mode is deterministic and per-row stable") {
  Rng rng(19);
  VictimNet net(VictimArch::conv4, 1, 14, 14);
  auto p = net.init(rng);
  auto bn = net.fresh_bn();
  Tensor x = Tensor::rand_uniform({3, 1, 14, 14}, rng, 0, 1);

  // a train-mode pass updates the running statistics
  {
    auto leaves = nn::as_leaves(p);
    Var out = net.forward(leaves, Var::constant(x), /*train_mode=*/true, bn);
    REQUIRE(out.value().all_finite());
  }
  Tensor a = net.logits_values(p, x, bn);
  Tensor b = net.logits_values(p, x, bn);
  REQUIRE(bitwise_equal(a, b));

  // duplicated rows give duplicated logits in inference mode
  Tensor x2({6, 1, 14, 14});
  for (int r = 0; r < 2; ++r)
    for (std::int64_t i = 0; i < x.numel(); ++i) x2.at(r * x.numel() + i) = x.at(i);
  // GEMM tiling differs with batch size, so this is exact math but not
  // necessarily the same bits; compare at solver precision.
  Tensor l2 = net.logits_values(p, x2, bn);
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    REQUIRE(l2.at(i) == Approx(a.at(i)).margin(1e-10));
    REQUIRE(l2.at(a.numel() + i) == Approx(a.at(i)).margin(1e-10));
  }
}
