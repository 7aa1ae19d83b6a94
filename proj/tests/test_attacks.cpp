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

#include "metadet/advset.hpp"

using namespace metadet;
using ag::Var;
namespace fs = std::filesystem;

namespace {

// logits = flatten(x) * W^T, a plain linear classifier over pixels
attacks::Classifier linear_clf(const Tensor& w) {
  const int classes = static_cast<int>(w.dim(0));
  const std::int64_t feat = w.dim(1);
  return {classes, [w, feat](const Var& x) {
            Var flat = ag::reshape(x, {x.shape()[0], feat});
            return ag::matmul(flat, ag::transpose(Var::constant(w)));
          }};
}

const fs::path& fixture_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "metadet_test_attacks";
    fs::remove_all(p);
    data::synthesize_domain_files(data::Domain::MNIST, p, {1400, 300, 21});
    return p;
  }();
  return root;
}

const victims::VictimClassifier& small_victim() {
  static auto v = [] {
    auto train = data::load_split(data::Domain::MNIST, data::Split::train, fixture_root());
    auto victim = victims::build_victim(VictimArch::conv4, data::Domain::MNIST);
    victims::VictimConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 64;
    cfg.seed = 7;
    victims::train_victim(victim, train, cfg);
    return victim;
  }();
  return v;
}

real linf(const Tensor& a, const Tensor& b) { return max_abs_diff(a, b); }

bool in_box(const Tensor& x) {
  for (std::int64_t i = 0; i < x.numel(); ++i)
    if (x.at(i) < 0 || x.at(i) > 1) return false;
  return true;
}

}  // namespace

TEST_CASE("fgsm with zero budget is the identity") {
  Rng rng(1);
  Tensor w = Tensor::randn({2, 16}, rng);
  Tensor x = Tensor::rand_uniform({3, 1, 4, 4}, rng, 0.2, 0.8);
  Tensor out = attacks::fgsm(linear_clf(w), x, {0, 1, 0}, 0.0);
  REQUIRE(bitwise_equal(out, x));
}

TEST_CASE("fgsm on a linear model steps along the known gradient sign") {
  // logits = [0, w.x] with all w > 0 and label 0: CE = softplus(w.x), so
  // d/dx = sigmoid(w.x) * w > 0 elementwise and x' = clip(x + eps).
  Tensor w({2, 9});
  for (std::int64_t j = 0; j < 9; ++j) w.at(9 + j) = 0.3 + 0.05 * static_cast<real>(j);
  Rng rng(2);
  Tensor x = Tensor::rand_uniform({2, 1, 3, 3}, rng, 0.3, 0.6);
  const real eps = 0.1;
  Tensor out = attacks::fgsm(linear_clf(w), x, {0, 0}, eps);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    REQUIRE(out.at(i) == Approx(std::min<real>(1, x.at(i) + eps)).margin(1e-12));
}

TEST_CASE("linf attacks respect the budget and the box on random batches") {
  const auto& victim = small_victim();
  auto clf = attacks::wrap_victim(victim);
  Rng rng(3);
  Tensor x = Tensor::rand_uniform({6, 1, 28, 28}, rng, 0, 1);
  std::vector<int> y;
  for (int i = 0; i < 6; ++i) y.push_back(static_cast<int>(rng.below(10)));

  attacks::AttackBudget budget;
  budget.epsilon = 0.3;
  budget.step_size = 0.05;
  budget.iterations = 5;
  budget.seed = 77;

  Tensor f = attacks::fgsm(clf, x, y, budget.epsilon);
  REQUIRE(linf(f, x) <= budget.epsilon + 1e-6);
  REQUIRE(in_box(f));

  for (auto variant :
       {attacks::LinfVariant::BIM, attacks::LinfVariant::PGD, attacks::LinfVariant::MIFGSM}) {
    Tensor out = attacks::iterative_linf(variant, clf, x, y, budget);
    INFO(attacks::linf_variant_name(variant));
    REQUIRE(linf(out, x) <= budget.epsilon + 1e-6);
    REQUIRE(in_box(out));
  }
}

TEST_CASE("single-iteration BIM collapses to fgsm at the step size") {
  const auto& victim = small_victim();
  auto clf = attacks::wrap_victim(victim);
  Rng rng(5);
  Tensor x = Tensor::rand_uniform({4, 1, 28, 28}, rng, 0.1, 0.9);
  std::vector<int> y{1, 4, 7, 2};
  attacks::AttackBudget budget;
  budget.epsilon = 0.3;
  budget.step_size = 0.07;
  budget.iterations = 1;
  Tensor bim = attacks::iterative_linf(attacks::LinfVariant::BIM, clf, x, y, budget);
  Tensor fg = attacks::fgsm(clf, x, y, budget.step_size);
  REQUIRE(bitwise_equal(bim, fg));
}

TEST_CASE("MI-FGSM with zero decay follows the BIM trajectory") {
  const auto& victim = small_victim();
  auto clf = attacks::wrap_victim(victim);
  Rng rng(7);
  Tensor x = Tensor::rand_uniform({3, 1, 28, 28}, rng, 0, 1);
  std::vector<int> y{0, 5, 9};
  attacks::AttackBudget budget;
  budget.epsilon = 0.2;
  budget.step_size = 0.04;
  budget.iterations = 4;
  budget.decay = 0.0;
  Tensor mi = attacks::iterative_linf(attacks::LinfVariant::MIFGSM, clf, x, y, budget);
  Tensor bim = attacks::iterative_linf(attacks::LinfVariant::BIM, clf, x, y, budget);
  REQUIRE(bitwise_equal(mi, bim));
}

TEST_CASE("PGD is bitwise deterministic under a fixed seed") {
  const auto& victim = small_victim();
  auto clf = attacks::wrap_victim(victim);
  Rng rng(9);
  Tensor x = Tensor::rand_uniform({3, 1, 28, 28}, rng, 0, 1);
  std::vector<int> y{2, 6, 3};
  attacks::AttackBudget budget;
  budget.epsilon = 0.3;
  budget.step_size = 0.05;
  budget.iterations = 3;
  budget.seed = 1234;
  Tensor a = attacks::iterative_linf(attacks::LinfVariant::PGD, clf, x, y, budget);
  Tensor b = attacks::iterative_linf(attacks::LinfVariant::PGD, clf, x, y, budget);
  REQUIRE(bitwise_equal(a, b));
}

TEST_CASE("deepfool lands near the analytic hyperplane distance on a linear model") {
  // two-class linear model; distance to the boundary is |(w1-w0).x| / ||w1-w0||
  Rng rng(11);
  Tensor w({2, 25});
  for (std::int64_t j = 0; j < 25; ++j) {
    w.at(j) = 0.8 * rng.normal();
    w.at(25 + j) = 0.8 * rng.normal();
  }
  Tensor x = Tensor::rand_uniform({1, 1, 5, 5}, rng, 0.45, 0.55);
  auto clf = linear_clf(w);
  const int pred = clf.predict(x)[0];

  real num = 0, den2 = 0;
  for (std::int64_t j = 0; j < 25; ++j) {
    const real d = w.at(25 + j) - w.at(j);
    num += d * x.at(j);
    den2 += d * d;
  }
  const real analytic = std::fabs(num) / std::sqrt(den2);

  attacks::AttackBudget budget;
  budget.iterations = 10;
  budget.overshoot = 0.02;
  budget.candidate_classes = 2;
  auto res = attacks::deepfool(clf, x, {pred}, budget);

  real moved2 = 0;
  for (std::int64_t j = 0; j < 25; ++j) {
    const real d = res.images.at(j) - x.at(j);
    moved2 += d * d;
  }
  REQUIRE(std::sqrt(moved2) == Approx(analytic).epsilon(0.05));
  REQUIRE(res.success[0]);
}

TEST_CASE("cw on an already-misclassified input keeps the perturbation at zero") {
  Rng rng(13);
  Tensor w = Tensor::randn({2, 16}, rng);
  Tensor x = Tensor::rand_uniform({2, 1, 4, 4}, rng, 0.2, 0.8);
  auto clf = linear_clf(w);
  auto pred = clf.predict(x);
  std::vector<int> wrong{1 - pred[0], 1 - pred[1]};  // claim the other class

  attacks::AttackBudget budget;
  budget.iterations = 12;
  budget.cw_search_steps = 2;
  auto res = attacks::cw_l2(clf, x, wrong, budget);
  REQUIRE(res.success[0]);
  REQUIRE(res.success[1]);
  REQUIRE(linf(res.images, x) < 1e-6);
}

TEST_CASE("cw success flags imply misclassification") {
  const auto& victim = small_victim();
  auto clf = attacks::wrap_victim(victim);
  auto test = data::load_split(data::Domain::MNIST, data::Split::test, fixture_root());
  Tensor x = victims::VictimClassifier::slice_images(test.images, 0, 10);
  std::vector<int> y(test.labels.begin(), test.labels.begin() + 10);

  attacks::AttackBudget budget;
  budget.iterations = 25;
  budget.cw_search_steps = 3;
  budget.cw_lr = 1e-1;
  auto res = attacks::cw_l2(clf, x, y, budget);
  auto pred = clf.predict(res.images);
  int successes = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    if (res.success[i]) {
      REQUIRE(pred[i] != y[i]);
      ++successes;
    }
  }
  INFO("cw successes: " << successes);
  REQUIRE(successes > 0);
}

TEST_CASE("semantic attack negates pixels and is an involution") {
  Tensor x({1, 1, 2, 2}, {0.2, 0.0, 1.0, 0.6});
  Tensor neg = attacks::semantic_attack(x);
  REQUIRE(neg.at(0) == Approx(0.8));
  REQUIRE(neg.at(1) == Approx(1.0));
  REQUIRE(neg.at(2) == Approx(0.0));
  REQUIRE(max_abs_diff(attacks::semantic_attack(neg), x) < 1e-15);  // involution up to 1 ulp

  Tensor black = Tensor::zeros({1, 1, 3, 3});
  Tensor white = attacks::semantic_attack(black);
  for (std::int64_t i = 0; i < white.numel(); ++i) REQUIRE(white.at(i) == 1.0);
}

TEST_CASE("spatial attack with an identity-only grid returns the input") {
  Rng rng(17);
  Tensor w = Tensor::randn({2, 16}, rng);
  Tensor x = Tensor::rand_uniform({3, 1, 4, 4}, rng, 0, 1);
  attacks::SpatialGrid grid;
  grid.rotations_deg = {0};
  grid.dx = {0};
  grid.dy = {0};
  Tensor out = attacks::spatial_attack(linear_clf(w), x, {0, 1, 0}, grid);
  REQUIRE(bitwise_equal(out, x));
}

TEST_CASE("spatial attack returns a member of the candidate set and maximizes loss") {
  // victim scores left-mass vs right-mass; shifting the bright patch right
  // raises the loss for label 0, so the dx=+2 candidate must win
  Tensor w({2, 36});
  for (std::int64_t r = 0; r < 6; ++r)
    for (std::int64_t c = 0; c < 6; ++c) {
      w.at(r * 6 + c) = c < 3 ? 1 : 0;        // class 0 likes left mass
      w.at(36 + r * 6 + c) = c >= 3 ? 1 : 0;  // class 1 likes right mass
    }
  Tensor x = Tensor::zeros({1, 1, 6, 6});
  x.at(2 * 6 + 1) = 1;  // bright pixel on the left
  auto clf = linear_clf(w);

  attacks::SpatialGrid grid;
  grid.rotations_deg = {0};
  grid.dx = {0, 2};
  grid.dy = {0};
  Tensor out = attacks::spatial_attack(clf, x, {0}, grid);
  Tensor shifted = x.clone();
  shifted.at(2 * 6 + 1) = 0;
  shifted.at(2 * 6 + 3) = 1;
  REQUIRE(max_abs_diff(out, shifted) < 1e-9);
}

TEST_CASE("filter_successful keeps exactly the fooled samples") {
  const auto& victim = small_victim();
  auto clf = attacks::wrap_victim(victim);
  auto test = data::load_split(data::Domain::MNIST, data::Split::test, fixture_root());
  const std::int64_t n = 100;
  Tensor x = victims::VictimClassifier::slice_images(test.images, 0, n);
  std::vector<int> y(test.labels.begin(), test.labels.begin() + n);

  // unmodified adversarials: kept set = the victim's existing mistakes
  auto same = attacks::filter_successful(clf, x, x, y);
  auto pred = clf.predict(x);
  std::vector<std::int64_t> expected;
  for (std::int64_t i = 0; i < n; ++i)
    if (pred[static_cast<std::size_t>(i)] != y[static_cast<std::size_t>(i)]) expected.push_back(i);
  REQUIRE(same.kept == expected);

  // a real attack: independent recount of misclassifications
  attacks::AttackBudget budget;
  budget.epsilon = 0.3;
  budget.step_size = 0.05;
  budget.iterations = 4;
  Tensor adv = attacks::iterative_linf(attacks::LinfVariant::BIM, clf, x, y, budget);
  auto filtered = attacks::filter_successful(clf, x, adv, y);
  auto adv_pred = clf.predict(adv);
  std::int64_t recount = 0;
  for (std::int64_t i = 0; i < n; ++i)
    if (adv_pred[static_cast<std::size_t>(i)] != y[static_cast<std::size_t>(i)]) ++recount;
  REQUIRE(static_cast<std::int64_t>(filtered.kept.size()) == recount);
  for (auto i : filtered.kept)
    REQUIRE(adv_pred[static_cast<std::size_t>(i)] != y[static_cast<std::size_t>(i)]);
  REQUIRE(filtered.kept_fraction ==
          Approx(static_cast<real>(recount) / static_cast<real>(n)));
}

TEST_CASE("adversarial dataset build: entries, filtering, manifest, round trip") {
  const auto& victim = small_victim();
  auto train = data::load_split(data::Domain::MNIST, data::Split::train, fixture_root());
  auto test = data::load_split(data::Domain::MNIST, data::Split::test, fixture_root());

  attacks::BuildLimits limits;
  limits.max_train_images = 150;
  limits.max_test_images = 80;
  limits.real_train_images = 150;
  limits.real_test_images = 80;
  limits.shard = 64;
  std::map<std::string, attacks::AttackBudget> budgets;
  attacks::AttackBudget quick;
  quick.epsilon = 0.3;
  quick.step_size = 0.05;
  quick.iterations = 3;
  budgets["FGSM"] = quick;
  budgets["PGD"] = quick;

  auto set = attacks::build_adv_dataset(victim, train, test, {"FGSM", "PGD", "semantic"},
                                        budgets, limits, 99);

  // real entries present for both splits
  REQUIRE(set.find("real", data::Split::train) != nullptr);
  REQUIRE(set.find("real", data::Split::test) != nullptr);

  auto clf = attacks::wrap_victim(victim);
  for (const auto& e : set.entries) {
    REQUIRE(e.images.dim(0) <= (e.split == data::Split::train ? 150 : 80));
    REQUIRE(in_box(e.images));
    if (e.adversary == "real") continue;
    // every stored adversarial image fools the victim at generation time
    auto pred = clf.predict(e.images);
    for (std::size_t i = 0; i < pred.size(); ++i) REQUIRE(pred[i] != e.original_class[i]);
  }

  // deterministic rebuild: identical manifest hash
  auto set2 = attacks::build_adv_dataset(victim, train, test, {"FGSM", "PGD", "semantic"},
                                         budgets, limits, 99);
  REQUIRE(set.manifest_hash() == set2.manifest_hash());

  // persistence round trip is bitwise at the file level
  const fs::path dir = fixture_root() / "advset";
  attacks::save_advset(dir, set);
  auto loaded = attacks::load_advset(dir);
  REQUIRE(loaded.entries.size() == set.entries.size());
  const fs::path dir2 = fixture_root() / "advset2";
  attacks::save_advset(dir2, loaded);
  for (const auto& e : loaded.entries) {
    const std::string stem = attacks::entry_stem(e);
    REQUIRE(io::file_hash(dir / (stem + ".bin")) == io::file_hash(dir2 / (stem + ".bin")));
  }
}
