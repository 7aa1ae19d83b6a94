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
using meta::LossFn;
using meta::MetaMode;

namespace {

// (theta - c)^2 on a single scalar parameter
LossFn scalar_quadratic(real c) {
  return [c](const std::vector<Var>& p) {
    Var d = ag::adds(p[0], -c);
    return ag::sum_all(ag::mul(d, d));
  };
}

Var softplus(const Var& x) { return ag::log(ag::adds(ag::exp(x), 1)); }

// Tiny smooth MLP: d -> h -> 2 with softplus, cross entropy on fixed data.
struct ToyNet {
  std::int64_t d, h;
  Tensor x;  // [n,d]
  std::vector<int> y;

  ParamList init(Rng& rng) const {
    return {Tensor::randn({h, d}, rng, 0.7), Tensor::randn({h}, rng, 0.3),
            Tensor::randn({2, h}, rng, 0.7), Tensor::randn({2}, rng, 0.3)};
  }
  std::int64_t param_count() const { return h * d + h + 2 * h + 2; }

  LossFn loss() const {
    Tensor xc = x;
    std::vector<int> yc = y;
    std::int64_t n = x.dim(0), dd = d, hh = h;
    return [xc, yc, n, dd, hh](const std::vector<Var>& p) {
      Var h1 = softplus(nn::linear(Var::constant(xc), p[0], p[1]));
      Var logits = nn::linear(h1, p[2], p[3]);
      return nn::cross_entropy(logits, yc);
    };
  }
};

// Full inner-loop + query-loss evaluation as a plain function of theta_0,
// used as the finite-difference oracle for the second-order meta gradient.
real meta_objective(const ParamList& theta0, const LossFn& support, const LossFn& query,
                    real lr, int steps) {
  auto traj = meta::inner_update(theta0, support, lr, steps, /*keep_trajectory=*/false);
  ag::NoGradGuard ng;
  std::vector<Var> leaves;
  for (const auto& t : traj.adapted()) leaves.push_back(Var::constant(t));
  return query(leaves).value().item();
}

}  // namespace

TEST_CASE("inner update reproduces the hand-computed scalar trajectory") {
  ParamList theta{Tensor::scalar(0)};
  auto traj = meta::inner_update(theta, scalar_quadratic(2), 0.1, 1);
  // grad of (theta-2)^2 at 0 is -4, so one step of lr 0.1 lands on 0.4
  REQUIRE(traj.adapted()[0].item() == Approx(0.4).margin(1e-15));

  auto traj3 = meta::inner_update(theta, scalar_quadratic(2), 0.1, 3);
  real v = 0;
  for (int t = 0; t < 3; ++t) v = v - 0.1 * 2 * (v - 2);
  REQUIRE(traj3.adapted()[0].item() == Approx(v).margin(1e-15));
  REQUIRE(traj3.thetas.size() == 4);
}

TEST_CASE("inner update with T=0 returns theta unchanged") {
  ParamList theta{Tensor::scalar(1.25)};
  auto traj = meta::inner_update(theta, scalar_quadratic(2), 0.1, 0);
  REQUIRE(traj.adapted()[0].item() == 1.25);
  REQUIRE(traj.thetas.size() == 1);
}

TEST_CASE("inner update is deterministic") {
  Rng rng(5);
  ToyNet net{3, 4, Tensor::randn({6, 3}, rng), {0, 1, 0, 1, 1, 0}};
  ParamList theta = net.init(rng);
  auto a = meta::inner_update(theta, net.loss(), 0.05, 4);
  auto b = meta::inner_update(theta, net.loss(), 0.05, 4);
  REQUIRE(params_bitwise_equal(a.adapted(), b.adapted()));
}

TEST_CASE("meta gradient on the scalar chain matches the analytic value") {
  // inner (theta-2)^2, query (theta-3)^2, lr 0.1, T=1, theta0=0:
  // theta' = 0.4, dtheta'/dtheta = 1 - 0.1*2 = 0.8, G = 2*(0.4-3)*0.8 = -4.16
  ParamList theta{Tensor::scalar(0)};
  auto support = scalar_quadratic(2);
  auto query = scalar_quadratic(3);
  auto traj = meta::inner_update(theta, support, 0.1, 1);
  auto g2 = meta::meta_gradient(traj, support, query, MetaMode::second_order);
  REQUIRE(g2[0].item() == Approx(-4.16).margin(1e-12));

  const real h = 1e-6;
  ParamList p{Tensor::scalar(h)}, m{Tensor::scalar(-h)};
  const real fd = (meta_objective(p, support, query, 0.1, 1) -
                   meta_objective(m, support, query, 0.1, 1)) /
                  (2 * h);
  REQUIRE(g2[0].item() == Approx(fd).epsilon(1e-6));
}

TEST_CASE("with T=0 both modes reduce to the plain query gradient") {
  Rng rng(9);
  ToyNet net{3, 4, Tensor::randn({6, 3}, rng), {0, 1, 1, 0, 1, 0}};
  ParamList theta = net.init(rng);
  auto traj = meta::inner_update(theta, net.loss(), 0.05, 0);
  auto g_plain = meta::loss_gradient(net.loss(), theta);
  auto g1 = meta::meta_gradient(traj, net.loss(), net.loss(), MetaMode::first_order);
  auto g2 = meta::meta_gradient(traj, net.loss(), net.loss(), MetaMode::second_order);
  REQUIRE(params_bitwise_equal(g1, g_plain));
  REQUIRE(params_bitwise_equal(g2, g_plain));
}

TEST_CASE("second-order meta gradient matches finite differences on toy nets") {
  Rng rng(21);
  ToyNet net{4, 8, Tensor::randn({10, 4}, rng), {0, 1, 0, 1, 1, 0, 1, 0, 0, 1}};
  REQUIRE(net.param_count() <= 100);
  Rng qrng(22);
  ToyNet qnet{4, 8, Tensor::randn({8, 4}, qrng), {1, 0, 1, 0, 0, 1, 0, 1}};

  for (int steps : {1, 2, 3}) {
    ParamList theta = net.init(rng);
    auto traj = meta::inner_update(theta, net.loss(), 0.1, steps);
    auto g = meta::meta_gradient(traj, net.loss(), qnet.loss(), MetaMode::second_order);
    ParamList fd = testing::finite_diff_grad(
        [&](const ParamList& p) {
          return meta_objective(p, net.loss(), qnet.loss(), 0.1, steps);
        },
        theta, 1e-5);
    REQUIRE(testing::max_rel_error(g, fd, 1e-4) < 1e-3);
  }
}

TEST_CASE("first-order mode equals the gradient at the adapted parameters") {
  Rng rng(31);
  ToyNet net{3, 5, Tensor::randn({6, 3}, rng), {0, 1, 1, 0, 1, 0}};
  ParamList theta = net.init(rng);
  auto traj = meta::inner_update(theta, net.loss(), 0.05, 3);
  auto g1 = meta::meta_gradient(traj, net.loss(), net.loss(), MetaMode::first_order);
  auto direct = meta::loss_gradient(net.loss(), traj.adapted());
  REQUIRE(params_bitwise_equal(g1, direct));
}

TEST_CASE("second-order mode demands the full trajectory") {
  ParamList theta{Tensor::scalar(0)};
  auto support = scalar_quadratic(2);
  auto traj = meta::inner_update(theta, support, 0.1, 2, /*keep_trajectory=*/false);
  auto g1 = meta::meta_gradient(traj, support, support, MetaMode::first_order);
  REQUIRE(g1.size() == 1);
  REQUIRE_THROWS_AS(meta::meta_gradient(traj, support, support, MetaMode::second_order),
                    ContractError);
}

TEST_CASE("outer update: zero gradients leave the master unchanged") {
  ParamList master{Tensor::full({3}, 0.5)};
  std::vector<ParamList> gs{{Tensor::zeros({3})}, {Tensor::zeros({3})}};
  ParamList before = clone_params(master);
  meta::outer_update(master, gs, 1e-4);
  REQUIRE(params_bitwise_equal(master, before));
}

TEST_CASE("outer update: unit gradient moves every entry by lr") {
  ParamList master{Tensor::full({4}, 1.0)};
  std::vector<ParamList> gs{{Tensor::full({4}, 1.0)}};
  meta::outer_update(master, gs, 1e-4);
  for (std::int64_t i = 0; i < 4; ++i) REQUIRE(master[0].at(i) == Approx(1.0 - 1e-4));
}

TEST_CASE("outer update equals an independently accumulated sum") {
  Rng rng(41);
  ParamList master{Tensor::randn({7}, rng), Tensor::randn({2, 3}, rng)};
  std::vector<ParamList> gs;
  for (int k = 0; k < 5; ++k)
    gs.push_back({Tensor::randn({7}, rng), Tensor::randn({2, 3}, rng)});

  // independent accumulation: per-coordinate long double sum, applied directly
  ParamList expected = clone_params(master);
  const real lr = 3e-4;
  for (std::size_t i = 0; i < expected.size(); ++i)
    for (std::int64_t j = 0; j < expected[i].numel(); ++j) {
      long double s = 0;
      for (const auto& g : gs) s += static_cast<long double>(g[i].at(j));
      expected[i].at(j) -= static_cast<real>(lr * s);
    }

  meta::outer_update(master, gs, lr);
  for (std::size_t i = 0; i < master.size(); ++i)
    REQUIRE(max_abs_diff(master[i], expected[i]) < 1e-6);
}

TEST_CASE("outer update applied in two chunks agrees within tolerance") {
  Rng rng(43);
  ParamList a{Tensor::randn({16}, rng)};
  ParamList b = clone_params(a);
  std::vector<ParamList> gs;
  for (int k = 0; k < 6; ++k) gs.push_back({Tensor::randn({16}, rng)});

  meta::outer_update(a, gs, 1e-4);
  std::vector<ParamList> first(gs.begin(), gs.begin() + 2), rest(gs.begin() + 2, gs.end());
  meta::outer_update(b, first, 1e-4);
  meta::outer_update(b, rest, 1e-4);
  REQUIRE(max_abs_diff(a[0], b[0]) < 1e-6);
}

TEST_CASE("hvp on a quadratic form equals the exact hessian product") {
  // f(x) = 0.5 x^T A x with A = diag(d) + outer structure via sum: use
  // f(x) = 0.5*sum(d*x^2) + (sum x)^2 -> H = diag(d) + 2*ones
  Rng rng(47);
  Tensor d({5}, {1, 2, 3, 4, 5});
  Tensor x = Tensor::randn({5}, rng);
  Tensor v = Tensor::randn({5}, rng);
  LossFn f = [d](const std::vector<Var>& p) {
    Var quad = ag::muls(ag::sum_all(ag::mul(Var::constant(d), ag::mul(p[0], p[0]))), 0.5);
    Var s = ag::sum_all(p[0]);
    return ag::add(quad, ag::mul(s, s));
  };
  auto hv = meta::hvp(f, {x}, {v});
  real vsum = 0;
  for (std::int64_t i = 0; i < 5; ++i) vsum += v.at(i);
  for (std::int64_t i = 0; i < 5; ++i)
    REQUIRE(hv[0].at(i) == Approx(d.at(i) * v.at(i) + 2 * vsum).epsilon(1e-12));
}
