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

#include <functional>
#include <string>
#include <vector>

#include "metadet/models.hpp"

// The double-update core: a task-dedicated copy of the master parameters is
// adapted on a task's support set (inner update), and the master then moves
// along the accumulated query-set gradients (outer update). The meta gradient
// is taken with respect to the pre-adaptation parameters, either exactly
// through the inner steps (second order) or treating them as frozen
// (first order).

namespace metadet::meta {

using ag::Var;

/// Scalar loss as a graph over a parameter list.
using LossFn = std::function<Var(const std::vector<Var>&)>;

enum class MetaMode { first_order, second_order };

inline std::string mode_name(MetaMode m) {
  return m == MetaMode::second_order ? "second_order" : "first_order";
}

inline MetaMode mode_from_name(const std::string& s) {
  if (s == "second_order") return MetaMode::second_order;
  if (s == "first_order") return MetaMode::first_order;
  throw ConfigError("unknown meta gradient mode: " + s);
}

enum class WayMode { fixed, randomized };

struct MetaConfig {
  real inner_lr = 0.001;
  real outer_lr = 0.0001;
  int inner_steps = 12;
  int tasks_per_batch = 30;
  int epochs = 4;
  WayMode way_mode = WayMode::fixed;
  int shots = 1;
  MetaMode meta_gradient_mode = MetaMode::second_order;

  void validate() const {
    MD_CHECK(inner_lr > 0 && outer_lr > 0, ConfigError, "learning rates must be positive");
    MD_CHECK(inner_steps >= 0, ConfigError, "inner_steps must be >= 0");
    MD_CHECK(tasks_per_batch >= 1, ConfigError, "tasks_per_batch must be >= 1");
    MD_CHECK(shots >= 1, ConfigError, "shots must be >= 1");
  }
};

/// Inner-update trajectory theta_0..theta_T. theta_0 is the starting point;
/// when keep_trajectory is false only the endpoint is retained (enough for
/// first-order use, rejected by the second-order meta gradient).
struct InnerTrajectory {
  std::vector<ParamList> thetas;
  real inner_lr = 0;
  int steps = 0;
  bool full = true;

  const ParamList& adapted() const { return thetas.back(); }
};

/// T plain gradient-descent steps on the full support batch.
inline InnerTrajectory inner_update(const ParamList& theta, const LossFn& support_loss,
                                    real inner_lr, int steps, bool keep_trajectory = true) {
  MD_CONTRACT(steps >= 0, "inner_update: negative step count");
  InnerTrajectory traj;
  traj.inner_lr = inner_lr;
  traj.steps = steps;
  traj.full = keep_trajectory;
  ParamList cur = clone_params(theta);
  if (keep_trajectory) traj.thetas.push_back(clone_params(cur));
  for (int t = 0; t < steps; ++t) {
    auto leaves = nn::as_leaves(cur);
    Var loss = support_loss(leaves);
    MD_CHECK(std::isfinite(loss.value().item()), TrainError,
             "non-finite support loss at inner step " + std::to_string(t));
    auto grads = ag::grad(loss, leaves);
    cur = nn::sgd_step(cur, grads, inner_lr);
    if (keep_trajectory) traj.thetas.push_back(clone_params(cur));
  }
  if (!keep_trajectory) traj.thetas.push_back(std::move(cur));
  return traj;
}

/// Gradient of `f` at `at`, as plain tensors.
inline ParamList loss_gradient(const LossFn& f, const ParamList& at) {
  auto leaves = nn::as_leaves(at);
  Var loss = f(leaves);
  auto grads = ag::grad(loss, leaves);
  return nn::values_of(grads);
}

/// Hessian-vector product of `f` at `at` along `v` via double backward.
inline ParamList hvp(const LossFn& f, const ParamList& at, const ParamList& v) {
  auto leaves = nn::as_leaves(at);
  Var loss = f(leaves);
  auto grads = ag::grad(loss, leaves, /*create_graph=*/true);
  std::vector<Var> dir;
  dir.reserve(v.size());
  for (const auto& t : v) dir.push_back(Var::constant(t));
  Var s = ag::dot(grads, dir);
  auto hv = ag::grad(s, leaves);
  return nn::values_of(hv);
}

/// Per-task contribution G_i to the outer update.
///
/// second_order: exact d(query loss at theta_T)/d(theta_0), computed by
/// back-propagating through the inner steps with one Hessian-vector product
/// per step:  v_T = grad(query)(theta_T),  v_t = v_{t+1} - lr * H_S(theta_t) v_{t+1}.
/// first_order: grad(query)(theta_T), the inner Jacobian treated as identity.
inline ParamList meta_gradient(const InnerTrajectory& traj, const LossFn& support_loss,
                               const LossFn& query_loss, MetaMode mode) {
  ParamList v = loss_gradient(query_loss, traj.adapted());
  if (mode == MetaMode::first_order || traj.steps == 0) return v;
  MD_CONTRACT(traj.full && static_cast<int>(traj.thetas.size()) == traj.steps + 1,
              "second-order meta gradient needs the full inner trajectory");
  for (int t = traj.steps - 1; t >= 0; --t) {
    ParamList hv = hvp(support_loss, traj.thetas[static_cast<std::size_t>(t)], v);
    for (std::size_t i = 0; i < v.size(); ++i) add_scaled_inplace(v[i], hv[i], -traj.inner_lr);
  }
  return v;
}

/// Master step along the accumulated task gradients: M - lr * sum_i G_i.
inline void outer_update(ParamList& master, const std::vector<ParamList>& task_grads,
                         real outer_lr) {
  MD_CONTRACT(!task_grads.empty(), "outer_update: no task gradients");
  for (const auto& g : task_grads)
    MD_CONTRACT(g.size() == master.size(), "outer_update: gradient arity mismatch");
  for (std::size_t i = 0; i < master.size(); ++i) {
    Tensor sum = Tensor::zeros(master[i].shape());
    for (const auto& g : task_grads) {
      MD_CONTRACT(g[i].same_shape(master[i]), "outer_update: gradient shape mismatch");
      add_scaled_inplace(sum, g[i], 1);
    }
    add_scaled_inplace(master[i], sum, -outer_lr);
  }
}

// -- detector glue -------------------------------------------------------------

struct LabeledBatch {
  Tensor images;            // [n,C,H,W]
  std::vector<int> labels;  // way labels in {0,1} (or class ids for victims)
};

/// Cross-entropy loss of the conv-3 detector on a fixed batch.
inline LossFn detector_loss(const Conv3Detector& net, const LabeledBatch& batch) {
  return [net, batch](const std::vector<Var>& p) {
    return nn::cross_entropy(net.forward(p, Var::constant(batch.images)), batch.labels);
  };
}

}  // namespace metadet::meta
