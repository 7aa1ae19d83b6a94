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
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "metadet/victims.hpp"

// Adversarial example generation. Attacks are written against a generic
// differentiable classifier so tests can drive them with analytic toy models;
// victims::VictimClassifier adapts via wrap_victim(). All attacks treat
// pixels as living in the [0,1] box.

namespace metadet::attacks {

namespace fs = std::filesystem;
using ag::Var;
using io::json;

struct Classifier {
  int num_classes = 10;
  // Differentiable inference-mode logits for [n,C,H,W] pixel batches.
  std::function<Var(const Var&)> logits;

  Tensor logits_values(const Tensor& images) const {
    ag::NoGradGuard ng;
    return logits(Var::constant(images)).value();
  }
  std::vector<int> predict(const Tensor& images) const {
    return nn::argmax_rows(logits_values(images));
  }
};

inline Classifier wrap_victim(const victims::VictimClassifier& v) {
  return Classifier{VictimNet::kNumClasses,
                    [&v](const Var& x) { return v.logits_graph(x); }};
}

enum class Norm { linf, l2 };

struct AttackBudget {
  real epsilon = 0.3;
  real step_size = 0.01;
  int iterations = 40;
  Norm norm = Norm::linf;
  real decay = 1.0;       // MI-FGSM momentum
  real confidence = 0.0;  // C&W kappa
  real cw_c_init = 1e-1;
  int cw_search_steps = 5;
  real cw_lr = 5e-2;
  real overshoot = 0.02;  // DeepFool
  int candidate_classes = 10;
  std::uint64_t seed = 0;

  void validate() const {
    MD_CHECK(epsilon > 0 || iterations == 0, ConfigError, "attack epsilon must be positive");
    MD_CHECK(iterations >= 1 || epsilon == 0, ConfigError, "attack iterations must be >= 1");
  }

  json to_json() const {
    return {{"epsilon", epsilon},     {"step_size", step_size},
            {"iterations", iterations}, {"norm", norm == Norm::linf ? "linf" : "l2"},
            {"decay", decay},          {"confidence", confidence},
            {"cw_c_init", cw_c_init},  {"cw_search_steps", cw_search_steps},
            {"cw_lr", cw_lr},          {"overshoot", overshoot},
            {"candidate_classes", candidate_classes}, {"seed", seed}};
  }
};

/// Conventional budgets: MNIST-family eps 0.3 / 40 steps, CIFAR 8/255 / 20.
inline AttackBudget default_budget(data::Domain domain) {
  AttackBudget b;
  if (domain == data::Domain::CIFAR10) {
    b.epsilon = 8.0 / 255.0;
    b.step_size = 2.0 / 255.0;
    b.iterations = 20;
  }
  return b;
}

/// Per-adversary defaults: `iterations` means optimizer steps per search
/// round for C&W and boundary-projection steps for DeepFool, so those two get
/// their own counts.
inline AttackBudget default_budget_for(const std::string& adversary, data::Domain domain) {
  AttackBudget b = default_budget(domain);
  if (adversary == "CW") {
    b.iterations = 25;
    b.cw_search_steps = 4;
    b.cw_lr = 1e-1;
  } else if (adversary == "DeepFool") {
    b.iterations = 20;
  }
  return b;
}

namespace detail {

inline Tensor ce_input_gradient(const Classifier& clf, const Tensor& x,
                                const std::vector<int>& labels) {
  Var leaf = Var::leaf(x, true);
  Var loss = nn::cross_entropy(clf.logits(leaf), labels);
  MD_CHECK(std::isfinite(loss.value().item()), AttackError, "non-finite attack loss");
  Tensor g = ag::grad(loss, {leaf})[0].value();
  MD_CHECK(g.all_finite(), AttackError, "non-finite attack gradient");
  return g;
}

inline void clip_box_inplace(Tensor& x) {
  for (std::int64_t i = 0; i < x.numel(); ++i)
    x.at(i) = std::min<real>(1, std::max<real>(0, x.at(i)));
}

inline void clip_ball_inplace(Tensor& x, const Tensor& x0, real eps) {
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const real lo = std::max<real>(0, x0.at(i) - eps);
    const real hi = std::min<real>(1, x0.at(i) + eps);
    x.at(i) = std::min(hi, std::max(lo, x.at(i)));
  }
}

inline std::int64_t image_stride(const Tensor& images) {
  const auto& s = images.shape();
  return s[1] * s[2] * s[3];
}

}  // namespace detail

// -- l-inf family ---------------------------------------------------------------

/// x' = clip_[0,1](x + eps * sign(grad_x CE)).
inline Tensor fgsm(const Classifier& clf, const Tensor& images, const std::vector<int>& labels,
                   real epsilon) {
  if (epsilon == 0) return images.clone();
  Tensor g = detail::ce_input_gradient(clf, images, labels);
  Tensor out = images.clone();
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const real s = g.at(i) > 0 ? 1 : (g.at(i) < 0 ? -1 : 0);
    out.at(i) += epsilon * s;
  }
  detail::clip_box_inplace(out);
  return out;
}

enum class LinfVariant { BIM, PGD, MIFGSM };

inline std::string linf_variant_name(LinfVariant v) {
  switch (v) {
    case LinfVariant::BIM: return "BIM";
    case LinfVariant::PGD: return "PGD";
    case LinfVariant::MIFGSM: return "MI-FGSM";
  }
  return "?";
}

/// Iterative l-inf attacks. BIM starts at x, PGD at a uniform point of the
/// eps-ball, MI-FGSM keeps an l1-normalized momentum accumulator. The iterate
/// is reprojected into the ball and the box after every step.
inline Tensor iterative_linf(LinfVariant variant, const Classifier& clf, const Tensor& images,
                             const std::vector<int>& labels, const AttackBudget& budget) {
  MD_CHECK(budget.norm == Norm::linf, ConfigError, "iterative_linf needs an l-inf budget");
  budget.validate();
  Tensor x = images.clone();
  if (variant == LinfVariant::PGD) {
    Rng rng(budget.seed ^ 0x9d2c5680u);
    for (std::int64_t i = 0; i < x.numel(); ++i)
      x.at(i) += rng.uniform(-budget.epsilon, budget.epsilon);
    detail::clip_ball_inplace(x, images, budget.epsilon);
  }
  const std::int64_t n = images.dim(0), stride = detail::image_stride(images);
  Tensor momentum = Tensor::zeros(images.shape());
  for (int it = 0; it < budget.iterations; ++it) {
    Tensor g = detail::ce_input_gradient(clf, x, labels);
    const Tensor* dir = &g;
    if (variant == LinfVariant::MIFGSM) {
      for (std::int64_t b = 0; b < n; ++b) {
        real l1 = 0;
        for (std::int64_t j = 0; j < stride; ++j) l1 += std::fabs(g.at(b * stride + j));
        const real inv = l1 > 0 ? 1 / l1 : 0;
        for (std::int64_t j = 0; j < stride; ++j) {
          auto& m = momentum.at(b * stride + j);
          m = budget.decay * m + g.at(b * stride + j) * inv;
        }
      }
      dir = &momentum;
    }
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const real v = dir->at(i);
      x.at(i) += budget.step_size * (v > 0 ? 1 : (v < 0 ? -1 : 0));
    }
    detail::clip_ball_inplace(x, images, budget.epsilon);
  }
  return x;
}

// -- l2 family --------------------------------------------------------------------

struct L2Result {
  Tensor images;
  std::vector<bool> success;
};

namespace detail {

/// Carlini-Wagner l2 core: margin objective in tanh space with a per-image
/// binary search over the trade-off constant. Untargeted mode pushes away
/// from `ref` (the true label); targeted mode pulls toward `ref` (the target).
inline L2Result cw_core(const Classifier& clf, const Tensor& images, const std::vector<int>& ref,
                        bool targeted, const AttackBudget& budget) {
  const std::int64_t n = images.dim(0), stride = detail::image_stride(images);
  const real box_eps = 1e-6;
  Tensor w0(images.shape());
  for (std::int64_t i = 0; i < w0.numel(); ++i) {
    const real p = std::min<real>(1 - box_eps, std::max<real>(box_eps, images.at(i)));
    w0.at(i) = std::atanh(2 * p - 1);
  }

  Tensor onehot({n, clf.num_classes});
  Tensor exclude({n, clf.num_classes});
  for (std::int64_t b = 0; b < n; ++b) {
    onehot.at(b * clf.num_classes + ref[static_cast<std::size_t>(b)]) = 1;
    exclude.at(b * clf.num_classes + ref[static_cast<std::size_t>(b)]) = -1e9;
  }

  std::vector<real> c(static_cast<std::size_t>(n), budget.cw_c_init);
  std::vector<real> c_lo(static_cast<std::size_t>(n), 0), c_hi(static_cast<std::size_t>(n), -1);
  L2Result best{images.clone(), std::vector<bool>(static_cast<std::size_t>(n), false)};
  std::vector<real> best_dist(static_cast<std::size_t>(n), 1e30);

  for (int search = 0; search < budget.cw_search_steps; ++search) {
    Tensor w = w0.clone();
    nn::Adam opt;
    opt.lr = budget.cw_lr;
    Tensor c_t({n});
    for (std::int64_t b = 0; b < n; ++b) c_t.at(b) = c[static_cast<std::size_t>(b)];
    std::vector<bool> round_success(static_cast<std::size_t>(n), false);

    for (int it = 0; it < budget.iterations; ++it) {
      Var wv = Var::leaf(w, true);
      // x' = (tanh(w)+1)/2 with tanh(w) = 1 - 2/(exp(2w)+1)
      Var ones = ag::spread(Var::constant(Tensor::scalar(1)), images.shape());
      Var denom = ag::adds(ag::exp(ag::muls(wv, 2)), 1);
      Var tanh_w = ag::adds(ag::muls(ag::div(ones, denom), -2), 1);
      Var xadv = ag::muls(ag::adds(tanh_w, 1), 0.5);
      Var diff = ag::sub(xadv, Var::constant(images));
      Var dist2 = ag::row_sum(ag::reshape(ag::mul(diff, diff), {n, stride}));
      Var logits = clf.logits(xadv);
      Var zref = ag::row_sum(ag::mul(logits, Var::constant(onehot)));
      Var zother = ag::row_max(ag::add(logits, Var::constant(exclude)));
      // untargeted: push the true class below the runner-up; targeted: pull
      // the target above everything else
      Var margin = targeted ? ag::relu(ag::adds(ag::sub(zother, zref), budget.confidence))
                            : ag::relu(ag::adds(ag::sub(zref, zother), budget.confidence));
      Var loss = ag::sum_all(ag::add(dist2, ag::mul(Var::constant(c_t), margin)));
      Tensor gw = ag::grad(loss, {wv})[0].value();
      opt.step(w, gw);
      for (std::int64_t i = 0; i < w.numel(); ++i)
        w.at(i) = std::min<real>(20, std::max<real>(-20, w.at(i)));  // tanh is saturated anyway

      // bookkeeping: keep the closest successful iterate per image
      const Tensor& xv = xadv.value();
      auto pred = nn::argmax_rows(logits.value());
      for (std::int64_t b = 0; b < n; ++b) {
        const bool hit = targeted ? pred[static_cast<std::size_t>(b)] == ref[static_cast<std::size_t>(b)]
                                  : pred[static_cast<std::size_t>(b)] != ref[static_cast<std::size_t>(b)];
        if (!hit) continue;
        round_success[static_cast<std::size_t>(b)] = true;
        real d = 0;
        for (std::int64_t j = 0; j < stride; ++j) {
          const real dd = xv.at(b * stride + j) - images.at(b * stride + j);
          d += dd * dd;
        }
        if (d < best_dist[static_cast<std::size_t>(b)]) {
          best_dist[static_cast<std::size_t>(b)] = d;
          best.success[static_cast<std::size_t>(b)] = true;
          for (std::int64_t j = 0; j < stride; ++j)
            best.images.at(b * stride + j) = xv.at(b * stride + j);
        }
      }
    }

    for (std::int64_t b = 0; b < n; ++b) {
      const auto i = static_cast<std::size_t>(b);
      if (round_success[i]) {
        c_hi[i] = c[i];
        c[i] = (c_lo[i] + c_hi[i]) / 2;
      } else {
        c_lo[i] = c[i];
        c[i] = c_hi[i] < 0 ? c[i] * 10 : (c_lo[i] + c_hi[i]) / 2;
      }
    }
  }
  detail::clip_box_inplace(best.images);
  return best;
}

}  // namespace detail

inline L2Result cw_l2(const Classifier& clf, const Tensor& images, const std::vector<int>& labels,
                      const AttackBudget& budget) {
  return detail::cw_core(clf, images, labels, /*targeted=*/false, budget);
}

/// Targeted C&W (used by the white-box benchmark): success means the model
/// outputs exactly the requested target class.
inline L2Result cw_l2_targeted(const Classifier& clf, const Tensor& images,
                               const std::vector<int>& targets, const AttackBudget& budget) {
  return detail::cw_core(clf, images, targets, /*targeted=*/true, budget);
}

/// DeepFool: iterative projection onto the nearest linearized class boundary.
inline L2Result deepfool(const Classifier& clf, const Tensor& images,
                         const std::vector<int>& labels, const AttackBudget& budget) {
  const std::int64_t n = images.dim(0), stride = detail::image_stride(images);
  const auto& s = images.shape();
  L2Result out{images.clone(), std::vector<bool>(static_cast<std::size_t>(n), false)};

  for (std::int64_t b = 0; b < n; ++b) {
    Tensor x({1, s[1], s[2], s[3]});
    std::copy(images.data() + b * stride, images.data() + (b + 1) * stride, x.data());
    const int k0 = clf.predict(x)[0];

    for (int it = 0; it < budget.iterations; ++it) {
      Var leaf = Var::leaf(x, true);
      Var logits = clf.logits(leaf);
      const Tensor& lv = logits.value();
      if (nn::argmax_rows(lv)[0] != k0) break;

      // candidate classes: top-k by logit, excluding k0
      std::vector<int> order(static_cast<std::size_t>(clf.num_classes));
      for (int j = 0; j < clf.num_classes; ++j) order[static_cast<std::size_t>(j)] = j;
      std::sort(order.begin(), order.end(),
                [&](int a2, int b2) { return lv.at(a2) > lv.at(b2); });

      auto class_grad = [&](int j) {
        Tensor pick({1, clf.num_classes});
        pick.at(j) = 1;
        Var fj = ag::sum_all(ag::mul(logits, Var::constant(pick)));
        return ag::grad(fj, {leaf})[0].value();
      };
      Tensor g0 = class_grad(k0);

      real best_ratio = 1e30;
      Tensor best_w;
      real best_f = 0;
      int taken = 0;
      for (int j : order) {
        if (j == k0) continue;
        if (taken++ >= std::max(1, budget.candidate_classes - 1)) break;
        Tensor wj = class_grad(j);
        real fdiff = lv.at(j) - lv.at(k0);
        real norm2 = 0;
        for (std::int64_t i = 0; i < wj.numel(); ++i) {
          wj.at(i) -= g0.at(i);
          norm2 += wj.at(i) * wj.at(i);
        }
        if (norm2 <= 1e-20) continue;
        const real ratio = std::fabs(fdiff) / std::sqrt(norm2);
        if (ratio < best_ratio) {
          best_ratio = ratio;
          best_w = wj;
          best_f = std::fabs(fdiff) / norm2;
        }
      }
      if (!best_w.defined()) break;
      // iterate unconstrained (the minimal-perturbation geometry lives in the
      // full space); the box clip happens once on the returned image
      add_scaled_inplace(x, best_w, (1 + budget.overshoot) * best_f);
    }

    detail::clip_box_inplace(x);
    std::copy(x.data(), x.data() + stride, out.images.data() + b * stride);
    out.success[static_cast<std::size_t>(b)] =
        clf.predict(x)[0] != labels[static_cast<std::size_t>(b)];
  }
  return out;
}

// -- transformation attacks -------------------------------------------------------

/// Pixel negation.
inline Tensor semantic_attack(const Tensor& images) {
  Tensor out(images.shape());
  for (std::int64_t i = 0; i < images.numel(); ++i) out.at(i) = 1 - images.at(i);
  return out;
}

struct SpatialGrid {
  std::vector<real> rotations_deg{-30, -15, 0, 15, 30};
  std::vector<int> dx{-3, 0, 3};
  std::vector<int> dy{-3, 0, 3};
};

namespace detail {

inline Tensor warp(const Tensor& images, real rot_deg, int dx, int dy) {
  const auto& s = images.shape();
  const std::int64_t n = s[0], c = s[1], h = s[2], w = s[3];
  Tensor out(s);
  const real th = rot_deg * M_PI / 180.0;
  const real ca = std::cos(th), sa = std::sin(th);
  const real cy = (static_cast<real>(h) - 1) / 2, cx = (static_cast<real>(w) - 1) / 2;
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const real* src = images.data() + (b * c + ch) * h * w;
      real* dst = out.data() + (b * c + ch) * h * w;
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          // inverse map of rotate-then-translate
          const real yy = static_cast<real>(y - dy) - cy;
          const real xx = static_cast<real>(x - dx) - cx;
          const real sy = ca * yy + sa * xx + cy;
          const real sx = -sa * yy + ca * xx + cx;
          const std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
          const std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
          const real fy = sy - static_cast<real>(y0), fx = sx - static_cast<real>(x0);
          auto at = [&](std::int64_t yi, std::int64_t xi) -> real {
            if (yi < 0 || yi >= h || xi < 0 || xi >= w) return 0;
            return src[yi * w + xi];
          };
          dst[y * w + x] = at(y0, x0) * (1 - fy) * (1 - fx) + at(y0 + 1, x0) * fy * (1 - fx) +
                           at(y0, x0 + 1) * (1 - fy) * fx + at(y0 + 1, x0 + 1) * fy * fx;
        }
      }
    }
  }
  return out;
}

inline std::vector<real> per_image_ce(const Classifier& clf, const Tensor& images,
                                      const std::vector<int>& labels) {
  Tensor logits = clf.logits_values(images);
  Tensor probs = nn::softmax_values(logits);
  std::vector<real> out(static_cast<std::size_t>(images.dim(0)));
  const std::int64_t c = logits.dim(1);
  for (std::int64_t b = 0; b < images.dim(0); ++b)
    out[static_cast<std::size_t>(b)] =
        -std::log(std::max<real>(probs.at(b * c + labels[static_cast<std::size_t>(b)]), 1e-30));
  return out;
}

}  // namespace detail

/// Grid search over small rotations/translations; per image, the candidate
/// with the highest victim loss wins.
inline Tensor spatial_attack(const Classifier& clf, const Tensor& images,
                             const std::vector<int>& labels, const SpatialGrid& grid) {
  MD_CHECK(!grid.rotations_deg.empty() && !grid.dx.empty() && !grid.dy.empty(), ConfigError,
           "spatial grid is empty");
  const std::int64_t n = images.dim(0), stride = detail::image_stride(images);
  Tensor best = images.clone();
  std::vector<real> best_loss(static_cast<std::size_t>(n), -1e30);
  for (real rot : grid.rotations_deg) {
    for (int dx : grid.dx) {
      for (int dy : grid.dy) {
        Tensor cand = (rot == 0 && dx == 0 && dy == 0) ? images.clone()
                                                       : detail::warp(images, rot, dx, dy);
        auto losses = detail::per_image_ce(clf, cand, labels);
        for (std::int64_t b = 0; b < n; ++b) {
          if (losses[static_cast<std::size_t>(b)] > best_loss[static_cast<std::size_t>(b)]) {
            best_loss[static_cast<std::size_t>(b)] = losses[static_cast<std::size_t>(b)];
            std::copy(cand.data() + b * stride, cand.data() + (b + 1) * stride,
                      best.data() + b * stride);
          }
        }
      }
    }
  }
  return best;
}

// -- success filtering ---------------------------------------------------------------

struct FilterResult {
  std::vector<std::int64_t> kept;
  real kept_fraction = 0;
};

/// Keeps exactly the adversarials the victim misclassifies.
inline FilterResult filter_successful(const Classifier& clf, const Tensor& originals,
                                      const Tensor& adversarials, const std::vector<int>& labels,
                                      std::int64_t shard = 256) {
  MD_CONTRACT(originals.shape() == adversarials.shape(), "filter: image sets misaligned");
  MD_CONTRACT(originals.dim(0) == static_cast<std::int64_t>(labels.size()),
              "filter: label count mismatch");
  FilterResult out;
  const std::int64_t n = adversarials.dim(0);
  for (std::int64_t at = 0; at < n; at += shard) {
    const std::int64_t k = std::min(shard, n - at);
    Tensor chunk = victims::VictimClassifier::slice_images(adversarials, at, k);
    auto pred = clf.predict(chunk);
    for (std::int64_t i = 0; i < k; ++i)
      if (pred[static_cast<std::size_t>(i)] != labels[static_cast<std::size_t>(at + i)])
        out.kept.push_back(at + i);
  }
  out.kept_fraction = n ? static_cast<real>(out.kept.size()) / static_cast<real>(n) : 0;
  return out;
}

}  // namespace metadet::attacks
