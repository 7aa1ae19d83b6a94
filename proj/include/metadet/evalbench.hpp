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
#include <numeric>

#include "metadet/tasks.hpp"

// Few-shot evaluation: every test task independently fine-tunes a copy of the
// master detector on its support set, predicts its query set, and scores an
// F1 with the real class as positive. The benchmark-level score is the plain
// mean over tasks. Also houses the benchmark protocol definitions, the
// combined classifier+detector model, and white-box example generation.

namespace metadet::evalbench {

using ag::Var;
using io::json;

// -- F1 ---------------------------------------------------------------------------

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

/// positive = real examples (label 1 under the fixed-way convention).
inline ConfusionCounts confusion(const std::vector<int>& predictions,
                                 const std::vector<int>& truth, int positive_label = 1) {
  MD_CONTRACT(predictions.size() == truth.size(), "confusion: length mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool pred_pos = predictions[i] == positive_label;
    const bool true_pos = truth[i] == positive_label;
    if (pred_pos && true_pos)
      ++c.tp;
    else if (pred_pos && !true_pos)
      ++c.fp;
    else if (!pred_pos && true_pos)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

/// F1 = 2PR/(P+R); any zero denominator yields 0 so the metric is total.
inline real f1_from_counts(const ConfusionCounts& c) {
  if (c.tp + c.fp == 0 || c.tp + c.fn == 0) return 0;
  const real precision = static_cast<real>(c.tp) / static_cast<real>(c.tp + c.fp);
  const real recall = static_cast<real>(c.tp) / static_cast<real>(c.tp + c.fn);
  if (precision + recall == 0) return 0;
  return 2 * precision * recall / (precision + recall);
}

inline real f1_score(const std::vector<int>& predictions, const std::vector<int>& truth,
                     int positive_label = 1) {
  return f1_from_counts(confusion(predictions, truth, positive_label));
}

// -- per-task adaptation -------------------------------------------------------------

/// `steps` gradient-descent steps on the support set, starting from a copy of
/// the master; the master itself is never touched.
inline ParamList fine_tune(const Conv3Detector& net, const ParamList& master,
                           const meta::LabeledBatch& support, int steps, real lr) {
  auto traj = meta::inner_update(master, meta::detector_loss(net, support), lr, steps,
                                 /*keep_trajectory=*/false);
  return traj.adapted();
}

struct EvalOptions {
  int finetune_steps = 20;
  real lr = 0.001;
};

struct EvaluationReport {
  json protocol_meta;
  std::vector<real> per_task_f1;
  real mean_f1 = 0;
  std::map<std::string, std::pair<real, std::int64_t>> per_adversary;  // mean, task count
  std::int64_t failed_tasks = 0;
  real eval_seconds = 0;
  json hashes;

  json to_json() const {
    json adv = json::object();
    for (const auto& [name, mc] : per_adversary)
      adv[name] = {{"mean_f1", mc.first}, {"tasks", mc.second}};
    return {{"protocol", protocol_meta},
            {"per_task_f1", per_task_f1},
            {"mean_f1", mean_f1},
            {"per_adversary", adv},
            {"failed_tasks", failed_tasks},
            {"timing", {{"eval_seconds", eval_seconds}}},
            {"hashes", hashes}};
  }
};

/// Algorithm-2 style evaluation over every task of a pool.
inline EvaluationReport evaluate(const Conv3Detector& net, const ParamList& master,
                                 const attacks::AdvExampleSet& set, const tasks::TaskPool& pool,
                                 const EvalOptions& opt) {
  MD_CONTRACT(!pool.tasks.empty(), "evaluate: empty task stream");
  EvaluationReport report;
  std::map<std::string, std::pair<real, std::int64_t>> acc;
  const auto t0 = std::chrono::steady_clock::now();

  for (const auto& task : pool.tasks) {
    auto m = tasks::materialize(set, pool, task);
    real score = 0;
    try {
      ParamList adapted = opt.finetune_steps > 0
                              ? fine_tune(net, master, m.support, opt.finetune_steps, opt.lr)
                              : master;
      Tensor logits = net.logits_values(adapted, m.query.images);
      auto pred = nn::argmax_rows(logits);
      score = f1_score(pred, m.query.labels, /*positive_label=*/m.real_way_label);
    } catch (const TrainError&) {
      ++report.failed_tasks;  // counted, scored 0
    }
    report.per_task_f1.push_back(score);
    auto& slot = acc[m.adversary];
    slot.first += score;
    ++slot.second;
  }

  report.eval_seconds =
      std::chrono::duration<real>(std::chrono::steady_clock::now() - t0).count();
  report.mean_f1 =
      std::accumulate(report.per_task_f1.begin(), report.per_task_f1.end(), real{0}) /
      static_cast<real>(report.per_task_f1.size());
  for (auto& [name, mc] : acc)
    report.per_adversary[name] = {mc.first / static_cast<real>(mc.second), mc.second};
  report.hashes = {{"advset", set.manifest_hash()}, {"pool", pool.advset_hash}};
  return report;
}

// -- benchmark protocols ----------------------------------------------------------------

enum class ProtocolKind { cross_adversary, cross_domain, cross_architecture, white_box };

inline std::string kind_name(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::cross_adversary: return "cross-adversary";
    case ProtocolKind::cross_domain: return "cross-domain";
    case ProtocolKind::cross_architecture: return "cross-architecture";
    case ProtocolKind::white_box: return "white-box";
  }
  return "?";
}

inline std::vector<std::string> all_implemented() {
  return {"FGSM", "MI-FGSM", "BIM", "PGD", "CW", "DeepFool", "semantic", "spatial"};
}

/// Paper-defined adversary groups, restricted to the implemented subset.
inline std::vector<std::string> implemented_train_group() {
  return {"FGSM", "MI-FGSM", "BIM", "PGD", "CW"};
}
inline std::vector<std::string> implemented_test_group() {
  return {"semantic", "DeepFool", "spatial"};
}

struct BenchmarkProtocol {
  ProtocolKind kind = ProtocolKind::cross_adversary;
  data::Domain train_domain = data::Domain::MNIST;
  data::Domain test_domain = data::Domain::MNIST;
  VictimArch train_arch = VictimArch::conv4;
  VictimArch test_arch = VictimArch::conv4;
  std::vector<std::string> train_adversaries;
  std::vector<std::string> test_adversaries;
  std::string validation_adversary;  // held out of the train group
  int shots = 1;
  int finetune_steps = 20;
  std::int64_t test_tasks = 1000;
  std::string white_box_adversary;  // "I-FGSM" or "CW"

  json to_json() const {
    return {{"kind", kind_name(kind)},
            {"train_domain", data::domain_name(train_domain)},
            {"test_domain", data::domain_name(test_domain)},
            {"train_arch", arch_name(train_arch)},
            {"test_arch", arch_name(test_arch)},
            {"train_adversaries", train_adversaries},
            {"test_adversaries", test_adversaries},
            {"validation_adversary", validation_adversary},
            {"shots", shots},
            {"finetune_steps", finetune_steps},
            {"test_tasks", test_tasks},
            {"white_box_adversary", white_box_adversary}};
  }
};

struct ProtocolSpec {
  data::Domain domain = data::Domain::MNIST;
  data::Domain test_domain = data::Domain::MNIST;  // cross-domain only
  VictimArch arch = VictimArch::conv4;
  VictimArch test_arch = VictimArch::conv4;  // cross-architecture only
  int shots = 1;
  std::int64_t test_tasks = 1000;
  std::string validation_adversary = "MI-FGSM";
  std::vector<std::string> train_adversaries;  // optional overrides
  std::vector<std::string> test_adversaries;
  std::string white_box_adversary = "I-FGSM";
};

inline BenchmarkProtocol make_protocol(ProtocolKind kind, const ProtocolSpec& spec) {
  MD_CHECK(spec.shots == 1 || spec.shots == 5, ProtocolError, "shots must be 1 or 5");
  BenchmarkProtocol p;
  p.kind = kind;
  p.shots = spec.shots;
  p.test_tasks = spec.test_tasks;
  p.train_domain = spec.domain;
  p.test_domain = spec.domain;
  p.train_arch = spec.arch;
  p.test_arch = spec.arch;

  switch (kind) {
    case ProtocolKind::cross_adversary: {
      p.train_adversaries =
          spec.train_adversaries.empty() ? implemented_train_group() : spec.train_adversaries;
      p.test_adversaries =
          spec.test_adversaries.empty() ? implemented_test_group() : spec.test_adversaries;
      for (const auto& a : p.train_adversaries)
        for (const auto& b : p.test_adversaries)
          MD_CHECK(a != b, ProtocolError,
                   "adversary " + a + " appears in both groups; each adversary belongs to one");
      p.validation_adversary = spec.validation_adversary;
      if (!p.validation_adversary.empty()) {
        auto it = std::find(p.train_adversaries.begin(), p.train_adversaries.end(),
                            p.validation_adversary);
        MD_CHECK(it != p.train_adversaries.end(), ProtocolError,
                 "validation adversary must come from the train group");
        p.train_adversaries.erase(it);  // held out
      }
      break;
    }
    case ProtocolKind::cross_domain: {
      MD_CHECK(spec.test_domain != spec.domain, ProtocolError,
               "cross-domain needs two distinct domains");
      p.test_domain = spec.test_domain;
      p.train_adversaries =
          spec.train_adversaries.empty() ? all_implemented() : spec.train_adversaries;
      p.test_adversaries = p.train_adversaries;  // all attacks on both sides
      break;
    }
    case ProtocolKind::cross_architecture: {
      MD_CHECK(spec.test_arch != spec.arch, ProtocolError,
               "cross-architecture needs two distinct architectures");
      p.test_arch = spec.test_arch;
      p.train_adversaries =
          spec.train_adversaries.empty() ? all_implemented() : spec.train_adversaries;
      p.test_adversaries = p.train_adversaries;
      break;
    }
    case ProtocolKind::white_box: {
      MD_CHECK(spec.white_box_adversary == "I-FGSM" || spec.white_box_adversary == "CW",
               ProtocolError, "white-box adversary must be I-FGSM or CW");
      p.white_box_adversary = spec.white_box_adversary;
      p.test_adversaries = {spec.white_box_adversary + "-wb"};
      break;
    }
  }
  return p;
}

// -- combined model (white-box benchmark) ------------------------------------------------

/// B = classifier C (N logits) + detector D (probability the input is
/// adversarial) fused into N+1 logits. When max Z_C is not positive the
/// classifier logits are shifted per image to make it positive; the shift
/// preserves argmax Z_C and is reported through `last_shift`.
struct CombinedModel {
  attacks::Classifier classifier;        // C
  const Conv3Detector* detector = nullptr;
  ParamList detector_params;             // D: the frozen master network
  int adversarial_label = 0;             // fixed-way convention

  Var combined_graph(const Var& images) const {
    Var zc = classifier.logits(images);
    const std::int64_t n = zc.shape()[0], classes = zc.shape()[1];

    Var det_logits = detector->forward(nn::as_leaves(detector_params), images);
    Var probs = softmax_rows(det_logits);
    Var zd = ag::slice_cols(probs, adversarial_label, 1);  // [n,1]

    Var m = ag::row_max(zc);  // [n]
    // shift only rows whose max is not positive (mask is a constant)
    Tensor mask({n});
    for (std::int64_t i = 0; i < n; ++i) mask.at(i) = m.value().at(i) <= 0 ? 1 : 0;
    Var shift = ag::mul(Var::constant(mask),
                        ag::sub(ag::spread(Var::constant(Tensor::scalar(1)), {n}), m));
    Var zc_shifted = ag::add(zc, ag::expand_cols(shift, classes));
    Var m_pos = ag::add(m, shift);
    Var last = ag::mul(zd, ag::reshape(ag::muls(m_pos, 2), {n, 1}));
    return ag::concat_cols(zc_shifted, last);
  }

  Tensor combined_values(const Tensor& images) const {
    ag::NoGradGuard ng;
    return combined_graph(Var::constant(images)).value();
  }

  attacks::Classifier as_classifier() const {
    return attacks::Classifier{classifier.num_classes + 1,
                               [this](const Var& x) { return combined_graph(x); }};
  }

  static Var softmax_rows(const Var& logits) {
    const std::int64_t c = logits.shape()[1];
    Tensor mx({logits.shape()[0], c});
    for (std::int64_t i = 0; i < logits.shape()[0]; ++i) {
      real m = logits.value().at(i * c);
      for (std::int64_t j = 1; j < c; ++j) m = std::max(m, logits.value().at(i * c + j));
      for (std::int64_t j = 0; j < c; ++j) mx.at(i * c + j) = m;
    }
    Var e = ag::exp(ag::sub(logits, Var::constant(std::move(mx))));
    Var denom = ag::expand_cols(ag::row_sum(e), c);
    return ag::div(e, denom);
  }
};

/// Z_B on plain logit/probability values (property-test surface).
inline std::vector<real> combined_logits_row(const std::vector<real>& zc, real zd) {
  real m = zc[0];
  for (real v : zc) m = std::max(m, v);
  const real shift = m <= 0 ? 1 - m : 0;
  std::vector<real> out;
  out.reserve(zc.size() + 1);
  for (real v : zc) out.push_back(v + shift);
  out.push_back(zd * 2 * (m + shift));
  return out;
}

// -- white-box generation -------------------------------------------------------------

struct WhiteBoxResult {
  Tensor images;
  std::vector<int> targets;
  std::vector<bool> success;
  std::int64_t success_count = 0;
};

/// Targeted attack on the combined model toward the classifier's least-likely
/// class (never the original label, never the +1 detector class). Success
/// means the combined argmax equals the target.
inline WhiteBoxResult white_box_generate(const CombinedModel& model, const Tensor& images,
                                         const std::vector<int>& labels,
                                         const std::string& adversary,
                                         const attacks::AttackBudget& budget) {
  const std::int64_t n = images.dim(0);
  const int classes = model.classifier.num_classes;
  WhiteBoxResult result;
  result.targets.resize(static_cast<std::size_t>(n));

  // least-likely class of Z_C, bumped off the true label if they collide
  Tensor zc = model.classifier.logits_values(images);
  for (std::int64_t i = 0; i < n; ++i) {
    int t = 0;
    for (int j = 1; j < classes; ++j)
      if (zc.at(i * classes + j) < zc.at(i * classes + t)) t = j;
    if (t == labels[static_cast<std::size_t>(i)]) {
      int second = t == 0 ? 1 : 0;
      for (int j = 0; j < classes; ++j)
        if (j != t && zc.at(i * classes + j) < zc.at(i * classes + second)) second = j;
      t = second;
    }
    MD_CONTRACT(t != labels[static_cast<std::size_t>(i)], "white-box target equals the label");
    result.targets[static_cast<std::size_t>(i)] = t;
  }

  attacks::Classifier combined = model.as_classifier();
  if (adversary == "I-FGSM") {
    Tensor x = images.clone();
    for (int it = 0; it < budget.iterations; ++it) {
      Var leaf = Var::leaf(x, true);
      Var loss = nn::cross_entropy(combined.logits(leaf), result.targets);
      Tensor g = ag::grad(loss, {leaf})[0].value();
      MD_CHECK(g.all_finite(), AttackError, "non-finite white-box gradient");
      for (std::int64_t i = 0; i < x.numel(); ++i)
        x.at(i) -= budget.step_size * (g.at(i) > 0 ? 1 : (g.at(i) < 0 ? -1 : 0));
      attacks::detail::clip_ball_inplace(x, images, budget.epsilon);
    }
    result.images = x;
  } else if (adversary == "CW") {
    result.images = attacks::cw_l2_targeted(combined, images, result.targets, budget).images;
  } else {
    throw ConfigError("unknown white-box adversary: " + adversary);
  }

  auto pred = combined.predict(result.images);
  result.success.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const bool ok = pred[static_cast<std::size_t>(i)] == result.targets[static_cast<std::size_t>(i)];
    result.success[static_cast<std::size_t>(i)] = ok;
    if (ok) ++result.success_count;
  }
  return result;
}

// -- inference timing -----------------------------------------------------------------

struct TimingStats {
  real mean_ms = 0;
  real std_ms = 0;
  int repetitions = 0;

  json to_json() const {
    return {{"mean_ms", mean_ms}, {"std_ms", std_ms}, {"repetitions", repetitions}};
  }
};

/// Wall-clock forward timing, fine-tuning excluded; one warm-up pass first.
inline TimingStats measure_inference(const Conv3Detector& net, const ParamList& params,
                                     const Tensor& batch, int repetitions) {
  MD_CONTRACT(repetitions >= 1, "measure_inference: need at least one repetition");
  (void)net.logits_values(params, batch);  // warm-up
  std::vector<real> samples;
  samples.reserve(static_cast<std::size_t>(repetitions));
  for (int r = 0; r < repetitions; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)net.logits_values(params, batch);
    const auto t1 = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<real, std::milli>(t1 - t0).count());
  }
  TimingStats ts;
  ts.repetitions = repetitions;
  for (real s : samples) ts.mean_ms += s;
  ts.mean_ms /= static_cast<real>(repetitions);
  for (real s : samples) ts.std_ms += (s - ts.mean_ms) * (s - ts.mean_ms);
  ts.std_ms = repetitions > 1 ? std::sqrt(ts.std_ms / static_cast<real>(repetitions)) : 0;
  return ts;
}

}  // namespace metadet::evalbench
