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

#include <string>
#include <vector>

#include "metadet/autograd.hpp"

// Layer compositions. Everything is expressed through the autograd primitives,
// so every layer (batch statistics included) supports arbitrary-order
// differentiation without special cases.

namespace metadet::nn {

using ag::Var;

constexpr real kBnEps = 1e-5;

/// Convolution as im2col + GEMM. Input [N,Cin,H,W], weight [Cout,Cin,kh,kw].
/// Returns the pre-permutation matrix form [Cout, N*Ho*Wo] so that batch
/// normalization can run channel-wise without extra reshuffles; callers go
/// back to NCHW with ag::cols_to_nchw.
inline Var conv2d_cols(const Var& x, const Var& weight, std::int64_t stride, std::int64_t pad,
                       ag::ConvGeom* geom_out = nullptr) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  MD_CONTRACT(xs.size() == 4 && ws.size() == 4, "conv2d: NCHW input and OIHW weight required");
  MD_CONTRACT(xs[1] == ws[1], "conv2d: channel mismatch");
  ag::ConvGeom geom{xs[0], xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad};
  if (geom_out) *geom_out = geom;
  Var cols = ag::im2col(x, geom);
  Var w2 = ag::reshape(weight, {ws[0], ws[1] * ws[2] * ws[3]});
  return ag::matmul(w2, cols);
}

/// Batch normalization over the channel-major matrix [C, N*H*W] using the
/// statistics of the current batch. Optionally reports them (as plain
/// tensors) so a caller can maintain running statistics.
inline Var batchnorm_cols(const Var& x, const Var& gamma, const Var& beta,
                          Tensor* batch_mean = nullptr, Tensor* batch_var = nullptr) {
  const std::int64_t c = x.shape()[0], n = x.shape()[1];
  MD_CONTRACT(gamma.shape() == Shape{c} && beta.shape() == Shape{c},
              "batchnorm: gamma/beta must be [C]");
  const real inv_n = real{1} / static_cast<real>(n);
  Var mean = ag::muls(ag::row_sum(x), inv_n);
  Var centered = ag::sub(x, ag::expand_cols(mean, n));
  Var var = ag::muls(ag::row_sum(ag::mul(centered, centered)), inv_n);
  if (batch_mean) *batch_mean = mean.value().clone();
  if (batch_var) *batch_var = var.value().clone();
  Var inv_std = ag::div(Var::constant(Tensor::full({c}, 1)), ag::sqrt(ag::adds(var, kBnEps)));
  Var normalized = ag::mul(centered, ag::expand_cols(inv_std, n));
  return ag::add(ag::mul(normalized, ag::expand_cols(gamma, n)),
                 ag::expand_cols(beta, n));
}

/// Batch normalization with frozen statistics: an affine map per channel.
inline Var batchnorm_cols_frozen(const Var& x, const Var& gamma, const Var& beta,
                                 const Tensor& running_mean, const Tensor& running_var) {
  const std::int64_t c = x.shape()[0], n = x.shape()[1];
  Var scale = ag::div(gamma, ag::sqrt(ag::adds(Var::constant(running_var.clone()), kBnEps)));
  Var shift = ag::sub(beta, ag::mul(scale, Var::constant(running_mean.clone())));
  return ag::add(ag::mul(x, ag::expand_cols(scale, n)), ag::expand_cols(shift, n));
}

/// Fully connected layer: x [N,F] -> [N,out].
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  MD_CONTRACT(x.shape()[1] == weight.shape()[1], "linear: feature dim mismatch");
  return ag::add(ag::matmul(x, ag::transpose(weight)), ag::expand_rows(bias, x.shape()[0]));
}

/// Mean softmax cross entropy for integer labels. Stable via a constant
/// row-max shift, which leaves all derivatives exact.
inline Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const std::int64_t n = logits.shape()[0], c = logits.shape()[1];
  MD_CONTRACT(static_cast<std::int64_t>(labels.size()) == n, "cross_entropy: label count");
  Tensor shift({n, c});
  Tensor onehot({n, c});
  const real* pl = logits.value().data();
  for (std::int64_t i = 0; i < n; ++i) {
    MD_CONTRACT(labels[static_cast<std::size_t>(i)] >= 0 &&
                    labels[static_cast<std::size_t>(i)] < c,
                "cross_entropy: label out of range");
    real m = pl[i * c];
    for (std::int64_t j = 1; j < c; ++j) m = std::max(m, pl[i * c + j]);
    for (std::int64_t j = 0; j < c; ++j) shift.at(i * c + j) = m;
    onehot.at(i * c + labels[static_cast<std::size_t>(i)]) = 1;
  }
  Var shifted = ag::sub(logits, Var::constant(std::move(shift)));
  Var lse = ag::log(ag::row_sum(ag::exp(shifted)));           // [n], shifted log-sum-exp
  Var zy = ag::row_sum(ag::mul(shifted, Var::constant(std::move(onehot))));
  return ag::muls(ag::sum_all(ag::sub(lse, zy)), real{1} / static_cast<real>(n));
}

/// Row-wise softmax probabilities as plain values (inference helper).
inline Tensor softmax_values(const Tensor& logits) {
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  Tensor out({n, c});
  for (std::int64_t i = 0; i < n; ++i) {
    real m = logits.at(i * c);
    for (std::int64_t j = 1; j < c; ++j) m = std::max(m, logits.at(i * c + j));
    real s = 0;
    for (std::int64_t j = 0; j < c; ++j) s += std::exp(logits.at(i * c + j) - m);
    for (std::int64_t j = 0; j < c; ++j) out.at(i * c + j) = std::exp(logits.at(i * c + j) - m) / s;
  }
  return out;
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j)
      if (logits.at(i * c + j) > logits.at(i * c + best)) best = j;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

// -- parameter bookkeeping ----------------------------------------------------

struct ParamDef {
  std::string name;
  Shape dims;
  real init_std = 0;  // 0 -> constant init with init_const
  real init_const = 0;
};

inline ParamList init_params(const std::vector<ParamDef>& defs, Rng& rng) {
  ParamList out;
  out.reserve(defs.size());
  for (const auto& d : defs) {
    if (d.init_std > 0)
      out.push_back(Tensor::randn(d.dims, rng, d.init_std));
    else
      out.push_back(Tensor::full(d.dims, d.init_const));
  }
  return out;
}

inline std::vector<Var> as_leaves(const ParamList& params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const auto& t : params) out.push_back(Var::leaf(t, true));
  return out;
}

inline ParamList values_of(const std::vector<Var>& vars) {
  ParamList out;
  out.reserve(vars.size());
  for (const auto& v : vars) out.push_back(v.value());
  return out;
}

/// One plain gradient-descent step: p - lr * g, as fresh tensors.
inline ParamList sgd_step(const ParamList& params, const std::vector<Var>& grads, real lr) {
  MD_CONTRACT(params.size() == grads.size(), "sgd_step: arity mismatch");
  ParamList out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    out.push_back(add_scaled(params[i], grads[i].value(), -lr));
  return out;
}

/// SGD with classical momentum, in-place on params (victim/baseline training).
struct MomentumSgd {
  real lr;
  real momentum;
  std::vector<Tensor> velocity;

  void step(ParamList& params, const std::vector<Var>& grads) {
    if (velocity.empty())
      for (const auto& p : params) velocity.push_back(Tensor::zeros(p.shape()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& v = velocity[i];
      const Tensor& g = grads[i].value();
      for (std::int64_t j = 0; j < v.numel(); ++j)
        v.at(j) = momentum * v.at(j) + g.at(j);
      add_scaled_inplace(params[i], v, -lr);
    }
  }
};

/// Adam on a single tensor (used by the C&W attack's inner optimizer).
struct Adam {
  real lr = 1e-2;
  real beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  Tensor m, v;
  std::int64_t t = 0;

  void step(Tensor& x, const Tensor& g) {
    if (!m.defined()) {
      m = Tensor::zeros(x.shape());
      v = Tensor::zeros(x.shape());
    }
    ++t;
    const real bc1 = 1 - std::pow(beta1, static_cast<real>(t));
    const real bc2 = 1 - std::pow(beta2, static_cast<real>(t));
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      m.at(i) = beta1 * m.at(i) + (1 - beta1) * g.at(i);
      v.at(i) = beta2 * v.at(i) + (1 - beta2) * g.at(i) * g.at(i);
      x.at(i) -= lr * (m.at(i) / bc1) / (std::sqrt(v.at(i) / bc2) + eps);
    }
  }
};

}  // namespace metadet::nn
