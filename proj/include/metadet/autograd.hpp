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

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "metadet/tensor.hpp"

// Reverse-mode automatic differentiation over Tensor. The design rule that
// makes higher-order gradients work: every primitive's backward is itself
// written in terms of these primitives, so differentiating a gradient graph
// is just another backward pass. grad(..., /*create_graph=*/true) returns
// gradients that are differentiable functions of the leaves.

namespace metadet::ag {

class Var;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> parents;
  // Maps the gradient w.r.t. this node's output to gradients w.r.t. parents.
  std::function<std::vector<Var>(const Var&)> backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Var leaf(Tensor t, bool requires_grad = true) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  static Var constant(Tensor t) { return leaf(std::move(t), false); }

  bool defined() const { return static_cast<bool>(n_); }
  const Tensor& value() const { return n_->value; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  const Shape& shape() const { return n_->value.shape(); }
  std::int64_t numel() const { return n_->value.numel(); }
  Node* node() const { return n_.get(); }

  /// Value as a fresh constant, cut from the graph.
  Var detach() const { return constant(n_->value); }

 private:
  std::shared_ptr<Node> n_;
};

/// Thread-local recording switch (mirrors the usual grad-mode idiom).
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }

 private:
  bool prev_;
};

struct GradModeGuard {
  explicit GradModeGuard(bool on) : prev_(grad_mode()) { grad_mode() = on; }
  ~GradModeGuard() { grad_mode() = prev_; }

 private:
  bool prev_;
};

namespace detail {
inline Var make_op(Tensor value, std::vector<Var> parents,
                   std::function<std::vector<Var>(const Var&)> backward) {
  bool track = grad_mode();
  if (track) {
    track = false;
    for (const auto& p : parents)
      if (p.requires_grad()) {
        track = true;
        break;
      }
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (track) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}
}  // namespace detail

// -- elementwise binary ------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);

inline Var add(const Var& a, const Var& b) {
  MD_CONTRACT(a.value().same_shape(b.value()), "add: shape mismatch");
  Tensor out(a.shape());
  const real* pa = a.value().data();
  const real* pb = b.value().data();
  real* po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  return detail::make_op(std::move(out), {a, b},
                         [](const Var& g) { return std::vector<Var>{g, g}; });
}

inline Var sub(const Var& a, const Var& b) {
  MD_CONTRACT(a.value().same_shape(b.value()), "sub: shape mismatch");
  Tensor out(a.shape());
  const real* pa = a.value().data();
  const real* pb = b.value().data();
  real* po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  return detail::make_op(std::move(out), {a, b},
                         [](const Var& g) { return std::vector<Var>{g, neg(g)}; });
}

inline Var mul(const Var& a, const Var& b) {
  MD_CONTRACT(a.value().same_shape(b.value()), "mul: shape mismatch");
  Tensor out(a.shape());
  const real* pa = a.value().data();
  const real* pb = b.value().data();
  real* po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  return detail::make_op(std::move(out), {a, b}, [a, b](const Var& g) {
    // skip sibling gradients nobody asked for (constants are common here)
    Var da = a.requires_grad() ? mul(g, b) : Var();
    Var db = b.requires_grad() ? mul(g, a) : Var();
    return std::vector<Var>{da, db};
  });
}

inline Var div(const Var& a, const Var& b) {
  MD_CONTRACT(a.value().same_shape(b.value()), "div: shape mismatch");
  Tensor out(a.shape());
  const real* pa = a.value().data();
  const real* pb = b.value().data();
  real* po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
  return detail::make_op(std::move(out), {a, b}, [a, b](const Var& g) {
    Var da = a.requires_grad() ? div(g, b) : Var();
    Var db = b.requires_grad() ? neg(div(mul(g, a), mul(b, b))) : Var();
    return std::vector<Var>{da, db};
  });
}

inline Var neg(const Var& a) {
  Tensor out(a.shape());
  const real* pa = a.value().data();
  real* po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = -pa[i];
  return detail::make_op(std::move(out), {a},
                         [](const Var& g) { return std::vector<Var>{neg(g)}; });
}

// -- scalar-constant ops -----------------------------------------------------

inline Var muls(const Var& a, real c) {
  Tensor out(a.shape());
  const real* pa = a.value().data();
  real* po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  return detail::make_op(std::move(out), {a},
                         [c](const Var& g) { return std::vector<Var>{muls(g, c)}; });
}

inline Var adds(const Var& a, real c) {
  Tensor out(a.shape());
  const real* pa = a.value().data();
  real* po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + c;
  return detail::make_op(std::move(out), {a},
                         [](const Var& g) { return std::vector<Var>{g}; });
}

// -- elementwise unary -------------------------------------------------------

inline Var exp(const Var& a) {
  Tensor out(a.shape());
  const real* pa = a.value().data();
  real* po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = std::exp(pa[i]);
  // Backward recomputes exp(a) from the parent so the gradient stays a
  // function of `a` under create_graph (capturing the output would both
  // freeze it to a constant and create a reference cycle).
  return detail::make_op(std::move(out), {a}, [a](const Var& g) {
    return std::vector<Var>{mul(g, exp(a))};
  });
}

inline Var log(const Var& a) {
  Tensor out(a.shape());
  const real* pa = a.value().data();
  real* po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = std::log(pa[i]);
  return detail::make_op(std::move(out), {a}, [a](const Var& g) {
    return std::vector<Var>{div(g, a)};
  });
}

inline Var sqrt(const Var& a) {
  Tensor out(a.shape());
  const real* pa = a.value().data();
  real* po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = std::sqrt(pa[i]);
  return detail::make_op(std::move(out), {a}, [a](const Var& g) {
    return std::vector<Var>{muls(div(g, sqrt(a)), 0.5)};
  });
}

inline Var relu(const Var& a) {
  Tensor out(a.shape());
  Tensor mask(a.shape());
  const real* pa = a.value().data();
  real* po = out.data();
  real* pm = mask.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const bool pos = pa[i] > 0;
    po[i] = pos ? pa[i] : 0;
    pm[i] = pos ? 1 : 0;
  }
  Var mask_c = Var::constant(std::move(mask));
  return detail::make_op(std::move(out), {a}, [mask_c](const Var& g) {
    return std::vector<Var>{mul(g, mask_c)};
  });
}

// -- structural ---------------------------------------------------------------

inline Var reshape(const Var& a, Shape dims) {
  Tensor out = a.value().reshaped(dims);
  Shape orig = a.shape();
  return detail::make_op(std::move(out), {a}, [orig](const Var& g) {
    return std::vector<Var>{reshape(g, orig)};
  });
}

// -- matrix ops ---------------------------------------------------------------

inline Var transpose(const Var& a) {
  MD_CONTRACT(a.value().rank() == 2, "transpose: rank-2 required");
  Tensor out({a.shape()[1], a.shape()[0]});
  out.mat().noalias() = a.value().mat().transpose();
  return detail::make_op(std::move(out), {a},
                         [](const Var& g) { return std::vector<Var>{transpose(g)}; });
}

inline Var matmul(const Var& a, const Var& b) {
  MD_CONTRACT(a.value().rank() == 2 && b.value().rank() == 2, "matmul: rank-2 required");
  MD_CONTRACT(a.shape()[1] == b.shape()[0], "matmul: inner dims differ");
  Tensor out({a.shape()[0], b.shape()[1]});
  out.mat().noalias() = a.value().mat() * b.value().mat();
  return detail::make_op(std::move(out), {a, b}, [a, b](const Var& g) {
    Var da = a.requires_grad() ? matmul(g, transpose(b)) : Var();
    Var db = b.requires_grad() ? matmul(transpose(a), g) : Var();
    return std::vector<Var>{da, db};
  });
}

// -- reductions & broadcasts --------------------------------------------------

Var spread(const Var& a, Shape dims);

inline Var sum_all(const Var& a) {
  real s = 0;
  const real* pa = a.value().data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) s += pa[i];
  Shape dims = a.shape();
  return detail::make_op(Tensor::scalar(s), {a}, [dims](const Var& g) {
    return std::vector<Var>{spread(g, dims)};
  });
}

/// Broadcast a scalar [1] to an arbitrary shape (adjoint of sum_all).
inline Var spread(const Var& a, Shape dims) {
  MD_CONTRACT(a.numel() == 1, "spread: scalar input required");
  Tensor out = Tensor::full(dims, a.value().item());
  return detail::make_op(std::move(out), {a}, [](const Var& g) {
    return std::vector<Var>{sum_all(g)};
  });
}

Var expand_cols(const Var& v, std::int64_t n);
Var expand_rows(const Var& v, std::int64_t m);

/// [m,n] -> [m]: sum over columns.
inline Var row_sum(const Var& a) {
  MD_CONTRACT(a.value().rank() == 2, "row_sum: rank-2 required");
  const std::int64_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({m});
  const real* pa = a.value().data();
  for (std::int64_t i = 0; i < m; ++i) {
    real s = 0;
    const real* row = pa + i * n;
    for (std::int64_t j = 0; j < n; ++j) s += row[j];
    out.at(i) = s;
  }
  return detail::make_op(std::move(out), {a}, [n](const Var& g) {
    return std::vector<Var>{expand_cols(g, n)};
  });
}

/// [m,n] -> [n]: sum over rows.
inline Var col_sum(const Var& a) {
  MD_CONTRACT(a.value().rank() == 2, "col_sum: rank-2 required");
  const std::int64_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({n});
  const real* pa = a.value().data();
  real* po = out.data();
  for (std::int64_t i = 0; i < m; ++i) {
    const real* row = pa + i * n;
    for (std::int64_t j = 0; j < n; ++j) po[j] += row[j];
  }
  return detail::make_op(std::move(out), {a}, [m](const Var& g) {
    return std::vector<Var>{expand_rows(g, m)};
  });
}

/// [m] -> [m,n]: replicate as columns (adjoint of row_sum).
inline Var expand_cols(const Var& v, std::int64_t n) {
  MD_CONTRACT(v.value().rank() == 1, "expand_cols: rank-1 required");
  const std::int64_t m = v.shape()[0];
  Tensor out({m, n});
  const real* pv = v.value().data();
  real* po = out.data();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) po[i * n + j] = pv[i];
  return detail::make_op(std::move(out), {v},
                         [](const Var& g) { return std::vector<Var>{row_sum(g)}; });
}

/// [n] -> [m,n]: replicate as rows (adjoint of col_sum).
inline Var expand_rows(const Var& v, std::int64_t m) {
  MD_CONTRACT(v.value().rank() == 1, "expand_rows: rank-1 required");
  const std::int64_t n = v.shape()[0];
  Tensor out({m, n});
  const real* pv = v.value().data();
  real* po = out.data();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) po[i * n + j] = pv[j];
  return detail::make_op(std::move(out), {v},
                         [](const Var& g) { return std::vector<Var>{col_sum(g)}; });
}

Var slice_cols(const Var& a, std::int64_t from, std::int64_t count);

/// Column-wise concatenation [m,na] + [m,nb] -> [m,na+nb].
inline Var concat_cols(const Var& a, const Var& b) {
  MD_CONTRACT(a.value().rank() == 2 && b.value().rank() == 2 && a.shape()[0] == b.shape()[0],
              "concat_cols: row mismatch");
  const std::int64_t m = a.shape()[0], na = a.shape()[1], nb = b.shape()[1];
  Tensor out({m, na + nb});
  for (std::int64_t i = 0; i < m; ++i) {
    std::copy(a.value().data() + i * na, a.value().data() + (i + 1) * na,
              out.data() + i * (na + nb));
    std::copy(b.value().data() + i * nb, b.value().data() + (i + 1) * nb,
              out.data() + i * (na + nb) + na);
  }
  return detail::make_op(std::move(out), {a, b}, [na, nb](const Var& g) {
    return std::vector<Var>{slice_cols(g, 0, na), slice_cols(g, na, nb)};
  });
}

/// Column slice [m,n] -> [m,count]; adjoint embeds back with zero padding.
inline Var slice_cols(const Var& a, std::int64_t from, std::int64_t count) {
  MD_CONTRACT(a.value().rank() == 2 && from >= 0 && from + count <= a.shape()[1],
              "slice_cols: out of range");
  const std::int64_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({m, count});
  for (std::int64_t i = 0; i < m; ++i)
    std::copy(a.value().data() + i * n + from, a.value().data() + i * n + from + count,
              out.data() + i * count);
  return detail::make_op(std::move(out), {a}, [m, n, from, count](const Var& g) {
    // embed g into an [m,n] zero matrix via concatenation (stays differentiable)
    Var acc = g;
    if (from > 0) acc = concat_cols(Var::constant(Tensor::zeros({m, from})), acc);
    if (from + count < n)
      acc = concat_cols(acc, Var::constant(Tensor::zeros({m, n - from - count})));
    return std::vector<Var>{acc};
  });
}

/// Row-wise maximum of [m,n] -> [m]. Gradient routes to the (first) argmax.
inline Var row_max(const Var& a) {
  MD_CONTRACT(a.value().rank() == 2, "row_max: rank-2 required");
  const std::int64_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({m});
  Tensor mask({m, n});
  const real* pa = a.value().data();
  for (std::int64_t i = 0; i < m; ++i) {
    const real* row = pa + i * n;
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < n; ++j)
      if (row[j] > row[best]) best = j;
    out.at(i) = row[best];
    mask.at(i * n + best) = 1;
  }
  Var mask_c = Var::constant(std::move(mask));
  return detail::make_op(std::move(out), {a}, [mask_c, n](const Var& g) {
    return std::vector<Var>{mul(expand_cols(g, n), mask_c)};
  });
}

// -- convolution lowering ------------------------------------------------------

struct ConvGeom {
  std::int64_t batch, in_ch, in_h, in_w;
  std::int64_t kh, kw, stride, pad;
  std::int64_t out_h() const { return (in_h + 2 * pad - kh) / stride + 1; }
  std::int64_t out_w() const { return (in_w + 2 * pad - kw) / stride + 1; }
};

Var col2im(const Var& cols, ConvGeom geom);

/// [N,C,H,W] -> [C*kh*kw, N*Ho*Wo] patch matrix (zero padded).
inline Var im2col(const Var& x, ConvGeom geom) {
  MD_CONTRACT(x.value().rank() == 4, "im2col: NCHW input required");
  MD_CONTRACT(x.shape()[0] == geom.batch && x.shape()[1] == geom.in_ch &&
                  x.shape()[2] == geom.in_h && x.shape()[3] == geom.in_w,
              "im2col: geometry does not match input " + shape_str(x.shape()));
  const std::int64_t Ho = geom.out_h(), Wo = geom.out_w();
  const std::int64_t cols_n = geom.batch * Ho * Wo;
  Tensor out({geom.in_ch * geom.kh * geom.kw, cols_n});
  const real* px = x.value().data();
  real* po = out.data();
  const std::int64_t hw = geom.in_h * geom.in_w;
  for (std::int64_t c = 0; c < geom.in_ch; ++c) {
    for (std::int64_t ki = 0; ki < geom.kh; ++ki) {
      for (std::int64_t kj = 0; kj < geom.kw; ++kj) {
        real* orow = po + ((c * geom.kh + ki) * geom.kw + kj) * cols_n;
        for (std::int64_t b = 0; b < geom.batch; ++b) {
          const real* xc = px + (b * geom.in_ch + c) * hw;
          for (std::int64_t ho = 0; ho < Ho; ++ho) {
            const std::int64_t h = ho * geom.stride - geom.pad + ki;
            real* odst = orow + (b * Ho + ho) * Wo;
            if (h < 0 || h >= geom.in_h) {
              std::fill(odst, odst + Wo, real{0});
              continue;
            }
            const real* xrow = xc + h * geom.in_w;
            for (std::int64_t wo = 0; wo < Wo; ++wo) {
              const std::int64_t w = wo * geom.stride - geom.pad + kj;
              odst[wo] = (w >= 0 && w < geom.in_w) ? xrow[w] : real{0};
            }
          }
        }
      }
    }
  }
  return detail::make_op(std::move(out), {x}, [geom](const Var& g) {
    return std::vector<Var>{col2im(g, geom)};
  });
}

/// Adjoint of im2col: scatter-add patches back to [N,C,H,W].
inline Var col2im(const Var& cols, ConvGeom geom) {
  const std::int64_t Ho = geom.out_h(), Wo = geom.out_w();
  const std::int64_t cols_n = geom.batch * Ho * Wo;
  MD_CONTRACT(cols.value().rank() == 2 &&
                  cols.shape()[0] == geom.in_ch * geom.kh * geom.kw &&
                  cols.shape()[1] == cols_n,
              "col2im: column matrix does not match geometry");
  Tensor out({geom.batch, geom.in_ch, geom.in_h, geom.in_w});
  const real* pc = cols.value().data();
  real* po = out.data();
  const std::int64_t hw = geom.in_h * geom.in_w;
  for (std::int64_t c = 0; c < geom.in_ch; ++c) {
    for (std::int64_t ki = 0; ki < geom.kh; ++ki) {
      for (std::int64_t kj = 0; kj < geom.kw; ++kj) {
        const real* crow = pc + ((c * geom.kh + ki) * geom.kw + kj) * cols_n;
        for (std::int64_t b = 0; b < geom.batch; ++b) {
          real* xc = po + (b * geom.in_ch + c) * hw;
          for (std::int64_t ho = 0; ho < Ho; ++ho) {
            const std::int64_t h = ho * geom.stride - geom.pad + ki;
            if (h < 0 || h >= geom.in_h) continue;
            const real* csrc = crow + (b * Ho + ho) * Wo;
            real* xrow = xc + h * geom.in_w;
            for (std::int64_t wo = 0; wo < Wo; ++wo) {
              const std::int64_t w = wo * geom.stride - geom.pad + kj;
              if (w >= 0 && w < geom.in_w) xrow[w] += csrc[wo];
            }
          }
        }
      }
    }
  }
  return detail::make_op(std::move(out), {cols}, [geom](const Var& g) {
    return std::vector<Var>{im2col(g, geom)};
  });
}

Var nchw_to_cols(const Var& x);

/// [C, N*Ho*Wo] -> [N,C,Ho,Wo] (inverse of nchw_to_cols; pure permutation).
inline Var cols_to_nchw(const Var& a, std::int64_t batch, std::int64_t ho, std::int64_t wo) {
  MD_CONTRACT(a.value().rank() == 2 && a.shape()[1] == batch * ho * wo,
              "cols_to_nchw: column count mismatch");
  const std::int64_t ch = a.shape()[0];
  const std::int64_t plane = ho * wo;
  Tensor out({batch, ch, ho, wo});
  const real* pa = a.value().data();
  real* po = out.data();
  for (std::int64_t c = 0; c < ch; ++c) {
    const real* row = pa + c * batch * plane;
    for (std::int64_t b = 0; b < batch; ++b)
      std::copy(row + b * plane, row + (b + 1) * plane, po + (b * ch + c) * plane);
  }
  return detail::make_op(std::move(out), {a}, [](const Var& g) {
    return std::vector<Var>{nchw_to_cols(g)};
  });
}

/// [N,C,H,W] -> [C, N*H*W] (adjoint of cols_to_nchw).
inline Var nchw_to_cols(const Var& x) {
  MD_CONTRACT(x.value().rank() == 4, "nchw_to_cols: NCHW input required");
  const std::int64_t batch = x.shape()[0], ch = x.shape()[1];
  const std::int64_t plane = x.shape()[2] * x.shape()[3];
  const std::int64_t h = x.shape()[2], w = x.shape()[3];
  Tensor out({ch, batch * plane});
  const real* px = x.value().data();
  real* po = out.data();
  for (std::int64_t c = 0; c < ch; ++c) {
    real* row = po + c * batch * plane;
    for (std::int64_t b = 0; b < batch; ++b)
      std::copy(px + (b * ch + c) * plane, px + (b * ch + c + 1) * plane, row + b * plane);
  }
  return detail::make_op(std::move(out), {x}, [batch, h, w](const Var& g) {
    return std::vector<Var>{cols_to_nchw(g, batch, h, w)};
  });
}

// -- max pooling ---------------------------------------------------------------

namespace detail {
struct PoolGeom {
  std::int64_t batch, ch, in_h, in_w, k, stride, out_h, out_w;
};

inline PoolGeom pool_geom(const Shape& s, std::int64_t k, std::int64_t stride, bool ceil_mode) {
  PoolGeom g{s[0], s[1], s[2], s[3], k, stride, 0, 0};
  auto extent = [&](std::int64_t in) {
    if (ceil_mode) return (in - k + stride - 1) / stride + 1;
    MD_CONTRACT(in >= k, "maxpool: input smaller than kernel in floor mode");
    return (in - k) / stride + 1;
  };
  g.out_h = extent(g.in_h);
  g.out_w = extent(g.in_w);
  return g;
}

Var pool_gather(const Var& x, std::shared_ptr<std::vector<std::int64_t>> idx, Shape out_shape);

/// Scatter pooled gradients to the argmax positions (adjoint of pool_gather).
inline Var pool_scatter(const Var& g, std::shared_ptr<std::vector<std::int64_t>> idx,
                        Shape in_shape) {
  Tensor out(in_shape);
  const real* pg = g.value().data();
  real* po = out.data();
  for (std::size_t i = 0; i < idx->size(); ++i) po[(*idx)[i]] += pg[i];
  Shape gs = g.shape();
  return detail::make_op(std::move(out), {g}, [idx, gs](const Var& gg) {
    return std::vector<Var>{pool_gather(gg, idx, gs)};
  });
}

inline Var pool_gather(const Var& x, std::shared_ptr<std::vector<std::int64_t>> idx,
                       Shape out_shape) {
  Tensor out(out_shape);
  const real* px = x.value().data();
  real* po = out.data();
  for (std::size_t i = 0; i < idx->size(); ++i) po[i] = px[(*idx)[i]];
  Shape xs = x.shape();
  return detail::make_op(std::move(out), {x}, [idx, xs](const Var& gg) {
    return std::vector<Var>{pool_scatter(gg, idx, xs)};
  });
}
}  // namespace detail

/// Max pooling over [N,C,H,W]. ceil_mode allows partial edge windows, which is
/// what keeps tiny feature maps alive in deeper victims.
inline Var maxpool(const Var& x, std::int64_t k, std::int64_t stride, bool ceil_mode = false) {
  MD_CONTRACT(x.value().rank() == 4, "maxpool: NCHW input required");
  const auto g = detail::pool_geom(x.shape(), k, stride, ceil_mode);
  Tensor out({g.batch, g.ch, g.out_h, g.out_w});
  auto idx = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(out.numel()));
  const real* px = x.value().data();
  real* po = out.data();
  std::int64_t o = 0;
  for (std::int64_t b = 0; b < g.batch; ++b) {
    for (std::int64_t c = 0; c < g.ch; ++c) {
      const real* plane = px + (b * g.ch + c) * g.in_h * g.in_w;
      const std::int64_t base = (b * g.ch + c) * g.in_h * g.in_w;
      for (std::int64_t ho = 0; ho < g.out_h; ++ho) {
        for (std::int64_t wo = 0; wo < g.out_w; ++wo, ++o) {
          const std::int64_t h0 = ho * g.stride, w0 = wo * g.stride;
          const std::int64_t h1 = std::min(h0 + g.k, g.in_h), w1 = std::min(w0 + g.k, g.in_w);
          std::int64_t best = h0 * g.in_w + w0;
          real bv = plane[best];
          for (std::int64_t h = h0; h < h1; ++h)
            for (std::int64_t w = w0; w < w1; ++w) {
              const std::int64_t p = h * g.in_w + w;
              if (plane[p] > bv) {
                bv = plane[p];
                best = p;
              }
            }
          po[o] = bv;
          (*idx)[static_cast<std::size_t>(o)] = base + best;
        }
      }
    }
  }
  Shape in_shape = x.shape();
  return detail::make_op(std::move(out), {x}, [idx, in_shape](const Var& gg) {
    return std::vector<Var>{detail::pool_scatter(gg, idx, in_shape)};
  });
}

// -- backward pass -------------------------------------------------------------

/// Gradients of a scalar `output` w.r.t. `inputs`.
///
/// With create_graph=true the returned Vars are themselves differentiable
/// functions of the graph leaves, which is how Hessian-vector products and the
/// second-order meta gradient are obtained. Inputs that do not influence the
/// output receive explicit zeros.
inline std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs,
                             bool create_graph = false) {
  MD_CONTRACT(output.numel() == 1, "grad: output must be scalar");
  MD_CONTRACT(output.requires_grad(), "grad: output does not require grad");

  // Iterative post-order over the recorded graph.
  std::vector<Node*> topo;
  std::unordered_map<Node*, int> state;  // 0 unseen, 1 in progress, 2 done
  std::vector<Node*> stack{output.node()};
  while (!stack.empty()) {
    Node* n = stack.back();
    int& st = state[n];
    if (st == 0) {
      st = 1;
      for (const auto& p : n->parents)
        if (p.requires_grad() && state[p.node()] != 2) stack.push_back(p.node());
    } else {
      stack.pop_back();
      if (st == 1) {
        st = 2;
        topo.push_back(n);
      }
    }
  }

  std::unordered_map<Node*, Var> grads;
  grads[output.node()] = Var::constant(Tensor::scalar(1));

  GradModeGuard guard(create_graph);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    auto gi = grads.find(n);
    if (gi == grads.end() || !n->backward) continue;
    std::vector<Var> pgrads = n->backward(gi->second);
    MD_CONTRACT(pgrads.size() == n->parents.size(), "grad: backward arity mismatch");
    for (std::size_t i = 0; i < pgrads.size(); ++i) {
      const Var& p = n->parents[i];
      if (!p.requires_grad() || !pgrads[i].defined()) continue;
      auto pi = grads.find(p.node());
      if (pi == grads.end())
        grads[p.node()] = pgrads[i];
      else
        pi->second = add(pi->second, pgrads[i]);
    }
  }

  std::vector<Var> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto gi = grads.find(in.node());
    out.push_back(gi != grads.end() ? gi->second : Var::constant(Tensor::zeros(in.shape())));
  }
  return out;
}

/// Sum of elementwise dot products over aligned lists, as a graph scalar.
inline Var dot(const std::vector<Var>& a, const std::vector<Var>& b) {
  MD_CONTRACT(a.size() == b.size() && !a.empty(), "dot: list size mismatch");
  Var acc;
  for (std::size_t i = 0; i < a.size(); ++i) {
    Var term = sum_all(mul(a[i], b[i]));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

}  // namespace metadet::ag
