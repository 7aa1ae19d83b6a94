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

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <vector>

#include "metadet/common.hpp"
#include "metadet/rng.hpp"

namespace metadet {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

/// Dense row-major tensor of `real` with shared storage. Copies are shallow;
/// use clone() for a deep copy. Ops in this project never mutate their inputs,
/// so sharing is safe by convention.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape dims)
      : dims_(std::move(dims)),
        data_(std::make_shared<std::vector<real>>(
            static_cast<std::size_t>(shape_numel(dims_)), real{0})) {}

  Tensor(Shape dims, std::vector<real> values)
      : dims_(std::move(dims)), data_(std::make_shared<std::vector<real>>(std::move(values))) {
    MD_CONTRACT(static_cast<std::int64_t>(data_->size()) == shape_numel(dims_),
                "Tensor: value count does not match shape " + shape_str(dims_));
  }

  static Tensor zeros(Shape dims) { return Tensor(std::move(dims)); }

  static Tensor full(Shape dims, real v) {
    Tensor t(std::move(dims));
    for (auto& x : *t.data_) x = v;
    return t;
  }

  static Tensor scalar(real v) { return full({1}, v); }

  static Tensor randn(Shape dims, Rng& rng, real stddev = 1.0) {
    Tensor t(std::move(dims));
    for (auto& x : *t.data_) x = stddev * rng.normal();
    return t;
  }

  static Tensor rand_uniform(Shape dims, Rng& rng, real lo, real hi) {
    Tensor t(std::move(dims));
    for (auto& x : *t.data_) x = rng.uniform(lo, hi);
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return dims_; }
  std::int64_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t rank() const { return dims_.size(); }
  std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

  real* data() { return data_->data(); }
  const real* data() const { return data_->data(); }
  real& at(std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
  real at(std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  real item() const {
    MD_CONTRACT(numel() == 1, "item() on non-scalar tensor");
    return (*data_)[0];
  }

  Tensor clone() const {
    Tensor t;
    t.dims_ = dims_;
    t.data_ = std::make_shared<std::vector<real>>(*data_);
    return t;
  }

  /// Same storage, new shape (element count must match).
  Tensor reshaped(Shape dims) const {
    MD_CONTRACT(shape_numel(dims) == numel(),
                "reshape " + shape_str(dims_) + " -> " + shape_str(dims) + " changes numel");
    Tensor t;
    t.dims_ = std::move(dims);
    t.data_ = data_;
    return t;
  }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  bool all_finite() const {
    for (real v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// 2-D Eigen view; tensor must be rank 2.
  MatMap mat() {
    MD_CONTRACT(rank() == 2, "mat() needs a rank-2 tensor, got " + shape_str(dims_));
    return MatMap(data(), dims_[0], dims_[1]);
  }
  ConstMatMap mat() const {
    MD_CONTRACT(rank() == 2, "mat() needs a rank-2 tensor, got " + shape_str(dims_));
    return ConstMatMap(data(), dims_[0], dims_[1]);
  }

 private:
  Shape dims_;
  std::shared_ptr<std::vector<real>> data_;
};

// -- raw (non-autograd) helpers used by optimizers and attacks ---------------

inline Tensor add_scaled(const Tensor& a, const Tensor& b, real s) {
  MD_CONTRACT(a.same_shape(b), "add_scaled shape mismatch");
  Tensor out(a.shape());
  const std::int64_t n = a.numel();
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + s * pb[i];
  return out;
}

inline void add_scaled_inplace(Tensor& a, const Tensor& b, real s) {
  MD_CONTRACT(a.same_shape(b), "add_scaled shape mismatch");
  const std::int64_t n = a.numel();
  real* pa = a.data();
  const real* pb = b.data();
  for (std::int64_t i = 0; i < n; ++i) pa[i] += s * pb[i];
}

inline real max_abs_diff(const Tensor& a, const Tensor& b) {
  MD_CONTRACT(a.same_shape(b), "max_abs_diff shape mismatch");
  real m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    if (a.at(i) != b.at(i)) return false;
  return true;
}

using ParamList = std::vector<Tensor>;

inline ParamList clone_params(const ParamList& p) {
  ParamList out;
  out.reserve(p.size());
  for (const auto& t : p) out.push_back(t.clone());
  return out;
}

inline std::int64_t param_count(const ParamList& p) {
  std::int64_t n = 0;
  for (const auto& t : p) n += t.numel();
  return n;
}

inline bool params_bitwise_equal(const ParamList& a, const ParamList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!bitwise_equal(a[i], b[i])) return false;
  return true;
}

}  // namespace metadet
