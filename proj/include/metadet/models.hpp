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

#include "metadet/nn.hpp"

namespace metadet {

using ag::Var;

// ---------------------------------------------------------------------------
// Detector backbone: three blocks of (3x3 conv, 64 channels, pad 0) ->
// batch norm -> ReLU -> 2x2 max pool (stride 2), then a linear head to two
// logits. Batch-norm statistics are always taken from the current batch and
// never carried across calls, so adaptation on a new task starts clean.
// ---------------------------------------------------------------------------

class Conv3Detector {
 public:
  static constexpr std::int64_t kChannels = 64;

  Conv3Detector(std::int64_t in_ch, std::int64_t in_h, std::int64_t in_w)
      : in_ch_(in_ch), in_h_(in_h), in_w_(in_w) {
    std::int64_t h = in_h, w = in_w;
    for (int b = 0; b < 3; ++b) {
      MD_CHECK(h >= 3 && w >= 3, ConfigError,
               "conv-3 input too small for block " + std::to_string(b + 1));
      h = (h - 2) / 2;
      w = (w - 2) / 2;
    }
    feat_h_ = h;
    feat_w_ = w;
  }

  std::int64_t in_ch() const { return in_ch_; }
  std::int64_t in_h() const { return in_h_; }
  std::int64_t in_w() const { return in_w_; }
  std::int64_t feature_dim() const { return kChannels * feat_h_ * feat_w_; }

  std::vector<nn::ParamDef> param_defs() const {
    std::vector<nn::ParamDef> defs;
    std::int64_t c_in = in_ch_;
    for (int b = 1; b <= 3; ++b) {
      const std::string p = "b" + std::to_string(b);
      const real std = std::sqrt(real{2} / static_cast<real>(c_in * 9));
      defs.push_back({p + ".conv.w", {kChannels, c_in, 3, 3}, std, 0});
      defs.push_back({p + ".bn.gamma", {kChannels}, 0, 1});
      defs.push_back({p + ".bn.beta", {kChannels}, 0, 0});
      c_in = kChannels;
    }
    const real fc_std = std::sqrt(real{2} / static_cast<real>(feature_dim()));
    defs.push_back({"fc.w", {2, feature_dim()}, fc_std, 0});
    defs.push_back({"fc.b", {2}, 0, 0});
    return defs;
  }

  ParamList init(Rng& rng) const { return nn::init_params(param_defs(), rng); }

  /// Forward to two logits. `params` must follow param_defs() order.
  Var forward(const std::vector<Var>& params, const Var& images) const {
    MD_CONTRACT(params.size() == 11, "conv-3 expects 11 parameter tensors");
    const Shape& s = images.shape();
    MD_CONTRACT(s.size() == 4 && s[1] == in_ch_ && s[2] == in_h_ && s[3] == in_w_,
                "conv-3 input shape mismatch: got " + shape_str(s));
    Var x = images;
    std::size_t pi = 0;
    for (int b = 0; b < 3; ++b) {
      ag::ConvGeom geom{};
      Var cols = nn::conv2d_cols(x, params[pi], /*stride=*/1, /*pad=*/0, &geom);
      Var bn = nn::batchnorm_cols(cols, params[pi + 1], params[pi + 2]);
      Var act = ag::relu(bn);
      Var nchw = ag::cols_to_nchw(act, geom.batch, geom.out_h(), geom.out_w());
      x = ag::maxpool(nchw, 2, 2, /*ceil_mode=*/false);
      pi += 3;
    }
    Var flat = ag::reshape(x, {s[0], feature_dim()});
    return nn::linear(flat, params[pi], params[pi + 1]);
  }

  Tensor logits_values(const ParamList& params, const Tensor& images) const {
    ag::NoGradGuard ng;
    return forward(nn::as_leaves(params), Var::constant(images)).value();
  }

 private:
  std::int64_t in_ch_, in_h_, in_w_, feat_h_ = 0, feat_w_ = 0;
};

// ---------------------------------------------------------------------------
// Victim classifiers: conv-4, ResNet-10, ResNet-18 (10-way heads).
// Victims keep running batch-norm statistics: training mode normalizes by the
// batch and refreshes the running estimates, inference mode freezes them so
// per-image outputs are deterministic.
// ---------------------------------------------------------------------------

enum class VictimArch { conv4, resnet10, resnet18 };

inline std::string arch_name(VictimArch a) {
  switch (a) {
    case VictimArch::conv4: return "conv4";
    case VictimArch::resnet10: return "resnet10";
    case VictimArch::resnet18: return "resnet18";
  }
  return "?";
}

inline VictimArch arch_from_name(const std::string& s) {
  if (s == "conv4") return VictimArch::conv4;
  if (s == "resnet10") return VictimArch::resnet10;
  if (s == "resnet18") return VictimArch::resnet18;
  throw ConfigError("unknown architecture: " + s);
}

/// Running batch-norm statistics, indexed by BN layer order.
struct BnState {
  std::vector<Tensor> mean, var;

  static BnState fresh(const std::vector<std::int64_t>& channels) {
    BnState s;
    for (auto c : channels) {
      s.mean.push_back(Tensor::zeros({c}));
      s.var.push_back(Tensor::full({c}, 1));
    }
    return s;
  }
};

class VictimNet {
 public:
  static constexpr int kNumClasses = 10;
  static constexpr real kBnMomentum = 0.1;

  VictimNet(VictimArch arch, std::int64_t in_ch, std::int64_t in_h, std::int64_t in_w)
      : arch_(arch), in_ch_(in_ch), in_h_(in_h), in_w_(in_w) {
    build_defs();
  }

  VictimArch arch() const { return arch_; }
  std::int64_t in_ch() const { return in_ch_; }
  std::int64_t in_h() const { return in_h_; }
  std::int64_t in_w() const { return in_w_; }
  const std::vector<nn::ParamDef>& param_defs() const { return defs_; }
  const std::vector<std::int64_t>& bn_channels() const { return bn_channels_; }

  ParamList init(Rng& rng) const { return nn::init_params(defs_, rng); }
  BnState fresh_bn() const { return BnState::fresh(bn_channels_); }

  /// Forward pass to 10 logits. In training mode `bn` is updated in place.
  Var forward(const std::vector<Var>& params, const Var& images, bool train_mode,
              BnState& bn) const {
    MD_CONTRACT(params.size() == defs_.size(), "victim parameter count mismatch");
    const Shape& s = images.shape();
    MD_CONTRACT(s.size() == 4 && s[1] == in_ch_ && s[2] == in_h_ && s[3] == in_w_,
                "victim input shape mismatch: got " + shape_str(s));
    Ctx ctx{params, 0, &bn, 0, train_mode};
    switch (arch_) {
      case VictimArch::conv4: return forward_conv4(ctx, images);
      default: return forward_resnet(ctx, images);
    }
  }

  Tensor logits_values(const ParamList& params, const Tensor& images, BnState& bn) const {
    ag::NoGradGuard ng;
    return forward(nn::as_leaves(params), Var::constant(images), false, bn).value();
  }

 private:
  struct Ctx {
    const std::vector<Var>& p;
    std::size_t pi;
    BnState* bn;
    std::size_t bi;
    bool train;
  };

  // conv(3x3, pad 1) -> BN -> ReLU in column layout; returns cols + geometry.
  Var conv_bn_relu_cols(Ctx& c, const Var& x, std::int64_t stride, ag::ConvGeom* geom,
                        bool relu_after = true) const {
    Var cols = nn::conv2d_cols(x, c.p[c.pi], stride, (c.p[c.pi].shape()[2] - 1) / 2, geom);
    const Var &gamma = c.p[c.pi + 1], &beta = c.p[c.pi + 2];
    c.pi += 3;
    Var bn;
    if (c.train) {
      Tensor bm, bv;
      bn = nn::batchnorm_cols(cols, gamma, beta, &bm, &bv);
      update_running(*c.bn, c.bi, bm, bv, cols.shape()[1]);
    } else {
      bn = nn::batchnorm_cols_frozen(cols, gamma, beta, c.bn->mean[c.bi], c.bn->var[c.bi]);
    }
    ++c.bi;
    return relu_after ? ag::relu(bn) : bn;
  }

  static void update_running(BnState& st, std::size_t i, const Tensor& bm, const Tensor& bv,
                             std::int64_t n) {
    const real unbias = n > 1 ? static_cast<real>(n) / static_cast<real>(n - 1) : 1;
    for (std::int64_t j = 0; j < bm.numel(); ++j) {
      st.mean[i].at(j) = (1 - kBnMomentum) * st.mean[i].at(j) + kBnMomentum * bm.at(j);
      st.var[i].at(j) = (1 - kBnMomentum) * st.var[i].at(j) + kBnMomentum * unbias * bv.at(j);
    }
  }

  Var forward_conv4(Ctx& c, const Var& images) const {
    Var x = images;
    for (int b = 0; b < 4; ++b) {
      ag::ConvGeom geom{};
      Var act = conv_bn_relu_cols(c, x, 1, &geom);
      Var nchw = ag::cols_to_nchw(act, geom.batch, geom.out_h(), geom.out_w());
      // ceil mode keeps the map alive on odd sizes (e.g. 7 -> 4).
      x = ag::maxpool(nchw, 2, 2, /*ceil_mode=*/true);
    }
    const Shape& xs = x.shape();
    Var flat = ag::reshape(x, {xs[0], xs[1] * xs[2] * xs[3]});
    return nn::linear(flat, c.p[c.pi], c.p[c.pi + 1]);
  }

  Var forward_resnet(Ctx& c, const Var& images) const {
    ag::ConvGeom geom{};
    Var act = conv_bn_relu_cols(c, images, 1, &geom);
    Var x = ag::cols_to_nchw(act, geom.batch, geom.out_h(), geom.out_w());
    const int blocks = arch_ == VictimArch::resnet10 ? 1 : 2;
    const std::int64_t widths[4] = {64, 128, 256, 512};
    for (int stage = 0; stage < 4; ++stage) {
      for (int b = 0; b < blocks; ++b) {
        const std::int64_t stride = (stage > 0 && b == 0) ? 2 : 1;
        x = basic_block(c, x, widths[stage], stride);
      }
    }
    const Shape& xs = x.shape();
    const real inv_hw = real{1} / static_cast<real>(xs[2] * xs[3]);
    Var pooled = ag::muls(ag::row_sum(ag::reshape(x, {xs[0] * xs[1], xs[2] * xs[3]})), inv_hw);
    Var flat = ag::reshape(pooled, {xs[0], xs[1]});
    return nn::linear(flat, c.p[c.pi], c.p[c.pi + 1]);
  }

  Var basic_block(Ctx& c, const Var& x, std::int64_t out_ch, std::int64_t stride) const {
    const std::int64_t in_ch = x.shape()[1];
    ag::ConvGeom g1{}, g2{};
    Var h1 = conv_bn_relu_cols(c, x, stride, &g1);
    Var h1n = ag::cols_to_nchw(h1, g1.batch, g1.out_h(), g1.out_w());
    Var h2 = conv_bn_relu_cols(c, h1n, 1, &g2, /*relu_after=*/false);
    Var shortcut;
    if (stride != 1 || in_ch != out_ch) {
      ag::ConvGeom gs{};
      shortcut = conv_bn_relu_cols(c, x, stride, &gs, /*relu_after=*/false);
    } else {
      shortcut = ag::nchw_to_cols(x);
    }
    Var sum = ag::relu(ag::add(h2, shortcut));
    return ag::cols_to_nchw(sum, g2.batch, g2.out_h(), g2.out_w());
  }

  void build_defs() {
    defs_.clear();
    bn_channels_.clear();
    auto add_conv_bn = [&](const std::string& name, std::int64_t cout, std::int64_t cin,
                           std::int64_t k) {
      const real std = std::sqrt(real{2} / static_cast<real>(cin * k * k));
      defs_.push_back({name + ".conv.w", {cout, cin, k, k}, std, 0});
      defs_.push_back({name + ".bn.gamma", {cout}, 0, 1});
      defs_.push_back({name + ".bn.beta", {cout}, 0, 0});
      bn_channels_.push_back(cout);
    };
    if (arch_ == VictimArch::conv4) {
      std::int64_t cin = in_ch_;
      std::int64_t h = in_h_, w = in_w_;
      for (int b = 1; b <= 4; ++b) {
        add_conv_bn("b" + std::to_string(b), 64, cin, 3);
        cin = 64;
        h = (h + 1) / 2;
        w = (w + 1) / 2;
      }
      const std::int64_t feat = 64 * h * w;
      defs_.push_back({"fc.w", {kNumClasses, feat},
                       std::sqrt(real{2} / static_cast<real>(feat)), 0});
      defs_.push_back({"fc.b", {kNumClasses}, 0, 0});
      return;
    }
    const int blocks = arch_ == VictimArch::resnet10 ? 1 : 2;
    add_conv_bn("stem", 64, in_ch_, 3);
    std::int64_t cin = 64;
    const std::int64_t widths[4] = {64, 128, 256, 512};
    for (int stage = 0; stage < 4; ++stage) {
      for (int b = 0; b < blocks; ++b) {
        const std::string name = "s" + std::to_string(stage) + ".b" + std::to_string(b);
        const std::int64_t stride = (stage > 0 && b == 0) ? 2 : 1;
        add_conv_bn(name + ".c1", widths[stage], cin, 3);
        add_conv_bn(name + ".c2", widths[stage], widths[stage], 3);
        if (stride != 1 || cin != widths[stage]) add_conv_bn(name + ".sc", widths[stage], cin, 1);
        cin = widths[stage];
      }
    }
    defs_.push_back({"fc.w", {kNumClasses, 512}, std::sqrt(real{2} / real{512}), 0});
    defs_.push_back({"fc.b", {kNumClasses}, 0, 0});
  }

  VictimArch arch_;
  std::int64_t in_ch_, in_h_, in_w_;
  std::vector<nn::ParamDef> defs_;
  std::vector<std::int64_t> bn_channels_;
};

}  // namespace metadet
