#pragma once

#include <optional>

#include "xsurv/optim.hpp"
#include "xsurv/window_attention.hpp"

namespace xsurv {

// Parameters are registered into `params` under `prefix`; `rng` seeds their
// initial values in registration order.
template <typename T>
struct BuildContext {
  ParameterSet<T>& params;
  std::mt19937_64& rng;

  Tensor<T> weight(const std::string& name, Shape shape, int64_t fan_in, double gain = 1.0,
                   bool weight_decay = false) {
    auto t = params.add(name, std::move(shape), weight_decay);
    init_uniform_fan_in(t, fan_in, rng, gain);
    return t;
  }
  Tensor<T> constant(const std::string& name, Shape shape, T value, bool weight_decay = false) {
    auto t = params.add(name, std::move(shape), weight_decay);
    fill(t, value);
    return t;
  }
};

struct BlockConfig {
  int64_t channels_in = 1;
  int64_t channels_out = 1;
  int n_conv = 2;
  int n_trans = 0;
  int64_t num_heads = 0;
  Dims3 window{5, 5, 5};

  void validate() const {
    if (channels_in < 1 || channels_out < 1) throw Error("BlockConfig: channels must be positive");
    if (n_conv < 1) throw Error("BlockConfig: n_conv must be >= 1");
    if (num_heads > 0 && channels_out % num_heads != 0)
      throw Error("BlockConfig: channels_out " + std::to_string(channels_out) +
                  " not divisible by num_heads " + std::to_string(num_heads));
    if (n_trans > 0 && n_trans % 2 != 0) throw Error("BlockConfig: n_trans must be even");
    if ((n_trans > 0) != (num_heads > 0)) throw Error("BlockConfig: heads must be > 0 iff n_trans > 0");
  }
};

template <typename T>
class Conv3dLayer {
 public:
  Conv3dLayer() = default;
  Conv3dLayer(BuildContext<T>& ctx, const std::string& prefix, int64_t cin, int64_t cout, int64_t k,
              int64_t stride = 1, bool with_bias = true)
      : stride_(stride), pad_(k / 2) {
    weight_ = ctx.weight(prefix + ".weight", {cout, cin, k, k, k}, cin * k * k * k);
    if (with_bias) bias_ = ctx.constant(prefix + ".bias", {cout}, T(0));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return conv3d(x, weight_, bias_, stride_, pad_); }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  int64_t out_channels() const { return weight_.dim(0); }
  explicit operator bool() const { return static_cast<bool>(weight_); }

 private:
  Tensor<T> weight_, bias_;
  int64_t stride_ = 1, pad_ = 0;
};

template <typename T>
class InstanceNorm {
 public:
  InstanceNorm() = default;
  InstanceNorm(BuildContext<T>& ctx, const std::string& prefix, int64_t c)
      : gamma_(ctx.constant(prefix + ".gamma", {c}, T(1))), beta_(ctx.constant(prefix + ".beta", {c}, T(0))) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return instance_norm(x, gamma_, beta_); }
  Tensor<T>& beta() { return beta_; }

 private:
  Tensor<T> gamma_, beta_;
};

// conv 3x3x3 -> instance norm -> leaky ReLU, with a configurable stride. The
// conv has no bias: instance norm would remove it.
template <typename T>
class ConvNormAct {
 public:
  ConvNormAct() = default;
  ConvNormAct(BuildContext<T>& ctx, const std::string& prefix, int64_t cin, int64_t cout, int64_t stride = 1)
      : conv_(ctx, prefix + ".conv", cin, cout, 3, stride, false), norm_(ctx, prefix + ".norm", cout) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return leaky_relu(norm_(conv_(x)), T(0.01)); }
  Conv3dLayer<T>& conv() { return conv_; }
  InstanceNorm<T>& norm() { return norm_; }

 private:
  Conv3dLayer<T> conv_;
  InstanceNorm<T> norm_;
};

// n_conv repetitions of (3x3x3 conv -> instance norm -> leaky ReLU); the first
// maps channels_in -> channels_out.
template <typename T>
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(BuildContext<T>& ctx, const std::string& prefix, const BlockConfig& cfg)
      : cin_(cfg.channels_in) {
    for (int i = 0; i < cfg.n_conv; ++i)
      layers_.emplace_back(ctx, prefix + ".c" + std::to_string(i), i == 0 ? cfg.channels_in : cfg.channels_out,
                           cfg.channels_out);
  }
  Tensor<T> operator()(Tensor<T> x) const {
    if (x.dim(1) != cin_) throw ShapeError("conv_block", 1, x.dim(1), cin_);
    for (const auto& l : layers_) x = l(x);
    return x;
  }
  std::vector<ConvNormAct<T>>& layers() { return layers_; }

 private:
  int64_t cin_ = 0;
  std::vector<ConvNormAct<T>> layers_;
};

// Pre-norm windowed transformer sub-block. Self mode attends within x; cross
// mode takes queries from x and keys/values from the co-located window of
// `other`.
template <typename T>
class WindowTransformerBlock {
 public:
  WindowTransformerBlock() = default;
  WindowTransformerBlock(BuildContext<T>& ctx, const std::string& prefix, int64_t channels, int64_t heads,
                         Dims3 window, bool shifted, bool cross, int64_t mlp_ratio = 2)
      : heads_(heads), window_(window), shifted_(shifted), cross_(cross) {
    if (heads < 1 || channels % heads != 0)
      throw Error("window transformer: channels " + std::to_string(channels) + " not divisible by heads " +
                  std::to_string(heads));
    norm1_g_ = ctx.constant(prefix + ".norm1.gamma", {channels}, T(1));
    norm1_b_ = ctx.constant(prefix + ".norm1.beta", {channels}, T(0));
    if (cross) {
      normkv_g_ = ctx.constant(prefix + ".norm_kv.gamma", {channels}, T(1));
      normkv_b_ = ctx.constant(prefix + ".norm_kv.beta", {channels}, T(0));
    }
    q_ = Conv3dLayer<T>(ctx, prefix + ".q", channels, channels, 1);
    // A key bias shifts all logits of a query equally; softmax cancels it.
    k_ = Conv3dLayer<T>(ctx, prefix + ".k", channels, channels, 1, 1, false);
    v_ = Conv3dLayer<T>(ctx, prefix + ".v", channels, channels, 1);
    table_ = ctx.constant(prefix + ".rel_bias", {heads, relative_table_size(window)}, T(0));
    proj_ = Conv3dLayer<T>(ctx, prefix + ".proj", channels, channels, 1);
    norm2_g_ = ctx.constant(prefix + ".norm2.gamma", {channels}, T(1));
    norm2_b_ = ctx.constant(prefix + ".norm2.beta", {channels}, T(0));
    mlp1_ = Conv3dLayer<T>(ctx, prefix + ".mlp1", channels, channels * mlp_ratio, 1);
    mlp2_ = Conv3dLayer<T>(ctx, prefix + ".mlp2", channels * mlp_ratio, channels, 1);
  }

  // Raw multi-head attention output (before output projection and residual).
  Tensor<T> attend(const Tensor<T>& x, const Tensor<T>* other = nullptr) const {
    auto xn = channel_layer_norm(x, norm1_g_, norm1_b_);
    Tensor<T> kv_src = xn;
    if (cross_) {
      if (!other) throw Error("cross-attention block needs a second modality");
      if (other->shape() != x.shape())
        for (int a = 0; a < 5; ++a)
          if (other->dim(a) != x.dim(a)) throw ShapeError("windowed_cross_attention", a, other->dim(a), x.dim(a));
      kv_src = channel_layer_norm(*other, normkv_g_, normkv_b_);
    }
    return window_attention(q_(xn), k_(kv_src), v_(kv_src), table_, heads_, window_, shifted_);
  }

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>* other = nullptr) const {
    auto x1 = add(x, proj_(attend(x, other)));
    auto h = mlp2_(gelu(mlp1_(channel_layer_norm(x1, norm2_g_, norm2_b_))));
    return add(x1, h);
  }

  Conv3dLayer<T>& q() { return q_; }
  Conv3dLayer<T>& k() { return k_; }
  Conv3dLayer<T>& v() { return v_; }
  Conv3dLayer<T>& proj() { return proj_; }
  Tensor<T>& bias_table() { return table_; }
  bool cross() const { return cross_; }

 private:
  int64_t heads_ = 1;
  Dims3 window_{};
  bool shifted_ = false, cross_ = false;
  Tensor<T> norm1_g_, norm1_b_, normkv_g_, normkv_b_, norm2_g_, norm2_b_, table_;
  Conv3dLayer<T> q_, k_, v_, proj_, mlp1_, mlp2_;
};

// Hybrid parallel self-attention: a Conv block and a windowed self-attention
// path on the same input, summed.
template <typename T>
class HpsaBlock {
 public:
  HpsaBlock() = default;
  HpsaBlock(BuildContext<T>& ctx, const std::string& prefix, const BlockConfig& cfg)
      : conv_(ctx, prefix + ".conv_path", cfg) {
    cfg.validate();
    if (cfg.n_trans < 1) throw Error("HPSA block needs n_trans >= 1");
    if (cfg.channels_in != cfg.channels_out)
      in_proj_ = Conv3dLayer<T>(ctx, prefix + ".in_proj", cfg.channels_in, cfg.channels_out, 1);
    for (int i = 0; i < cfg.n_trans; ++i)
      blocks_.emplace_back(ctx, prefix + ".trans" + std::to_string(i), cfg.channels_out, cfg.num_heads,
                           cfg.window, i % 2 == 1, false);
    out_proj_ = Conv3dLayer<T>(ctx, prefix + ".out_proj", cfg.channels_out, cfg.channels_out, 1);
  }

  Tensor<T> transformer_path(const Tensor<T>& x) const {
    Tensor<T> t = in_proj_ ? in_proj_(x) : x;
    for (const auto& b : blocks_) t = b(t);
    return out_proj_(t);
  }
  Tensor<T> conv_path(const Tensor<T>& x) const { return conv_(x); }
  Tensor<T> operator()(const Tensor<T>& x) const { return add(conv_path(x), transformer_path(x)); }

  ConvBlock<T>& conv() { return conv_; }
  Conv3dLayer<T>& out_proj() { return out_proj_; }

 private:
  ConvBlock<T> conv_;
  Conv3dLayer<T> in_proj_;
  std::vector<WindowTransformerBlock<T>> blocks_;
  Conv3dLayer<T> out_proj_;
};

// Hybrid parallel cross-attention: a Conv block on x_self plus a windowed
// cross-attention path (queries from x_self, keys/values from x_other), summed.
template <typename T>
class HpcaBlock {
 public:
  HpcaBlock() = default;
  HpcaBlock(BuildContext<T>& ctx, const std::string& prefix, const BlockConfig& cfg)
      : conv_(ctx, prefix + ".conv_path", cfg) {
    cfg.validate();
    if (cfg.n_trans < 1) throw Error("HPCA block needs n_trans >= 1");
    if (cfg.channels_in != cfg.channels_out) {
      in_proj_ = Conv3dLayer<T>(ctx, prefix + ".in_proj", cfg.channels_in, cfg.channels_out, 1);
      other_proj_ = Conv3dLayer<T>(ctx, prefix + ".other_proj", cfg.channels_in, cfg.channels_out, 1);
    }
    for (int i = 0; i < cfg.n_trans; ++i)
      blocks_.emplace_back(ctx, prefix + ".trans" + std::to_string(i), cfg.channels_out, cfg.num_heads,
                           cfg.window, i % 2 == 1, true);
    out_proj_ = Conv3dLayer<T>(ctx, prefix + ".out_proj", cfg.channels_out, cfg.channels_out, 1);
  }

  Tensor<T> transformer_path(const Tensor<T>& x_self, const Tensor<T>& x_other) const {
    for (int a = 0; a < 5; ++a)
      if (x_other.dim(a) != x_self.dim(a)) throw ShapeError("hpca_block", a, x_other.dim(a), x_self.dim(a));
    Tensor<T> t = in_proj_ ? in_proj_(x_self) : x_self;
    Tensor<T> o = other_proj_ ? other_proj_(x_other) : x_other;
    for (const auto& b : blocks_) t = b(t, &o);
    return out_proj_(t);
  }
  Tensor<T> operator()(const Tensor<T>& x_self, const Tensor<T>& x_other) const {
    return add(conv_(x_self), transformer_path(x_self, x_other));
  }

  ConvBlock<T>& conv() { return conv_; }
  Conv3dLayer<T>& out_proj() { return out_proj_; }
  std::vector<WindowTransformerBlock<T>>& blocks() { return blocks_; }

 private:
  ConvBlock<T> conv_;
  Conv3dLayer<T> in_proj_, other_proj_;
  std::vector<WindowTransformerBlock<T>> blocks_;
  Conv3dLayer<T> out_proj_;
};

template <typename T>
struct RagOutput {
  Tensor<T> alpha_pt, alpha_mln, alpha_bg;  // [N,1,D,H,W]
  Tensor<T> x_pt, x_mln;
};

namespace detail {

// Gating signals arrive at the skip resolution or half of it.
template <typename T>
Tensor<T> to_skip_grid(const Tensor<T>& g, const Dims3& skip, std::string_view op) {
  const Dims3 gd = spatial_dims(g.shape());
  for (int a = 0; a < 3; ++a)
    if (gd[a] != skip[a] && gd[a] != (skip[a] + 1) / 2) throw ShapeError(op, a + 2, gd[a], skip[a]);
  return resize_trilinear(g, skip);
}

}  // namespace detail

// Region-specific attention gate: three mutually exclusive (softmax) maps for
// PT, MLN and background computed from the skip feature and the two decoder
// branches' gating signals.
template <typename T>
class RagBlock {
 public:
  RagBlock() = default;
  RagBlock(BuildContext<T>& ctx, const std::string& prefix, int64_t skip_ch, int64_t gate_pt_ch,
           int64_t gate_mln_ch, int64_t inter_ch)
      : wx_(ctx, prefix + ".w_x", skip_ch, inter_ch, 1),
        wg_pt_(ctx, prefix + ".w_g_pt", gate_pt_ch, inter_ch, 1),
        wg_mln_(ctx, prefix + ".w_g_mln", gate_mln_ch, inter_ch, 1),
        psi_pt_(ctx, prefix + ".psi_pt", inter_ch, 1, 1),
        psi_mln_(ctx, prefix + ".psi_mln", inter_ch, 1, 1),
        psi_bg_(ctx, prefix + ".psi_bg", inter_ch, 1, 1) {}

  RagOutput<T> operator()(const Tensor<T>& x_skip, const Tensor<T>& g_pt, const Tensor<T>& g_mln) const {
    const Dims3 sd = spatial_dims(x_skip.shape());
    auto theta = wx_(x_skip);
    auto gp = detail::to_skip_grid(wg_pt_(g_pt), sd, "rag_block(g_pt)");
    auto gm = detail::to_skip_grid(wg_mln_(g_mln), sd, "rag_block(g_mln)");
    auto logit_pt = psi_pt_(relu(add(theta, gp)));
    auto logit_mln = psi_mln_(relu(add(theta, gm)));
    auto logit_bg = psi_bg_(relu(theta));
    auto alphas = softmax(concat<T>({logit_pt, logit_mln, logit_bg}, 1), 1);
    RagOutput<T> out;
    out.alpha_pt = slice(alphas, 1, 0, 1);
    out.alpha_mln = slice(alphas, 1, 1, 1);
    out.alpha_bg = slice(alphas, 1, 2, 1);
    out.x_pt = mul(x_skip, out.alpha_pt);
    out.x_mln = mul(x_skip, out.alpha_mln);
    return out;
  }

  std::vector<Conv3dLayer<T>*> psi() { return {&psi_pt_, &psi_mln_, &psi_bg_}; }

 private:
  Conv3dLayer<T> wx_, wg_pt_, wg_mln_, psi_pt_, psi_mln_, psi_bg_;
};

// Additive attention gate with a sigmoid map, one per decoder branch.
template <typename T>
class VanillaAttentionGate {
 public:
  VanillaAttentionGate() = default;
  VanillaAttentionGate(BuildContext<T>& ctx, const std::string& prefix, int64_t skip_ch, int64_t gate_ch,
                       int64_t inter_ch)
      : wx_(ctx, prefix + ".w_x", skip_ch, inter_ch, 1),
        wg_(ctx, prefix + ".w_g", gate_ch, inter_ch, 1),
        psi_(ctx, prefix + ".psi", inter_ch, 1, 1) {}

  // Returns {alpha, gated skip}.
  std::pair<Tensor<T>, Tensor<T>> operator()(const Tensor<T>& x_skip, const Tensor<T>& g) const {
    auto gg = detail::to_skip_grid(wg_(g), spatial_dims(x_skip.shape()), "attention_gate");
    auto alpha = sigmoid(psi_(relu(add(wx_(x_skip), gg))));
    return {alpha, mul(x_skip, alpha)};
  }

 private:
  Conv3dLayer<T> wx_, wg_, psi_;
};

// Sigmoid-activated 1x1x1 convolution.
template <typename T>
class SegmentationHead {
 public:
  SegmentationHead() = default;
  SegmentationHead(BuildContext<T>& ctx, const std::string& prefix, int64_t channels, int64_t out_channels = 1)
      : conv_(ctx, prefix + ".conv", channels, out_channels, 1) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return sigmoid(conv_(x)); }
  Conv3dLayer<T>& conv() { return conv_; }

 private:
  Conv3dLayer<T> conv_;
};

// FC -> leaky ReLU -> dropout -> FC -> sigmoid, giving N conditional survival
// probabilities. Both FC layers carry the L2 weight-decay flag.
template <typename T>
class SurvivalHead {
 public:
  SurvivalHead() = default;
  SurvivalHead(BuildContext<T>& ctx, const std::string& prefix, int64_t features, int64_t hidden,
               int64_t intervals, double dropout_rate)
      : features_(features), dropout_(dropout_rate) {
    w1_ = ctx.weight(prefix + ".fc1.weight", {hidden, features}, features, 1.0, true);
    b1_ = ctx.constant(prefix + ".fc1.bias", {hidden}, T(0), true);
    w2_ = ctx.weight(prefix + ".fc2.weight", {intervals, hidden}, hidden, 1.0, true);
    b2_ = ctx.constant(prefix + ".fc2.bias", {intervals}, T(0), true);
  }

  Tensor<T> operator()(const Tensor<T>& deep_features, bool train, std::mt19937_64* rng) const {
    if (deep_features.ndim() != 2 || deep_features.dim(1) != features_)
      throw ShapeError("survival_head", 1, deep_features.ndim() == 2 ? deep_features.dim(1) : -1, features_);
    auto h = leaky_relu(linear(deep_features, w1_, b1_), T(0.01));
    if (train) {
      if (!rng) throw Error("survival_head: training mode needs an rng for dropout");
      h = dropout(h, static_cast<T>(dropout_), true, *rng);
    }
    return sigmoid(linear(h, w2_, b2_));
  }

  Tensor<T>& fc2_weight() { return w2_; }
  Tensor<T>& fc2_bias() { return b2_; }
  int64_t features() const { return features_; }

 private:
  int64_t features_ = 0;
  double dropout_ = 0.0;
  Tensor<T> w1_, b1_, w2_, b2_;
};

}  // namespace xsurv
