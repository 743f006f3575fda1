#pragma once

#include <array>
#include <cmath>

#include "xsurv/ops.hpp"

namespace xsurv {

using Dims3 = std::array<int64_t, 3>;

namespace detail {

inline void require_5d(const Shape& s, std::string_view op) {
  if (s.size() != 5) throw ShapeError(std::string(op) + ": expects [N,C,D,H,W], got " + to_string(s));
}

inline int64_t conv_out_len(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

struct ConvGeom {
  int64_t cin, d, h, w;
  int64_t k, stride, pad;
  int64_t od, oh, ow;
  int64_t in_plane() const { return d * h * w; }
  int64_t out_plane() const { return od * oh * ow; }
  int64_t col_rows() const { return cin * k * k * k; }
};

// Unfolds one sample [Cin,D,H,W] into a [Cin*k^3, P_out] column matrix.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const int64_t p = g.out_plane();
  int64_t row = 0;
  for (int64_t c = 0; c < g.cin; ++c) {
    const T* xc = x + c * g.in_plane();
    for (int64_t kd = 0; kd < g.k; ++kd)
      for (int64_t kh = 0; kh < g.k; ++kh)
        for (int64_t kw = 0; kw < g.k; ++kw, ++row) {
          T* dst = col + row * p;
          for (int64_t od = 0; od < g.od; ++od) {
            const int64_t id = od * g.stride - g.pad + kd;
            for (int64_t oh = 0; oh < g.oh; ++oh) {
              const int64_t ih = oh * g.stride - g.pad + kh;
              T* drow = dst + (od * g.oh + oh) * g.ow;
              if (id < 0 || id >= g.d || ih < 0 || ih >= g.h) {
                std::fill_n(drow, g.ow, T(0));
                continue;
              }
              const T* srow = xc + (id * g.h + ih) * g.w;
              if (g.stride == 1) {
                const int64_t lo = std::max<int64_t>(0, g.pad - kw);
                const int64_t hi = std::min<int64_t>(g.ow, g.w + g.pad - kw);
                std::fill_n(drow, lo, T(0));
                for (int64_t ow = lo; ow < hi; ++ow) drow[ow] = srow[ow - g.pad + kw];
                if (hi < g.ow) std::fill(drow + std::max(hi, lo), drow + g.ow, T(0));
              } else {
                for (int64_t ow = 0; ow < g.ow; ++ow) {
                  const int64_t iw = ow * g.stride - g.pad + kw;
                  drow[ow] = (iw >= 0 && iw < g.w) ? srow[iw] : T(0);
                }
              }
            }
          }
        }
  }
}

// Adjoint of im2col: scatters column gradients back into [Cin,D,H,W].
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const int64_t p = g.out_plane();
  int64_t row = 0;
  for (int64_t c = 0; c < g.cin; ++c) {
    T* xc = x + c * g.in_plane();
    for (int64_t kd = 0; kd < g.k; ++kd)
      for (int64_t kh = 0; kh < g.k; ++kh)
        for (int64_t kw = 0; kw < g.k; ++kw, ++row) {
          const T* src = col + row * p;
          for (int64_t od = 0; od < g.od; ++od) {
            const int64_t id = od * g.stride - g.pad + kd;
            if (id < 0 || id >= g.d) continue;
            for (int64_t oh = 0; oh < g.oh; ++oh) {
              const int64_t ih = oh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= g.h) continue;
              const T* srow = src + (od * g.oh + oh) * g.ow;
              T* drow = xc + (id * g.h + ih) * g.w;
              for (int64_t ow = 0; ow < g.ow; ++ow) {
                const int64_t iw = ow * g.stride - g.pad + kw;
                if (iw >= 0 && iw < g.w) drow[iw] += srow[ow];
              }
            }
          }
        }
  }
}

}  // namespace detail

inline Dims3 spatial_dims(const Shape& s) { return {s[2], s[3], s[4]}; }

// 3D cross-correlation. input [N,Cin,D,H,W], weight [Cout,Cin,k,k,k], optional bias [Cout].
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int64_t stride = 1, int64_t padding = 0) {
  detail::require_5d(input.shape(), "conv3d");
  if (weight.ndim() != 5) throw ShapeError("conv3d: weight must be [Cout,Cin,k,k,k]");
  const int64_t k = weight.dim(2);
  if (weight.dim(3) != k || weight.dim(4) != k) throw ShapeError("conv3d: kernel must be cubic");
  if (k % 2 == 0) throw ShapeError("conv3d: kernel size must be odd, got " + std::to_string(k));
  if (stride < 1 || padding < 0) throw ShapeError("conv3d: stride must be >= 1 and padding >= 0");
  if (input.dim(1) != weight.dim(1)) throw ShapeError("conv3d", 1, input.dim(1), weight.dim(1));
  const int64_t nb = input.dim(0), cout = weight.dim(0);
  if (bias && bias.numel() != cout) throw ShapeError("conv3d", 0, bias.numel(), cout);
  detail::ConvGeom g{input.dim(1), input.dim(2), input.dim(3), input.dim(4), k, stride, padding, 0, 0, 0};
  g.od = detail::conv_out_len(g.d, k, stride, padding);
  g.oh = detail::conv_out_len(g.h, k, stride, padding);
  g.ow = detail::conv_out_len(g.w, k, stride, padding);
  for (int a = 0; a < 3; ++a) {
    const int64_t o = a == 0 ? g.od : a == 1 ? g.oh : g.ow;
    if (o <= 0) throw ShapeError("conv3d", a + 2, o, 1);
  }
  const int64_t p = g.out_plane();
  const int64_t rows = g.col_rows();
  const bool pointwise = k == 1 && stride == 1 && padding == 0;
  Buffer<T> out(static_cast<size_t>(nb * cout * p));
  Buffer<T> col(pointwise ? 0 : static_cast<size_t>(rows * p));
  Eigen::Map<const MatrixRM<T>> wm(weight.data(), cout, rows);
  for (int64_t b = 0; b < nb; ++b) {
    const T* xb = input.data() + b * g.cin * g.in_plane();
    const T* colp = xb;
    if (!pointwise) {
      detail::im2col(xb, g, col.data());
      colp = col.data();
    }
    Eigen::Map<MatrixRM<T>> ym(out.data() + b * cout * p, cout, p);
    ym.noalias() = wm * Eigen::Map<const MatrixRM<T>>(colp, rows, p);
    if (bias)
      for (int64_t c = 0; c < cout; ++c) ym.row(c).array() += bias.data()[c];
  }
  std::vector<Tensor<T>> ins{input, weight};
  if (bias) ins.push_back(bias);
  return make_result<T>("conv3d", {nb, cout, g.od, g.oh, g.ow}, std::move(out), ins,
                        [g, nb, cout, p, rows, pointwise](Node<T>& n) {
    T* gx = n.input_grad(0);
    T* gw = n.input_grad(1);
    T* gb = n.inputs.size() > 2 ? n.input_grad(2) : nullptr;
    Eigen::Map<const MatrixRM<T>> wm(n.input_value(1), cout, rows);
    Buffer<T> col(pointwise ? 0 : static_cast<size_t>(rows * p));
    for (int64_t b = 0; b < nb; ++b) {
      Eigen::Map<const MatrixRM<T>> gy(n.grad.data() + b * cout * p, cout, p);
      const T* xb = n.input_value(0) + b * g.cin * g.in_plane();
      if (gb)
        for (int64_t c = 0; c < cout; ++c) gb[c] += gy.row(c).sum();
      if (gw) {
        const T* colp = xb;
        if (!pointwise) {
          detail::im2col(xb, g, col.data());
          colp = col.data();
        }
        Eigen::Map<MatrixRM<T>>(gw, cout, rows).noalias() +=
            gy * Eigen::Map<const MatrixRM<T>>(colp, rows, p).transpose();
      }
      if (gx) {
        T* gxb = gx + b * g.cin * g.in_plane();
        if (pointwise) {
          Eigen::Map<MatrixRM<T>>(gxb, rows, p).noalias() += wm.transpose() * gy;
        } else {
          Eigen::Map<MatrixRM<T>>(col.data(), rows, p).noalias() = wm.transpose() * gy;
          detail::col2im(col.data(), g, gxb);
        }
      }
    }
  });
}

// Instance normalization: per (sample, channel) over the spatial extent, with
// per-channel affine scale/shift.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        T eps = T(1e-5)) {
  detail::require_5d(x.shape(), "instance_norm");
  const int64_t nb = x.dim(0), c = x.dim(1), s = x.numel() / (nb * c);
  if (gamma.numel() != c) throw ShapeError("instance_norm", 1, gamma.numel(), c);
  if (beta.numel() != c) throw ShapeError("instance_norm", 1, beta.numel(), c);
  Buffer<T> out(x.vec().size());
  Buffer<T> xhat(x.vec().size());
  Buffer<T> inv_std(static_cast<size_t>(nb * c));
  for (int64_t bc = 0; bc < nb * c; ++bc) {
    const T* px = x.data() + bc * s;
    T mu = T(0);
    for (int64_t i = 0; i < s; ++i) mu += px[i];
    mu /= static_cast<T>(s);
    T var = T(0);
    for (int64_t i = 0; i < s; ++i) var += (px[i] - mu) * (px[i] - mu);
    const T is = T(1) / std::sqrt(var / static_cast<T>(s) + eps);
    inv_std[bc] = is;
    const T ga = gamma.data()[bc % c], be = beta.data()[bc % c];
    for (int64_t i = 0; i < s; ++i) {
      xhat[bc * s + i] = (px[i] - mu) * is;
      out[bc * s + i] = ga * xhat[bc * s + i] + be;
    }
  }
  return make_result<T>("instance_norm", x.shape(), std::move(out), {x, gamma, beta},
                        [nb, c, s, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& n) {
    const T* g = n.grad.data();
    T* gx = n.input_grad(0);
    T* gg = n.input_grad(1);
    T* gbeta = n.input_grad(2);
    const T* gam = n.input_value(1);
    for (int64_t bc = 0; bc < nb * c; ++bc) {
      const T* gy = g + bc * s;
      const T* xh = xhat.data() + bc * s;
      T sg = T(0), sgx = T(0);
      for (int64_t i = 0; i < s; ++i) {
        sg += gy[i];
        sgx += gy[i] * xh[i];
      }
      const int64_t ch = bc % c;
      if (gg) gg[ch] += sgx;
      if (gbeta) gbeta[ch] += sg;
      if (gx) {
        const T ga = gam[ch];
        const T m1 = sg / static_cast<T>(s), m2 = sgx / static_cast<T>(s);
        T* dx = gx + bc * s;
        for (int64_t i = 0; i < s; ++i) dx[i] += ga * inv_std[bc] * (gy[i] - m1 - xh[i] * m2);
      }
    }
  });
}

namespace detail {

enum class PoolKind { kMax, kAvg };

template <typename T>
Tensor<T> pool3d(const Tensor<T>& x, int64_t k, PoolKind kind, std::string_view name) {
  require_5d(x.shape(), name);
  const int64_t nb = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
  for (int a = 2; a < 5; ++a)
    if (x.dim(a) % k != 0) throw ShapeError(name, a, x.dim(a), (x.dim(a) / k + 1) * k);
  const int64_t od = d / k, oh = h / k, ow = w / k;
  Buffer<T> out(static_cast<size_t>(nb * c * od * oh * ow));
  std::vector<int64_t> argmax(kind == PoolKind::kMax ? out.size() : 0);
  const T inv = T(1) / static_cast<T>(k * k * k);
  for (int64_t bc = 0; bc < nb * c; ++bc) {
    const T* px = x.data() + bc * d * h * w;
    for (int64_t zd = 0; zd < od; ++zd)
      for (int64_t zh = 0; zh < oh; ++zh)
        for (int64_t zw = 0; zw < ow; ++zw) {
          const int64_t o = ((bc * od + zd) * oh + zh) * ow + zw;
          T acc = kind == PoolKind::kMax ? -std::numeric_limits<T>::infinity() : T(0);
          int64_t best = 0;
          for (int64_t a = 0; a < k; ++a)
            for (int64_t b = 0; b < k; ++b)
              for (int64_t e = 0; e < k; ++e) {
                const int64_t i = ((zd * k + a) * h + zh * k + b) * w + zw * k + e;
                if (kind == PoolKind::kMax) {
                  if (px[i] > acc) {
                    acc = px[i];
                    best = bc * d * h * w + i;
                  }
                } else {
                  acc += px[i];
                }
              }
          out[o] = kind == PoolKind::kMax ? acc : acc * inv;
          if (kind == PoolKind::kMax) argmax[o] = best;
        }
  }
  return make_result<T>(name, {nb, c, od, oh, ow}, std::move(out), {x},
                        [=, argmax = std::move(argmax)](Node<T>& n) {
    T* gx = n.input_grad(0);
    if (!gx) return;
    if (kind == PoolKind::kMax) {
      for (size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += n.grad[o];
      return;
    }
    for (int64_t bc = 0; bc < nb * c; ++bc)
      for (int64_t zd = 0; zd < od; ++zd)
        for (int64_t zh = 0; zh < oh; ++zh)
          for (int64_t zw = 0; zw < ow; ++zw) {
            const T go = n.grad[((bc * od + zd) * oh + zh) * ow + zw] * inv;
            for (int64_t a = 0; a < k; ++a)
              for (int64_t b = 0; b < k; ++b)
                for (int64_t e = 0; e < k; ++e)
                  gx[bc * d * h * w + ((zd * k + a) * h + zh * k + b) * w + zw * k + e] += go;
          }
  });
}

}  // namespace detail

template <typename T>
Tensor<T> max_pool3d(const Tensor<T>& x, int64_t k = 2) {
  return detail::pool3d(x, k, detail::PoolKind::kMax, "max_pool3d");
}
template <typename T>
Tensor<T> avg_pool3d(const Tensor<T>& x, int64_t k = 2) {
  return detail::pool3d(x, k, detail::PoolKind::kAvg, "avg_pool3d");
}

// [N,C,D,H,W] -> [N,C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_5d(x.shape(), "global_avg_pool");
  return mean_axis(reshape(x, {x.dim(0), x.dim(1), -1}), 2);
}

namespace detail {

// Linear interpolation taps for one axis (half-pixel centers, edge clamped).
struct Taps {
  std::vector<int64_t> lo, hi;
  std::vector<double> frac;
};
inline Taps linear_taps(int64_t in, int64_t out) {
  Taps t;
  t.lo.resize(static_cast<size_t>(out));
  t.hi.resize(static_cast<size_t>(out));
  t.frac.resize(static_cast<size_t>(out));
  const double sc = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * sc - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto l = static_cast<int64_t>(std::floor(src));
    t.lo[o] = l;
    t.hi[o] = std::min(l + 1, in - 1);
    t.frac[o] = src - static_cast<double>(l);
  }
  return t;
}

}  // namespace detail

// Trilinear resampling of [N,C,D,H,W] to the given spatial size.
template <typename T>
Tensor<T> resize_trilinear(const Tensor<T>& x, Dims3 out_dims) {
  detail::require_5d(x.shape(), "resize_trilinear");
  const int64_t nb = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
  if (out_dims == Dims3{d, h, w}) return x;
  const auto [od, oh, ow] = out_dims;
  auto td = detail::linear_taps(d, od), th = detail::linear_taps(h, oh), tw = detail::linear_taps(w, ow);
  Buffer<T> out(static_cast<size_t>(nb * c * od * oh * ow));
  const auto each = [=](auto&& f) {
    for (int64_t bc = 0; bc < nb * c; ++bc)
      for (int64_t a = 0; a < od; ++a)
        for (int64_t b = 0; b < oh; ++b)
          for (int64_t e = 0; e < ow; ++e) {
            const T fd = static_cast<T>(td.frac[a]), fh = static_cast<T>(th.frac[b]),
                    fw = static_cast<T>(tw.frac[e]);
            const int64_t base = bc * d * h * w;
            const int64_t o = ((bc * od + a) * oh + b) * ow + e;
            const int64_t zs[2] = {td.lo[a], td.hi[a]};
            const int64_t ys[2] = {th.lo[b], th.hi[b]};
            const int64_t xs[2] = {tw.lo[e], tw.hi[e]};
            const T wz[2] = {T(1) - fd, fd}, wy[2] = {T(1) - fh, fh}, wx[2] = {T(1) - fw, fw};
            for (int i = 0; i < 2; ++i)
              for (int j = 0; j < 2; ++j)
                for (int l = 0; l < 2; ++l)
                  f(o, base + (zs[i] * h + ys[j]) * w + xs[l], wz[i] * wy[j] * wx[l]);
          }
  };
  const T* px = x.data();
  each([&](int64_t o, int64_t i, T wgt) { out[o] += wgt * px[i]; });
  return make_result<T>("resize_trilinear", {nb, c, od, oh, ow}, std::move(out), {x},
                        [each](Node<T>& n) {
    T* gx = n.input_grad(0);
    if (!gx) return;
    const T* g = n.grad.data();
    each([&](int64_t o, int64_t i, T wgt) { gx[i] += wgt * g[o]; });
  });
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  detail::require_5d(x.shape(), "upsample2x");
  return resize_trilinear(x, {x.dim(2) * 2, x.dim(3) * 2, x.dim(4) * 2});
}

// Zero-pads the far end of each spatial axis up to `target`.
template <typename T>
Tensor<T> pad_spatial(const Tensor<T>& x, Dims3 target) {
  detail::require_5d(x.shape(), "pad_spatial");
  const int64_t nb = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
  if (target == Dims3{d, h, w}) return x;
  const auto [td, th, tw] = target;
  if (td < d || th < h || tw < w) throw ShapeError("pad_spatial: target smaller than input");
  Buffer<T> out(static_cast<size_t>(nb * c * td * th * tw), T(0));
  for (int64_t bc = 0; bc < nb * c; ++bc)
    for (int64_t a = 0; a < d; ++a)
      for (int64_t b = 0; b < h; ++b)
        std::copy_n(x.data() + ((bc * d + a) * h + b) * w, w, out.data() + ((bc * td + a) * th + b) * tw);
  return make_result<T>("pad_spatial", {nb, c, td, th, tw}, std::move(out), {x},
                        [=](Node<T>& n) {
    T* gx = n.input_grad(0);
    if (!gx) return;
    for (int64_t bc = 0; bc < nb * c; ++bc)
      for (int64_t a = 0; a < d; ++a)
        for (int64_t b = 0; b < h; ++b)
          for (int64_t e = 0; e < w; ++e)
            gx[((bc * d + a) * h + b) * w + e] += n.grad[((bc * td + a) * th + b) * tw + e];
  });
}

// Keeps the leading `target` extent of each spatial axis.
template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& x, Dims3 target) {
  detail::require_5d(x.shape(), "crop_spatial");
  if (target == spatial_dims(x.shape())) return x;
  return slice(slice(slice(x, 2, 0, target[0]), 3, 0, target[1]), 4, 0, target[2]);
}

}  // namespace xsurv
