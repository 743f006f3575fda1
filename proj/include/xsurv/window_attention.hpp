#pragma once

#include <map>
#include <mutex>

#include "xsurv/volume_ops.hpp"

namespace xsurv {

// Token layout for windowed attention over a D x H x W grid.
//
// The grid is zero-padded up to a multiple of the (clamped) window, then, for
// shifted windows, cyclically rolled by half a window. Tokens that land on
// padding are masked as keys; tokens from different roll regions never attend
// to each other.
struct WindowPlan {
  Dims3 dims{};
  Dims3 window{};      // effective window after clamping to dims
  Dims3 table_window{};  // window the bias table was sized for
  Dims3 shift{};
  Dims3 padded{};
  int64_t tokens = 0;
  int64_t num_windows = 0;
  std::vector<int64_t> src;     // [num_windows * tokens] flat spatial index, -1 = padding
  std::vector<int> region;      // [num_windows * tokens]
  std::vector<int32_t> rel;     // [tokens * tokens] index into the bias table
  int64_t table_size = 0;
};

inline int64_t relative_table_size(Dims3 window) {
  return (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1);
}

inline WindowPlan make_window_plan(Dims3 dims, Dims3 window, bool shifted) {
  WindowPlan p;
  p.dims = dims;
  p.table_window = window;
  for (int a = 0; a < 3; ++a) {
    if (window[a] < 1) throw ShapeError("window_attention: window must be positive");
    p.window[a] = std::min(window[a], dims[a]);
    p.shift[a] = (shifted && dims[a] > p.window[a]) ? p.window[a] / 2 : 0;
    p.padded[a] = (dims[a] + p.window[a] - 1) / p.window[a] * p.window[a];
  }
  p.tokens = p.window[0] * p.window[1] * p.window[2];
  const Dims3 nw{p.padded[0] / p.window[0], p.padded[1] / p.window[1], p.padded[2] / p.window[2]};
  p.num_windows = nw[0] * nw[1] * nw[2];
  p.src.resize(static_cast<size_t>(p.num_windows * p.tokens));
  p.region.resize(p.src.size());
  const auto region_of = [&](int a, int64_t pos) {
    if (p.shift[a] == 0) return 0;
    if (pos < p.padded[a] - p.window[a]) return 0;
    return pos < p.padded[a] - p.shift[a] ? 1 : 2;
  };
  int64_t slot = 0;
  for (int64_t wd = 0; wd < nw[0]; ++wd)
    for (int64_t wh = 0; wh < nw[1]; ++wh)
      for (int64_t ww = 0; ww < nw[2]; ++ww)
        for (int64_t a = 0; a < p.window[0]; ++a)
          for (int64_t b = 0; b < p.window[1]; ++b)
            for (int64_t c = 0; c < p.window[2]; ++c, ++slot) {
              const Dims3 pos{wd * p.window[0] + a, wh * p.window[1] + b, ww * p.window[2] + c};
              Dims3 orig{};
              bool valid = true;
              for (int ax = 0; ax < 3; ++ax) {
                orig[ax] = (pos[ax] + p.shift[ax]) % p.padded[ax];
                valid = valid && orig[ax] < dims[ax];
              }
              p.src[slot] = valid ? (orig[0] * dims[1] + orig[1]) * dims[2] + orig[2] : -1;
              p.region[slot] = region_of(0, pos[0]) * 9 + region_of(1, pos[1]) * 3 + region_of(2, pos[2]);
            }
  p.table_size = relative_table_size(window);
  p.rel.resize(static_cast<size_t>(p.tokens * p.tokens));
  const int64_t sh = 2 * window[1] - 1, sw = 2 * window[2] - 1;
  int64_t i = 0;
  for (int64_t a = 0; a < p.window[0]; ++a)
    for (int64_t b = 0; b < p.window[1]; ++b)
      for (int64_t c = 0; c < p.window[2]; ++c, ++i) {
        int64_t j = 0;
        for (int64_t a2 = 0; a2 < p.window[0]; ++a2)
          for (int64_t b2 = 0; b2 < p.window[1]; ++b2)
            for (int64_t c2 = 0; c2 < p.window[2]; ++c2, ++j) {
              const int64_t dd = a - a2 + window[0] - 1, dh = b - b2 + window[1] - 1,
                            dw = c - c2 + window[2] - 1;
              p.rel[static_cast<size_t>(i * p.tokens + j)] = static_cast<int32_t>((dd * sh + dh) * sw + dw);
            }
      }
  return p;
}

// Plans are pure functions of their key; cached per process.
inline std::shared_ptr<const WindowPlan> cached_window_plan(Dims3 dims, Dims3 window, bool shifted) {
  static std::mutex mu;
  static std::map<std::tuple<Dims3, Dims3, bool>, std::shared_ptr<const WindowPlan>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_tuple(dims, window, shifted);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto plan = std::make_shared<const WindowPlan>(make_window_plan(dims, window, shifted));
  cache.emplace(key, plan);
  return plan;
}

// Multi-head windowed attention. q, k, v: [N,C,D,H,W] with C = heads * head_dim;
// bias_table: [heads, relative_table_size(window)]. Queries attend to keys in the
// same window; the scaled dot product gets a learned relative-position bias.
template <typename T>
Tensor<T> window_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const Tensor<T>& bias_table, int64_t heads, Dims3 window, bool shifted) {
  detail::require_5d(q.shape(), "window_attention");
  for (int a = 0; a < 5; ++a) {
    if (k.dim(a) != q.dim(a)) throw ShapeError("window_attention(key)", a, k.dim(a), q.dim(a));
    if (v.dim(a) != q.dim(a)) throw ShapeError("window_attention(value)", a, v.dim(a), q.dim(a));
  }
  const int64_t nb = q.dim(0), c = q.dim(1);
  if (heads < 1 || c % heads != 0) throw ShapeError("window_attention", 1, c, heads);
  const int64_t hd = c / heads;
  auto plan = cached_window_plan(spatial_dims(q.shape()), window, shifted);
  if (bias_table.ndim() != 2 || bias_table.dim(0) != heads || bias_table.dim(1) != plan->table_size)
    throw ShapeError("window_attention: bias table must be [" + std::to_string(heads) + "," +
                     std::to_string(plan->table_size) + "], got " + to_string(bias_table.shape()));
  const int64_t s = q.numel() / (nb * c);
  const int64_t tk = plan->tokens;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(hd));
  using Mat = MatrixRM<T>;

  const auto gather = [plan, s, c, hd, tk](const T* src, int64_t b, int64_t win, int64_t h, Mat& m) {
    m.resize(tk, hd);
    const int64_t* idx = plan->src.data() + win * tk;
    for (int64_t t = 0; t < tk; ++t) {
      if (idx[t] < 0) {
        m.row(t).setZero();
        continue;
      }
      for (int64_t ch = 0; ch < hd; ++ch) m(t, ch) = src[(b * c + h * hd + ch) * s + idx[t]];
    }
  };

  Buffer<T> out(q.vec().size(), T(0));
  Buffer<T> probs(static_cast<size_t>(nb * plan->num_windows * heads * tk * tk));
  Mat qm, km, vm, sc, om;
  for (int64_t b = 0; b < nb; ++b)
    for (int64_t win = 0; win < plan->num_windows; ++win) {
      const int64_t* idx = plan->src.data() + win * tk;
      const int* reg = plan->region.data() + win * tk;
      for (int64_t h = 0; h < heads; ++h) {
        gather(q.data(), b, win, h, qm);
        gather(k.data(), b, win, h, km);
        gather(v.data(), b, win, h, vm);
        sc.noalias() = (qm * km.transpose()) * scale_factor;
        const T* bias = bias_table.data() + h * plan->table_size;
        T* pr = probs.data() + ((b * plan->num_windows + win) * heads + h) * tk * tk;
        for (int64_t i = 0; i < tk; ++i) {
          T mx = -std::numeric_limits<T>::infinity();
          for (int64_t j = 0; j < tk; ++j) {
            if (idx[j] < 0 || reg[j] != reg[i]) continue;
            sc(i, j) += bias[plan->rel[static_cast<size_t>(i * tk + j)]];
            mx = std::max(mx, sc(i, j));
          }
          T z = T(0);
          for (int64_t j = 0; j < tk; ++j) {
            const bool ok = idx[j] >= 0 && reg[j] == reg[i];
            const T e = ok ? std::exp(sc(i, j) - mx) : T(0);
            pr[i * tk + j] = e;
            z += e;
          }
          for (int64_t j = 0; j < tk; ++j) pr[i * tk + j] = z > T(0) ? pr[i * tk + j] / z : T(0);
        }
        om.noalias() = Eigen::Map<const Mat>(pr, tk, tk) * vm;
        for (int64_t t = 0; t < tk; ++t) {
          if (idx[t] < 0) continue;
          for (int64_t ch = 0; ch < hd; ++ch) out[(b * c + h * hd + ch) * s + idx[t]] = om(t, ch);
        }
      }
    }

  return make_result<T>(
      "window_attention", q.shape(), std::move(out), {q, k, v, bias_table},
      [plan, probs = std::move(probs), gather, nb, c, s, heads, hd, tk, scale_factor](Node<T>& n) {
        T* gq = n.input_grad(0);
        T* gk = n.input_grad(1);
        T* gv = n.input_grad(2);
        T* gbias = n.input_grad(3);
        Mat qm, km, vm, gom, dp, ds, tmp;
        for (int64_t b = 0; b < nb; ++b)
          for (int64_t win = 0; win < plan->num_windows; ++win) {
            const int64_t* idx = plan->src.data() + win * tk;
            for (int64_t h = 0; h < heads; ++h) {
              const T* pr = probs.data() + ((b * plan->num_windows + win) * heads + h) * tk * tk;
              Eigen::Map<const Mat> pm(pr, tk, tk);
              gather(n.grad.data(), b, win, h, gom);
              gather(n.input_value(0), b, win, h, qm);
              gather(n.input_value(1), b, win, h, km);
              gather(n.input_value(2), b, win, h, vm);
              const auto scatter = [&](T* dst, const Mat& m) {
                for (int64_t t = 0; t < tk; ++t) {
                  if (idx[t] < 0) continue;
                  for (int64_t ch = 0; ch < hd; ++ch) dst[(b * c + h * hd + ch) * s + idx[t]] += m(t, ch);
                }
              };
              if (gv) {
                tmp.noalias() = pm.transpose() * gom;
                scatter(gv, tmp);
              }
              dp.noalias() = gom * vm.transpose();
              ds.resize(tk, tk);
              for (int64_t i = 0; i < tk; ++i) {
                T dot = T(0);
                for (int64_t j = 0; j < tk; ++j) dot += dp(i, j) * pm(i, j);
                for (int64_t j = 0; j < tk; ++j) ds(i, j) = pm(i, j) * (dp(i, j) - dot);
              }
              if (gbias) {
                T* gb = gbias + h * plan->table_size;
                for (int64_t i = 0; i < tk; ++i) {
                  if (idx[i] < 0) continue;
                  for (int64_t j = 0; j < tk; ++j) gb[plan->rel[static_cast<size_t>(i * tk + j)]] += ds(i, j);
                }
              }
              if (gq) {
                tmp.noalias() = (ds * km) * scale_factor;
                scatter(gq, tmp);
              }
              if (gk) {
                tmp.noalias() = (ds.transpose() * qm) * scale_factor;
                scatter(gk, tmp);
              }
            }
          }
      });
}

}  // namespace xsurv
