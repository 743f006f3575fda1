#pragma once

#include <cmath>
#include <limits>
#include <random>

#include <Eigen/Core>

#include "xsurv/tensor.hpp"

namespace xsurv {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

inline int normalize_axis(int axis, int ndim, std::string_view op) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     std::to_string(ndim) + "-d tensor");
  return axis;
}

// Splits a shape around `axis` into (outer, axis length, inner) extents.
struct AxisSplit {
  int64_t outer = 1, len = 1, inner = 1;
};
inline AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<size_t>(i)];
  r.len = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  const size_t n = std::max(a.size(), b.size());
  Shape out(n);
  for (size_t i = 0; i < n; ++i) {
    const int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) throw ShapeError(op, static_cast<int>(i), db, da);
    out[i] = std::max(da, db);
  }
  return out;
}

// Element strides of `in` laid over `out`, zero along broadcast axes.
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  int64_t s = 1;
  for (size_t k = 0; k < in.size(); ++k) {
    const size_t i = in.size() - 1 - k;
    const size_t o = out.size() - 1 - k;
    st[o] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  return st;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, F&& f) {
  const size_t nd = out.size();
  const int64_t last = out[nd - 1];
  const int64_t la = sa[nd - 1], lb = sb[nd - 1];
  std::vector<int64_t> idx(nd, 0);
  int64_t o = 0, ia = 0, ib = 0;
  const int64_t rows = numel_of(out) / last;
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < last; ++j) f(o + j, ia + j * la, ib + j * lb);
    o += last;
    for (int d = static_cast<int>(nd) - 2; d >= 0; --d) {
      const auto du = static_cast<size_t>(d);
      ++idx[du];
      ia += sa[du];
      ib += sb[du];
      if (idx[du] < out[du]) break;
      ia -= sa[du] * out[du];
      ib -= sb[du] * out[du];
      idx[du] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, std::string_view name) {
  const auto apply = [kind](T x, T y) {
    switch (kind) {
      case BinaryKind::kAdd: return x + y;
      case BinaryKind::kSub: return x - y;
      case BinaryKind::kMul: return x * y;
      case BinaryKind::kDiv: return x / y;
    }
    return T(0);
  };
  if (a.shape() == b.shape()) {
    Buffer<T> out(a.vec().size());
    const T* pa = a.data();
    const T* pb = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = apply(pa[i], pb[i]);
    return make_result<T>(name, a.shape(), std::move(out), {a, b}, [kind](Node<T>& n) {
      const T* g = n.grad.data();
      const T* va = n.input_value(0);
      const T* vb = n.input_value(1);
      const size_t m = n.value.size();
      if (T* ga = n.input_grad(0)) {
        for (size_t i = 0; i < m; ++i) {
          switch (kind) {
            case BinaryKind::kAdd:
            case BinaryKind::kSub: ga[i] += g[i]; break;
            case BinaryKind::kMul: ga[i] += g[i] * vb[i]; break;
            case BinaryKind::kDiv: ga[i] += g[i] / vb[i]; break;
          }
        }
      }
      if (T* gb = n.input_grad(1)) {
        for (size_t i = 0; i < m; ++i) {
          switch (kind) {
            case BinaryKind::kAdd: gb[i] += g[i]; break;
            case BinaryKind::kSub: gb[i] -= g[i]; break;
            case BinaryKind::kMul: gb[i] += g[i] * va[i]; break;
            case BinaryKind::kDiv: gb[i] -= g[i] * va[i] / (vb[i] * vb[i]); break;
          }
        }
      }
    });
  }
  Shape os = broadcast_shape(a.shape(), b.shape(), name);
  auto sa = broadcast_strides(a.shape(), os);
  auto sb = broadcast_strides(b.shape(), os);
  Buffer<T> out(static_cast<size_t>(numel_of(os)));
  const T* pa = a.data();
  const T* pb = b.data();
  for_each_broadcast(os, sa, sb,
                     [&](int64_t o, int64_t ia, int64_t ib) { out[o] = apply(pa[ia], pb[ib]); });
  return make_result<T>(name, os, std::move(out), {a, b}, [kind, os, sa, sb](Node<T>& n) {
    const T* g = n.grad.data();
    const T* va = n.input_value(0);
    const T* vb = n.input_value(1);
    T* ga = n.input_grad(0);
    T* gb = n.input_grad(1);
    for_each_broadcast(os, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
      switch (kind) {
        case BinaryKind::kAdd:
          if (ga) ga[ia] += g[o];
          if (gb) gb[ib] += g[o];
          break;
        case BinaryKind::kSub:
          if (ga) ga[ia] += g[o];
          if (gb) gb[ib] -= g[o];
          break;
        case BinaryKind::kMul:
          if (ga) ga[ia] += g[o] * vb[ib];
          if (gb) gb[ib] += g[o] * va[ia];
          break;
        case BinaryKind::kDiv:
          if (ga) ga[ia] += g[o] / vb[ib];
          if (gb) gb[ib] -= g[o] * va[ia] / (vb[ib] * vb[ib]);
          break;
      }
    });
  });
}

// Elementwise map y = f(x) with dy/dx = df(x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, std::string_view name, F f, DF df) {
  Buffer<T> out(x.vec().size());
  const T* px = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(px[i]);
  return make_result<T>(name, x.shape(), std::move(out), {x}, [df](Node<T>& n) {
    T* gx = n.input_grad(0);
    if (!gx) return;
    const T* g = n.grad.data();
    const T* vx = n.input_value(0);
    const T* vy = n.value.data();
    for (size_t i = 0; i < n.value.size(); ++i) gx[i] += g[i] * df(vx[i], vy[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style broadcasting)

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::kAdd, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::kSub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::kMul, "mul");
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::kDiv, "div");
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// Activations and pointwise functions

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}
template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.01)) {
  return detail::unary(
      x, "leaky_relu", [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, "sigmoid",
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  const T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary(
      x, "gelu", [=](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [=](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-T(0.5) * v * v);
      });
}
// Clamp into [lo, hi]; gradient passes only strictly inside the range.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary(
      x, "clamp", [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T lo) {
  return clamp(x, lo, std::numeric_limits<T>::max());
}
template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& x, T p) {
  return detail::unary(
      x, "pow", [p](T v) { return p == T(0) ? T(1) : std::pow(v, p); },
      [p](T v, T) { return p == T(0) ? T(0) : p * std::pow(v, p - T(1)); });
}
template <typename T>
Tensor<T> one_minus(const Tensor<T>& x) {
  return detail::unary(x, "one_minus", [](T v) { return T(1) - v; }, [](T, T) { return T(-1); });
}

// Inverted dropout: eval mode is the identity; train mode keeps each element
// with probability 1-p and scales survivors by 1/(1-p).
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, bool train, std::mt19937_64& rng) {
  if (!train || p <= T(0)) return x;
  if (p >= T(1)) throw Error("dropout: rate must be < 1");
  const T keep_scale = T(1) / (T(1) - p);
  Buffer<T> mask(x.vec().size());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& m : mask) m = u(rng) >= static_cast<double>(p) ? keep_scale : T(0);
  Buffer<T> out(mask.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  return make_result<T>("dropout", x.shape(), std::move(out), {x},
                        [mask = std::move(mask)](Node<T>& n) {
                          T* gx = n.input_grad(0);
                          if (!gx) return;
                          for (size_t i = 0; i < mask.size(); ++i) gx[i] += n.grad[i] * mask[i];
                        });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  return make_result<T>("sum", {1}, {s}, {x}, [](Node<T>& n) {
    T* gx = n.input_grad(0);
    if (!gx) return;
    const T g = n.grad[0];
    for (size_t i = 0; i < n.inputs[0]->value.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Sum along one axis; the axis is kept with length 1 when keepdim.
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis, bool keepdim = false) {
  axis = detail::normalize_axis(axis, x.ndim(), "sum_axis");
  const auto sp = detail::split_at(x.shape(), axis);
  Shape os = x.shape();
  if (keepdim)
    os[static_cast<size_t>(axis)] = 1;
  else
    os.erase(os.begin() + axis);
  if (os.empty()) os = {1};
  Buffer<T> out(static_cast<size_t>(sp.outer * sp.inner), T(0));
  const T* px = x.data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t a = 0; a < sp.len; ++a)
      for (int64_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += px[(o * sp.len + a) * sp.inner + i];
  return make_result<T>("sum_axis", os, std::move(out), {x}, [sp](Node<T>& n) {
    T* gx = n.input_grad(0);
    if (!gx) return;
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t a = 0; a < sp.len; ++a)
        for (int64_t i = 0; i < sp.inner; ++i)
          gx[(o * sp.len + a) * sp.inner + i] += n.grad[o * sp.inner + i];
  });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis, bool keepdim = false) {
  const int a = detail::normalize_axis(axis, x.ndim(), "mean_axis");
  return scale(sum_axis(x, a, keepdim), T(1) / static_cast<T>(x.dim(a)));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred axis");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) shape[static_cast<size_t>(infer)] = known ? x.numel() / known : 0;
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  return make_result<T>("reshape", shape, x.vec(), {x}, [](Node<T>& n) {
    T* gx = n.input_grad(0);
    if (!gx) return;
    for (size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const int nd = x.ndim();
  if (static_cast<int>(perm.size()) != nd) throw ShapeError("permute: wrong number of axes");
  std::vector<int64_t> in_strides(static_cast<size_t>(nd), 1);
  for (int i = nd - 2; i >= 0; --i)
    in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i) + 1] * x.dim(i + 1);
  Shape os(static_cast<size_t>(nd));
  std::vector<int64_t> src_strides(static_cast<size_t>(nd));
  std::vector<bool> used(static_cast<size_t>(nd), false);
  for (int i = 0; i < nd; ++i) {
    const int p = detail::normalize_axis(perm[static_cast<size_t>(i)], nd, "permute");
    if (used[static_cast<size_t>(p)]) throw ShapeError("permute: repeated axis");
    used[static_cast<size_t>(p)] = true;
    os[static_cast<size_t>(i)] = x.dim(p);
    src_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(p)];
  }
  // Source offset for each output element, reused by backward.
  std::vector<int64_t> src(static_cast<size_t>(x.numel()));
  {
    std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
    int64_t off = 0;
    for (size_t o = 0; o < src.size(); ++o) {
      src[o] = off;
      for (int d = nd - 1; d >= 0; --d) {
        const auto du = static_cast<size_t>(d);
        ++idx[du];
        off += src_strides[du];
        if (idx[du] < os[du]) break;
        off -= src_strides[du] * os[du];
        idx[du] = 0;
      }
    }
  }
  Buffer<T> out(src.size());
  for (size_t o = 0; o < src.size(); ++o) out[o] = x.data()[src[o]];
  return make_result<T>("permute", os, std::move(out), {x}, [src = std::move(src)](Node<T>& n) {
    T* gx = n.input_grad(0);
    if (!gx) return;
    for (size_t o = 0; o < src.size(); ++o) gx[src[o]] += n.grad[o];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const int nd = xs[0].ndim();
  axis = detail::normalize_axis(axis, nd, "concat");
  Shape os = xs[0].shape();
  os[static_cast<size_t>(axis)] = 0;
  for (const auto& t : xs) {
    if (t.ndim() != nd) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != axis && t.dim(d) != xs[0].dim(d)) throw ShapeError("concat", d, t.dim(d), xs[0].dim(d));
    os[static_cast<size_t>(axis)] += t.dim(axis);
  }
  const auto sp = detail::split_at(os, axis);
  Buffer<T> out(static_cast<size_t>(numel_of(os)));
  std::vector<int64_t> lens;
  int64_t base = 0;
  for (const auto& t : xs) {
    const int64_t len = t.dim(axis);
    lens.push_back(len);
    const T* p = t.data();
    for (int64_t o = 0; o < sp.outer; ++o)
      std::copy_n(p + o * len * sp.inner, len * sp.inner, out.data() + (o * sp.len + base) * sp.inner);
    base += len;
  }
  return make_result<T>("concat", os, std::move(out), xs, [sp, lens](Node<T>& n) {
    int64_t b = 0;
    for (size_t k = 0; k < lens.size(); ++k) {
      const int64_t len = lens[k];
      if (T* g = n.input_grad(k)) {
        for (int64_t o = 0; o < sp.outer; ++o) {
          const T* src = n.grad.data() + (o * sp.len + b) * sp.inner;
          T* dst = g + o * len * sp.inner;
          for (int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
        }
      }
      b += len;
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int64_t start, int64_t length) {
  axis = detail::normalize_axis(axis, x.ndim(), "slice");
  if (start < 0 || length <= 0 || start + length > x.dim(axis))
    throw ShapeError("slice", axis, start + length, x.dim(axis));
  const auto sp = detail::split_at(x.shape(), axis);
  Shape os = x.shape();
  os[static_cast<size_t>(axis)] = length;
  Buffer<T> out(static_cast<size_t>(numel_of(os)));
  for (int64_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.data() + (o * sp.len + start) * sp.inner, length * sp.inner,
                out.data() + o * length * sp.inner);
  return make_result<T>("slice", os, std::move(out), {x}, [sp, start, length](Node<T>& n) {
    T* gx = n.input_grad(0);
    if (!gx) return;
    for (int64_t o = 0; o < sp.outer; ++o) {
      const T* src = n.grad.data() + o * length * sp.inner;
      T* dst = gx + (o * sp.len + start) * sp.inner;
      for (int64_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax along an axis, max-subtracted.

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  axis = detail::normalize_axis(axis, x.ndim(), "softmax");
  const auto sp = detail::split_at(x.shape(), axis);
  Buffer<T> out(x.vec().size());
  const T* px = x.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      const int64_t base = o * sp.len * sp.inner + i;
      T m = -std::numeric_limits<T>::infinity();
      for (int64_t a = 0; a < sp.len; ++a) m = std::max(m, px[base + a * sp.inner]);
      T z = T(0);
      for (int64_t a = 0; a < sp.len; ++a) {
        const T e = std::exp(px[base + a * sp.inner] - m);
        out[base + a * sp.inner] = e;
        z += e;
      }
      for (int64_t a = 0; a < sp.len; ++a) out[base + a * sp.inner] /= z;
    }
  }
  return make_result<T>("softmax", x.shape(), std::move(out), {x}, [sp](Node<T>& n) {
    T* gx = n.input_grad(0);
    if (!gx) return;
    const T* y = n.value.data();
    const T* g = n.grad.data();
    for (int64_t o = 0; o < sp.outer; ++o) {
      for (int64_t i = 0; i < sp.inner; ++i) {
        const int64_t base = o * sp.len * sp.inner + i;
        T dot = T(0);
        for (int64_t a = 0; a < sp.len; ++a) dot += g[base + a * sp.inner] * y[base + a * sp.inner];
        for (int64_t a = 0; a < sp.len; ++a) {
          const int64_t k = base + a * sp.inner;
          gx[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Dense algebra

// [M,K] x [K,N] -> [M,N]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul: expects 2-d operands");
  if (a.dim(1) != b.dim(0)) throw ShapeError("matmul", 0, b.dim(0), a.dim(1));
  const int64_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  Buffer<T> out(static_cast<size_t>(m * nn));
  Eigen::Map<MatrixRM<T>>(out.data(), m, nn).noalias() =
      Eigen::Map<const MatrixRM<T>>(a.data(), m, k) * Eigen::Map<const MatrixRM<T>>(b.data(), k, nn);
  return make_result<T>("matmul", {m, nn}, std::move(out), {a, b}, [m, k, nn](Node<T>& n) {
    Eigen::Map<const MatrixRM<T>> g(n.grad.data(), m, nn);
    if (T* ga = n.input_grad(0))
      Eigen::Map<MatrixRM<T>>(ga, m, k).noalias() +=
          g * Eigen::Map<const MatrixRM<T>>(n.input_value(1), k, nn).transpose();
    if (T* gb = n.input_grad(1))
      Eigen::Map<MatrixRM<T>>(gb, k, nn).noalias() +=
          Eigen::Map<const MatrixRM<T>>(n.input_value(0), m, k).transpose() * g;
  });
}

// Affine layer: x [N,F] * W^T [F,O] + b [O] -> [N,O].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.ndim() != 2 || weight.ndim() != 2) throw ShapeError("linear: expects 2-d input and weight");
  if (x.dim(1) != weight.dim(1)) throw ShapeError("linear", 1, x.dim(1), weight.dim(1));
  const int64_t nb = x.dim(0), f = x.dim(1), o = weight.dim(0);
  if (bias && bias.numel() != o) throw ShapeError("linear", 0, bias.numel(), o);
  Buffer<T> out(static_cast<size_t>(nb * o));
  Eigen::Map<MatrixRM<T>> y(out.data(), nb, o);
  y.noalias() = Eigen::Map<const MatrixRM<T>>(x.data(), nb, f) *
                Eigen::Map<const MatrixRM<T>>(weight.data(), o, f).transpose();
  if (bias)
    for (int64_t r = 0; r < nb; ++r)
      for (int64_t c = 0; c < o; ++c) y(r, c) += bias.data()[c];
  std::vector<Tensor<T>> ins{x, weight};
  if (bias) ins.push_back(bias);
  return make_result<T>("linear", {nb, o}, std::move(out), ins, [nb, f, o](Node<T>& n) {
    Eigen::Map<const MatrixRM<T>> g(n.grad.data(), nb, o);
    if (T* gx = n.input_grad(0))
      Eigen::Map<MatrixRM<T>>(gx, nb, f).noalias() +=
          g * Eigen::Map<const MatrixRM<T>>(n.input_value(1), o, f);
    if (T* gw = n.input_grad(1))
      Eigen::Map<MatrixRM<T>>(gw, o, f).noalias() +=
          g.transpose() * Eigen::Map<const MatrixRM<T>>(n.input_value(0), nb, f);
    if (n.inputs.size() > 2)
      if (T* gb = n.input_grad(2))
        for (int64_t r = 0; r < nb; ++r)
          for (int64_t c = 0; c < o; ++c) gb[c] += g(r, c);
  });
}

// ---------------------------------------------------------------------------
// Per-voxel normalization across channels of [N,C,...] (transformer pre-norm).

template <typename T>
Tensor<T> channel_layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             T eps = T(1e-5)) {
  if (x.ndim() < 2) throw ShapeError("channel_layer_norm: expects [N,C,...]");
  const int64_t nb = x.dim(0), c = x.dim(1), s = x.numel() / (nb * c);
  if (gamma.numel() != c) throw ShapeError("channel_layer_norm", 1, gamma.numel(), c);
  if (beta.numel() != c) throw ShapeError("channel_layer_norm", 1, beta.numel(), c);
  Buffer<T> out(x.vec().size());
  Buffer<T> xhat(x.vec().size());
  Buffer<T> inv_std(static_cast<size_t>(nb * s));
  const T* px = x.data();
  for (int64_t b = 0; b < nb; ++b) {
    const T* xb = px + b * c * s;
    Buffer<T> mu(static_cast<size_t>(s), T(0)), var(static_cast<size_t>(s), T(0));
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t v = 0; v < s; ++v) mu[v] += xb[ch * s + v];
    for (auto& m : mu) m /= static_cast<T>(c);
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t v = 0; v < s; ++v) {
        const T d = xb[ch * s + v] - mu[v];
        var[v] += d * d;
      }
    for (int64_t v = 0; v < s; ++v) inv_std[b * s + v] = T(1) / std::sqrt(var[v] / static_cast<T>(c) + eps);
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t v = 0; v < s; ++v) {
        const int64_t k = (b * c + ch) * s + v;
        xhat[k] = (xb[ch * s + v] - mu[v]) * inv_std[b * s + v];
        out[k] = gamma.data()[ch] * xhat[k] + beta.data()[ch];
      }
  }
  return make_result<T>(
      "channel_layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [nb, c, s, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& n) {
        const T* g = n.grad.data();
        const T* gam = n.input_value(1);
        if (T* gg = n.input_grad(1))
          for (int64_t b = 0; b < nb; ++b)
            for (int64_t ch = 0; ch < c; ++ch)
              for (int64_t v = 0; v < s; ++v) gg[ch] += g[(b * c + ch) * s + v] * xhat[(b * c + ch) * s + v];
        if (T* gb = n.input_grad(2))
          for (int64_t b = 0; b < nb; ++b)
            for (int64_t ch = 0; ch < c; ++ch)
              for (int64_t v = 0; v < s; ++v) gb[ch] += g[(b * c + ch) * s + v];
        T* gx = n.input_grad(0);
        if (!gx) return;
        Buffer<T> m1(static_cast<size_t>(s)), m2(static_cast<size_t>(s));
        for (int64_t b = 0; b < nb; ++b) {
          std::fill(m1.begin(), m1.end(), T(0));
          std::fill(m2.begin(), m2.end(), T(0));
          for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t v = 0; v < s; ++v) {
              const int64_t k = (b * c + ch) * s + v;
              const T dxh = g[k] * gam[ch];
              m1[v] += dxh;
              m2[v] += dxh * xhat[k];
            }
          for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t v = 0; v < s; ++v) {
              const int64_t k = (b * c + ch) * s + v;
              const T dxh = g[k] * gam[ch];
              gx[k] += inv_std[b * s + v] *
                       (dxh - m1[v] / static_cast<T>(c) - xhat[k] * m2[v] / static_cast<T>(c));
            }
        }
      });
}

}  // namespace xsurv
