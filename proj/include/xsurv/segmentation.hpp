#pragma once

#include <span>

#include "xsurv/ops.hpp"

namespace xsurv {

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
  // false: alpha weights only the positive term, as printed; true: the
  // negative term gets (1 - alpha).
  bool standard_alpha = false;
  double eps = 1e-7;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw Error("FocalParams: alpha must be in (0, 1)");
    if (!(gamma >= 0.0)) throw Error("FocalParams: gamma must be >= 0");
  }
};

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& p, const Tensor<T>& g, std::string_view op) {
  if (p.ndim() != g.ndim()) throw ShapeError(op, 0, g.ndim(), p.ndim());
  for (int a = 0; a < p.ndim(); ++a)
    if (p.dim(a) != g.dim(a)) throw ShapeError(op, a, g.dim(a), p.dim(a));
}

// [B, ...] -> [B, rest]
template <typename T>
Tensor<T> flatten_batch(const Tensor<T>& x) {
  return reshape(x, {x.dim(0), -1});
}

}  // namespace detail

// 1 - (2 sum p g + smooth) / (sum p^2 + sum g^2 + smooth), per sample, averaged
// over the batch (axis 0).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& p, const Tensor<T>& g, double smooth = 1e-5) {
  detail::require_same_shape(p, g, "dice_loss");
  const auto pf = detail::flatten_batch(p), gf = detail::flatten_batch(g);
  const T s = static_cast<T>(smooth);
  auto num = add_scalar(scale(sum_axis(mul(pf, gf), 1), T(2)), s);
  auto den = add_scalar(add(sum_axis(mul(pf, pf), 1), sum_axis(mul(gf, gf), 1)), s);
  return one_minus(mean(div(num, den)));
}

// -[alpha g (1-p)^gamma log p + w_neg (1-g) p^gamma log(1-p)], averaged over
// all voxels; p is clamped into [eps, 1 - eps].
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& p, const Tensor<T>& g, const FocalParams& fp = {}) {
  fp.validate();
  detail::require_same_shape(p, g, "focal_loss");
  const T e = static_cast<T>(fp.eps), gm = static_cast<T>(fp.gamma);
  auto pc = clamp(p, e, T(1) - e);
  auto qc = one_minus(pc);
  auto pos = mul(scale(g, static_cast<T>(fp.alpha)), mul(pow_scalar(qc, gm), log(pc)));
  const T w_neg = fp.standard_alpha ? static_cast<T>(1.0 - fp.alpha) : T(1);
  auto neg = mul(scale(one_minus(g), w_neg), mul(pow_scalar(pc, gm), log(qc)));
  return scale(mean(add(pos, neg)), T(-1));
}

template <typename T>
Tensor<T> segmentation_loss(const Tensor<T>& p, const Tensor<T>& g, const FocalParams& fp = {},
                            double smooth = 1e-5) {
  return add(dice_loss(p, g, smooth), focal_loss(p, g, fp));
}

// L_surv + lambda (L_pt + L_mln). Absent segmentation terms count as zero.
template <typename T>
Tensor<T> combined_loss(const Tensor<T>& surv, const Tensor<T>& pt, const Tensor<T>& mln, double lambda = 1.0) {
  for (const auto* t : {&surv, &pt, &mln})
    if (*t && !std::isfinite(static_cast<double>(t->item()))) throw Error("combined_loss: non-finite component");
  Tensor<T> seg;
  if (pt && mln)
    seg = add(pt, mln);
  else if (pt)
    seg = pt;
  else if (mln)
    seg = mln;
  if (!seg) return surv;
  return add(surv, scale(seg, static_cast<T>(lambda)));
}

// 2|P & G| / (|P| + |G|) on binary masks (nonzero = foreground); 1 when both
// are empty.
template <typename A, typename B>
double dsc_metric(std::span<const A> pred, std::span<const B> gt) {
  if (pred.size() != gt.size()) throw ShapeError("dsc_metric", 0, pred.size(), gt.size());
  int64_t inter = 0, np = 0, ng = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != A(0), b = gt[i] != B(0);
    inter += a && b;
    np += a;
    ng += b;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

// Foreground where prob > threshold.
template <typename T>
std::vector<float> binarize(std::span<const T> prob, double threshold = 0.5) {
  std::vector<float> out(prob.size());
  for (size_t i = 0; i < prob.size(); ++i) out[i] = static_cast<double>(prob[i]) > threshold ? 1.0f : 0.0f;
  return out;
}

}  // namespace xsurv
