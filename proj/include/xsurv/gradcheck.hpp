#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "xsurv/tensor.hpp"

namespace xsurv {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  bool finite = true;
  bool pass = false;
  std::string worst;  // "<input>[<index>]" of the largest error
};

struct GradCheckOptions {
  double step = 1e-5;
  double tol = 1e-4;
  // Errors are relative to max(|analytic|, |numeric|, floor).
  double floor = 1e-3;
  // Check at most this many elements per input (0 = all), chosen at random.
  int64_t max_elements = 0;
  uint64_t seed = 0;
};

// Compares reverse-mode gradients of a scalar function against central
// differences (f(x+h) - f(x-h)) / 2h, element by element.
template <typename T>
GradCheckReport gradient_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> inputs,
                               const GradCheckOptions& opt = {}) {
  GradCheckReport rep;
  for (auto& x : inputs) x.zero_grad();
  Tensor<T> out;
  try {
    out = f();
    if (out.numel() != 1) throw Error("gradient_check: function must be scalar-valued");
    if (!std::isfinite(static_cast<double>(out.item()))) {
      rep.finite = false;
      return rep;
    }
    backward(out);
  } catch (const ShapeError&) {
    throw;
  } catch (const Error& e) {
    rep.finite = false;
    rep.worst = e.what();
    return rep;
  }
  std::mt19937_64 rng(opt.seed);
  const auto eval = [&]() {
    NoGradGuard guard;
    return static_cast<double>(f().item());
  };
  for (size_t xi = 0; xi < inputs.size(); ++xi) {
    auto& x = inputs[xi];
    const auto analytic = std::vector<T>(x.grad().begin(), x.grad().end());
    std::vector<int64_t> idx(static_cast<size_t>(x.numel()));
    std::iota(idx.begin(), idx.end(), 0);
    if (opt.max_elements > 0 && x.numel() > opt.max_elements) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<size_t>(opt.max_elements));
    }
    for (int64_t i : idx) {
      T* v = x.data() + i;
      const T saved = *v;
      *v = static_cast<T>(saved + opt.step);
      const double fp = eval();
      *v = static_cast<T>(saved - opt.step);
      const double fm = eval();
      *v = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        rep.finite = false;
        return rep;
      }
      const double num = (fp - fm) / (2.0 * opt.step);
      const double ana = static_cast<double>(analytic[static_cast<size_t>(i)]);
      const double err = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), opt.floor});
      ++rep.checked;
      if (err > rep.max_rel_err || !std::isfinite(err)) {
        rep.max_rel_err = err;
        rep.worst = "input" + std::to_string(xi) + "[" + std::to_string(i) + "]";
      }
    }
  }
  rep.pass = rep.finite && rep.max_rel_err <= opt.tol;
  return rep;
}

// Directional variant: perturbs every element of each input along one random
// unit direction u and compares (f(x+hu) - f(x-hu)) / 2h with <grad, u>. Suited
// to large parameter tensors and 32-bit arithmetic.
template <typename T>
GradCheckReport directional_gradient_check(const std::function<Tensor<T>()>& f,
                                           std::vector<Tensor<T>> inputs,
                                           const GradCheckOptions& opt = {},
                                           std::vector<std::string> names = {}) {
  GradCheckReport rep;
  for (auto& x : inputs) x.zero_grad();
  auto out = f();
  if (!std::isfinite(static_cast<double>(out.item()))) {
    rep.finite = false;
    return rep;
  }
  backward(out);
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const auto eval = [&]() {
    NoGradGuard guard;
    return static_cast<double>(f().item());
  };
  for (size_t xi = 0; xi < inputs.size(); ++xi) {
    auto& x = inputs[xi];
    std::vector<double> u(static_cast<size_t>(x.numel()));
    double norm = 0.0;
    for (auto& e : u) {
      e = nd(rng);
      norm += e * e;
    }
    norm = std::sqrt(norm);
    double ana = 0.0;
    const auto g = x.grad();
    for (size_t i = 0; i < u.size(); ++i) {
      u[i] /= norm;
      ana += static_cast<double>(g[i]) * u[i];
    }
    const std::vector<T> saved(x.values().begin(), x.values().end());
    auto vals = x.values();
    for (size_t i = 0; i < u.size(); ++i) vals[i] = static_cast<T>(saved[i] + opt.step * u[i]);
    const double fp = eval();
    for (size_t i = 0; i < u.size(); ++i) vals[i] = static_cast<T>(saved[i] - opt.step * u[i]);
    const double fm = eval();
    std::copy(saved.begin(), saved.end(), vals.begin());
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      rep.finite = false;
      return rep;
    }
    const double num = (fp - fm) / (2.0 * opt.step);
    const double err = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), opt.floor});
    ++rep.checked;
    if (err > rep.max_rel_err) {
      rep.max_rel_err = err;
      rep.worst = xi < names.size() ? names[xi] : "input" + std::to_string(xi);
    }
  }
  rep.pass = rep.finite && rep.max_rel_err <= opt.tol;
  return rep;
}

}  // namespace xsurv
