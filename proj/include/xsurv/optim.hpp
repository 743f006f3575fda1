#pragma once

#include <cmath>
#include <random>

#include "xsurv/tensor.hpp"

namespace xsurv {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool weight_decay = false;
};

// Ordered registry of trainable tensors. Modules register into it at
// construction; the optimizer, checkpoints and gradient checks walk it.
template <typename T>
class ParameterSet {
 public:
  Tensor<T> add(const std::string& name, Shape shape, bool weight_decay = false) {
    for (const auto& p : params_)
      if (p.name == name) throw Error("parameter registered twice: " + name);
    auto t = Tensor<T>::zeros(std::move(shape), true);
    params_.push_back({name, t, weight_decay});
    return t;
  }

  std::vector<Parameter<T>>& items() { return params_; }
  const std::vector<Parameter<T>>& items() const { return params_; }
  size_t size() const { return params_.size(); }

  const Parameter<T>* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  int64_t scalar_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Value snapshot, used for best-checkpoint retention.
  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.tensor.vec());
    return out;
  }
  void restore(const std::vector<std::vector<T>>& snap) {
    if (snap.size() != params_.size()) throw Error("restore: snapshot size mismatch");
    for (size_t i = 0; i < params_.size(); ++i) {
      auto v = params_[i].tensor.values();
      if (snap[i].size() != v.size()) throw Error("restore: shape mismatch for " + params_[i].name);
      std::copy(snap[i].begin(), snap[i].end(), v.begin());
    }
  }

 private:
  std::vector<Parameter<T>> params_;
};

// Uniform(-bound, bound) with bound = gain * sqrt(3 / fan_in).
template <typename T>
void init_uniform_fan_in(Tensor<T>& t, int64_t fan_in, std::mt19937_64& rng, double gain = 1.0) {
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(std::max<int64_t>(fan_in, 1)));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
}

template <typename T>
void fill(Tensor<T>& t, T v) {
  for (auto& x : t.values()) x = v;
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  explicit Adam(ParameterSet<T>& params, AdamOptions opt = {}) : params_(&params), opt_(opt) {
    for (const auto& p : params.items()) {
      m_.emplace_back(p.tensor.vec().size(), 0.0);
      v_.emplace_back(p.tensor.vec().size(), 0.0);
    }
  }

  // One bias-corrected update. Returns false (and counts a warning) when any
  // gradient is non-finite; parameters are then left untouched.
  bool step(double lr, double weight_decay) {
    auto& items = params_->items();
    for (auto& p : items) {
      if (!p.tensor.has_grad()) continue;
      for (T g : p.tensor.grad())
        if (!std::isfinite(static_cast<double>(g))) {
          ++skipped_;
          return false;
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < items.size(); ++i) {
      auto& p = items[i];
      if (!p.tensor.has_grad()) continue;
      auto val = p.tensor.values();
      auto grad = p.tensor.grad();
      const double wd = p.weight_decay ? weight_decay : 0.0;
      for (size_t j = 0; j < val.size(); ++j) {
        const double g = static_cast<double>(grad[j]) + wd * static_cast<double>(val[j]);
        m_[i][j] = opt_.beta1 * m_[i][j] + (1.0 - opt_.beta1) * g;
        v_[i][j] = opt_.beta2 * v_[i][j] + (1.0 - opt_.beta2) * g * g;
        const double mhat = m_[i][j] / bc1, vhat = v_[i][j] / bc2;
        val[j] = static_cast<T>(static_cast<double>(val[j]) - lr * mhat / (std::sqrt(vhat) + opt_.eps));
      }
    }
    return true;
  }

  int64_t step_count() const { return t_; }
  int64_t skipped_updates() const { return skipped_; }
  const std::vector<double>& first_moment(size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(size_t i) const { return v_.at(i); }

 private:
  ParameterSet<T>* params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
  int64_t skipped_ = 0;
};

}  // namespace xsurv
