// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <deque>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "slimnas/tensor.hpp"

namespace slimnas {

// A learnable tensor plus its optimizer state. Moment buffers are sized on
// first use and always match the value shape.
template <typename T>
struct Parameter {
  Tensor<T> value;
  std::string name;
  std::vector<T> moment1;
  std::vector<T> moment2;
  int64_t step_count = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : value(std::move(v)), name(std::move(n)) {
    value.set_requires_grad(true);
  }

  void zero_grad() { value.zero_grad(); }
};

// Decoupled weight decay AdamW: decay applies to the value directly and never
// enters the moment estimates.
template <typename T>
class AdamW {
 public:
  explicit AdamW(std::vector<Parameter<T>*> params, T lr = T(1e-3), T beta1 = T(0.9), T beta2 = T(0.999),
                 T weight_decay = T(0.0), T eps = T(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay),
        eps_(eps), seen_backward_(Tape<T>::get().backward_count()) {}

  void set_lr(T lr) { lr_ = lr; }
  T lr() const { return lr_; }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    if (Tape<T>::get().backward_count() == seen_backward_)
      throw StateError("AdamW::step: no backward pass since the last step");
    seen_backward_ = Tape<T>::get().backward_count();
    for (auto* p : params_) {
      auto& v = p->value.data();
      auto& g = p->value.grad();
      if (p->moment1.empty()) {
        p->moment1.assign(v.size(), T(0));
        p->moment2.assign(v.size(), T(0));
      }
      p->step_count += 1;
      const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(p->step_count));
      const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(p->step_count));
      for (size_t i = 0; i < v.size(); ++i) {
        p->moment1[i] = beta1_ * p->moment1[i] + (T(1) - beta1_) * g[i];
        p->moment2[i] = beta2_ * p->moment2[i] + (T(1) - beta2_) * g[i] * g[i];
        const T mhat = p->moment1[i] / bc1;
        const T vhat = p->moment2[i] / bc2;
        v[i] -= lr_ * weight_decay_ * v[i];
        v[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  std::vector<Parameter<T>*> params_;
  T lr_, beta1_, beta2_, weight_decay_, eps_;
  uint64_t seen_backward_;
};

// Owns a model's parameters and named buffers. Parameters keep stable
// addresses (deque) so optimizers can hold pointers; names are unique.
template <typename T>
class ParamRegistry {
 public:
  // Registers and returns the value handle (same underlying buffer).
  Tensor<T> add_param(const std::string& name, Tensor<T> init) {
    if (!names_.insert(name).second) throw ConfigError("duplicate parameter name: " + name);
    params_.emplace_back(name, std::move(init));
    return params_.back().value;
  }

  Tensor<T> add_buffer(const std::string& name, Tensor<T> init) {
    if (!names_.insert(name).second) throw ConfigError("duplicate buffer name: " + name);
    buffers_.emplace_back(name, std::move(init));
    return buffers_.back().second;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::deque<Parameter<T>>& params() { return params_; }
  const std::deque<Parameter<T>>& params() const { return params_; }
  std::vector<std::pair<std::string, Tensor<T>>>& buffers() { return buffers_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& buffers() const { return buffers_; }

  int64_t total_param_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

 private:
  std::deque<Parameter<T>> params_;
  std::vector<std::pair<std::string, Tensor<T>>> buffers_;
  std::set<std::string> names_;
};

// lr(t) = peak * (1 + cos(pi * t / total)) / 2, t in [0, total).
template <typename T>
inline T cosine_lr(T peak, int64_t step, int64_t total_steps) {
  if (total_steps <= 0) return peak;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  constexpr double pi = 3.14159265358979323846;
  return static_cast<T>(static_cast<double>(peak) * 0.5 * (1.0 + std::cos(pi * frac)));
}

}  // namespace slimnas
