// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense tensor with reverse-mode autodiff. A Tensor is a shared
// handle to a row-major buffer; forward ops append backward closures to a
// thread-local tape which backward() replays in exact reverse order.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "slimnas/common.hpp"

namespace slimnas {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily; same length as data once present
  bool requires_grad = false;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

// Autograd bookkeeping is thread-local: one tape per thread, so independent
// model instances can run on separate threads without sharing state.
template <typename T>
class Tape {
 public:
  static Tape& get() {
    thread_local Tape tape;
    return tape;
  }

  bool recording() const { return enabled_; }
  void set_enabled(bool on) { enabled_ = on; }

  void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }

  size_t size() const { return entries_.size(); }

  // Replays entries newest-first, then clears the tape.
  void replay_and_clear() {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
    ++backward_count_;
  }

  void clear() { entries_.clear(); }

  uint64_t backward_count() const { return backward_count_; }

 private:
  std::vector<std::function<void()>> entries_;
  bool enabled_ = true;
  uint64_t backward_count_ = 0;
};

// RAII guard disabling tape recording (evaluation / benchmarking paths).
template <typename T>
class NoGradGuard {
 public:
  NoGradGuard() : prev_(Tape<T>::get().recording()) { Tape<T>::get().set_enabled(false); }
  ~NoGradGuard() { Tape<T>::get().set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
class Tensor {
 public:
  Tensor() : node_(std::make_shared<TensorNode<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    for (int64_t d : shape) {
      if (d <= 0) throw ConfigError("tensor extents must be positive, got " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data.assign(static_cast<size_t>(numel_of(node_->shape)), fill);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->ensure_grad();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    return Tensor(std::move(shape), value, requires_grad);
  }

  static Tensor from_vector(Shape shape, const std::vector<T>& values, bool requires_grad = false) {
    Tensor t(std::move(shape), T(0), requires_grad);
    if (static_cast<int64_t>(values.size()) != t.numel())
      throw ConfigError("from_vector: value count does not match shape " + shape_str(t.shape()));
    t.node_->data = values;
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, T std = T(1), bool requires_grad = false) {
    Tensor t(std::move(shape), T(0), requires_grad);
    for (auto& v : t.node_->data) v = static_cast<T>(rng.normal(0.0, static_cast<double>(std)));
    return t;
  }

  static Tensor truncated_normal(Shape shape, Rng& rng, T std, bool requires_grad = false) {
    Tensor t(std::move(shape), T(0), requires_grad);
    for (auto& v : t.node_->data) v = static_cast<T>(rng.truncated_normal(static_cast<double>(std)));
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  int64_t dim(size_t i) const { return node_->shape.at(i); }
  size_t rank() const { return node_->shape.size(); }
  int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    if (rg) node_->ensure_grad();
  }

  std::vector<T>& data() { return node_->data; }
  const std::vector<T>& data() const { return node_->data; }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  void zero_grad() {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  // Deep copy of values; detached from the tape.
  Tensor clone_detached() const {
    Tensor out;
    out.node_->shape = node_->shape;
    out.node_->data = node_->data;
    out.node_->requires_grad = false;
    return out;
  }

  bool same_buffer(const Tensor& other) const { return node_ == other.node_; }

  T item() const {
    if (numel() != 1) throw ConfigError("item(): tensor is not scalar, shape " + shape_str(shape()));
    return node_->data[0];
  }

  T& at(std::initializer_list<int64_t> idx) { return node_->data[flat_index(idx)]; }
  T at(std::initializer_list<int64_t> idx) const { return node_->data[flat_index(idx)]; }

 private:
  size_t flat_index(std::initializer_list<int64_t> idx) const {
    if (idx.size() != node_->shape.size()) throw ConfigError("index rank mismatch");
    int64_t flat = 0;
    size_t d = 0;
    for (int64_t i : idx) {
      if (i < 0 || i >= node_->shape[d]) throw ConfigError("index out of range");
      flat = flat * node_->shape[d] + i;
      ++d;
    }
    return static_cast<size_t>(flat);
  }

  std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string(op) + ": non-finite value in output");
  }
}

template <typename T>
inline bool grad_wanted(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::get().recording()) return false;
  for (const Tensor<T>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Gradients
// accumulate, so several backward passes between optimizer steps sum up
// (the sandwich rule relies on this).
template <typename T>
inline void backward(Tensor<T>& loss) {
  if (loss.numel() != 1) throw ConfigError("backward: loss must be scalar, shape " + shape_str(loss.shape()));
  if (Tape<T>::get().size() == 0) throw ConfigError("backward: tape is empty");
  loss.grad()[0] += T(1);
  Tape<T>::get().replay_and_clear();
}

}  // namespace slimnas
