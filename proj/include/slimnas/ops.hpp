// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable kernels. All loops are single-threaded with a fixed
// iteration order: identical inputs give bit-identical outputs.

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <type_traits>
#include <vector>

#include "slimnas/tensor.hpp"

namespace slimnas {

namespace detail {

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
inline void gemm_nn_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    T* cr = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = ar[p];
      const T* br = b + p * n;
      for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
inline void gemm_nt_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    T* cr = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* br = b + j * k;
      T acc = T(0);
      for (int64_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      cr[j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
inline void gemm_tn_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const T* ar = a + p * m;
    const T* br = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const T av = ar[i];
      T* cr = c + i * n;
      for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// Right-aligned broadcast strides of `operand` against `out`; zero stride on
// broadcast dims. Throws ConfigError when shapes are incompatible.
inline std::vector<int64_t> broadcast_strides(const Shape& out, const Shape& operand, const char* op) {
  const size_t r = out.size(), ra = operand.size();
  if (ra > r) throw ConfigError(std::string(op) + ": operand rank exceeds result rank");
  std::vector<int64_t> strides(r, 0);
  int64_t run = 1;
  for (int64_t d = static_cast<int64_t>(ra) - 1; d >= 0; --d) {
    const int64_t od = out[r - ra + d];
    const int64_t ad = operand[d];
    if (ad == od) {
      strides[r - ra + d] = run;
    } else if (ad == 1) {
      strides[r - ra + d] = 0;
    } else {
      throw ConfigError(std::string(op) + ": cannot broadcast " + shape_str(operand) + " to " + shape_str(out));
    }
    run *= ad;
  }
  return strides;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t d = 0; d < r; ++d) {
    const int64_t ad = d < r - a.size() ? 1 : a[d - (r - a.size())];
    const int64_t bd = d < r - b.size() ? 1 : b[d - (r - b.size())];
    if (ad == bd || ad == 1 || bd == 1) {
      out[d] = std::max(ad, bd);
    } else {
      throw ConfigError(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
    }
  }
  return out;
}

struct ConvDims {
  int64_t b, cin, h, w, cout, cin_g, kh, kw, groups, stride, padding, oh, ow, cg_out, krows, opix;
};

// Unpacks one group's channels of one sample ([cin_g,h,w]) into the
// [cin_g*kh*kw, oh*ow] patch matrix, zero-filling outside the image.
template <typename T>
inline void im2col(const T* src, const ConvDims& d, T* col) {
  int64_t row = 0;
  for (int64_t c = 0; c < d.cin_g; ++c)
    for (int64_t ki = 0; ki < d.kh; ++ki)
      for (int64_t kj = 0; kj < d.kw; ++kj, ++row) {
        T* dst = col + row * d.opix;
        for (int64_t oi = 0; oi < d.oh; ++oi) {
          const int64_t ii = oi * d.stride - d.padding + ki;
          for (int64_t oj = 0; oj < d.ow; ++oj) {
            const int64_t jj = oj * d.stride - d.padding + kj;
            dst[oi * d.ow + oj] =
                (ii >= 0 && ii < d.h && jj >= 0 && jj < d.w) ? src[(c * d.h + ii) * d.w + jj] : T(0);
          }
        }
      }
}

template <typename T>
inline void col2im_acc(const T* col, const ConvDims& d, T* dst) {
  int64_t row = 0;
  for (int64_t c = 0; c < d.cin_g; ++c)
    for (int64_t ki = 0; ki < d.kh; ++ki)
      for (int64_t kj = 0; kj < d.kw; ++kj, ++row) {
        const T* src = col + row * d.opix;
        for (int64_t oi = 0; oi < d.oh; ++oi) {
          const int64_t ii = oi * d.stride - d.padding + ki;
          if (ii < 0 || ii >= d.h) continue;
          for (int64_t oj = 0; oj < d.ow; ++oj) {
            const int64_t jj = oj * d.stride - d.padding + kj;
            if (jj < 0 || jj >= d.w) continue;
            dst[(c * d.h + ii) * d.w + jj] += src[oi * d.ow + oj];
          }
        }
      }
}

// Odometer walk over `out`, producing flat offsets into out/a/b.
template <typename F>
inline void for_each_broadcast(const Shape& out, const std::vector<int64_t>& astr,
                               const std::vector<int64_t>& bstr, F&& fn) {
  const int64_t total = numel_of(out);
  const int64_t r = static_cast<int64_t>(out.size());
  std::vector<int64_t> idx(out.size(), 0);
  int64_t ao = 0, bo = 0;
  for (int64_t oo = 0; oo < total; ++oo) {
    fn(oo, ao, bo);
    for (int64_t d = r - 1; d >= 0; --d) {
      ao += astr[d];
      bo += bstr[d];
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
      ao -= astr[d] * out[d];
      bo -= bstr[d] * out[d];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
inline Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool same = a.shape() == b.shape();
  Shape out_shape = same ? a.shape() : detail::broadcast_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(out_shape);
  if (same) {
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  } else {
    auto astr = detail::broadcast_strides(out_shape, a.shape(), "add");
    auto bstr = detail::broadcast_strides(out_shape, b.shape(), "add");
    detail::for_each_broadcast(out_shape, astr, bstr, [&](int64_t oo, int64_t ao, int64_t bo) {
      out.data()[oo] = a.data()[ao] + b.data()[bo];
    });
  }
  detail::check_finite(out, "add");
  if (detail::grad_wanted<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    Shape os = out_shape;
    Tape<T>::get().record([an, bn, on, os]() {
      on->ensure_grad();
      an->ensure_grad();
      bn->ensure_grad();
      auto astr = detail::broadcast_strides(os, an->shape, "add");
      auto bstr = detail::broadcast_strides(os, bn->shape, "add");
      detail::for_each_broadcast(os, astr, bstr, [&](int64_t oo, int64_t ao, int64_t bo) {
        an->grad[ao] += on->grad[oo];
        bn->grad[bo] += on->grad[oo];
      });
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool same = a.shape() == b.shape();
  Shape out_shape = same ? a.shape() : detail::broadcast_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(out_shape);
  auto astr = detail::broadcast_strides(out_shape, a.shape(), "mul");
  auto bstr = detail::broadcast_strides(out_shape, b.shape(), "mul");
  detail::for_each_broadcast(out_shape, astr, bstr, [&](int64_t oo, int64_t ao, int64_t bo) {
    out.data()[oo] = a.data()[ao] * b.data()[bo];
  });
  detail::check_finite(out, "mul");
  if (detail::grad_wanted<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    Shape os = out_shape;
    Tape<T>::get().record([an, bn, on, os, astr, bstr]() {
      on->ensure_grad();
      an->ensure_grad();
      bn->ensure_grad();
      detail::for_each_broadcast(os, astr, bstr, [&](int64_t oo, int64_t ao, int64_t bo) {
        an->grad[ao] += on->grad[oo] * bn->data[bo];
        bn->grad[bo] += on->grad[oo] * an->data[ao];
      });
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * s;
  detail::check_finite(out, "mul_scalar");
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape<T>::get().record([xn, on, s]() {
      on->ensure_grad();
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += s * on->grad[i];
    });
  }
  return out;
}

// x[B,C,...] scaled per channel (dim 1) by v[C].
template <typename T>
inline Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.rank() < 2 || v.rank() != 1 || v.dim(0) != x.dim(1))
    throw ConfigError("scale_channels: need x[B,C,...] and v[C], got " + shape_str(x.shape()) + " and " +
                      shape_str(v.shape()));
  const int64_t b = x.dim(0), c = x.dim(1), inner = x.numel() / (b * c);
  Tensor<T> out(x.shape());
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const T s = v.data()[ci];
      const int64_t base = (bi * c + ci) * inner;
      for (int64_t i = 0; i < inner; ++i) out.data()[base + i] = x.data()[base + i] * s;
    }
  detail::check_finite(out, "scale_channels");
  if (detail::grad_wanted<T>({&x, &v})) {
    out.set_requires_grad(true);
    auto xn = x.node(), vn = v.node(), on = out.node();
    Tape<T>::get().record([xn, vn, on, b, c, inner]() {
      on->ensure_grad();
      xn->ensure_grad();
      vn->ensure_grad();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ci = 0; ci < c; ++ci) {
          const int64_t base = (bi * c + ci) * inner;
          T acc = T(0);
          for (int64_t i = 0; i < inner; ++i) {
            xn->grad[base + i] += on->grad[base + i] * vn->data[ci];
            acc += on->grad[base + i] * xn->data[base + i];
          }
          vn->grad[ci] += acc;
        }
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape<T>::get().record([xn, on]() {
      on->ensure_grad();
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i)
        if (xn->data[i] > T(0)) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

// tanh-approximate gelu; sqrt(2/pi) pinned to the constant below.
template <typename T>
inline Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kC = T(0.7978845608);
  constexpr T kCube = T(0.044715);
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const T v = x.data()[i];
    const T t = std::tanh(kC * (v + kCube * v * v * v));
    out.data()[i] = T(0.5) * v * (T(1) + t);
  }
  detail::check_finite(out, "gelu");
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape<T>::get().record([xn, on]() {
      on->ensure_grad();
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) {
        const T v = xn->data[i];
        const T u = kC * (v + kCube * v * v * v);
        const T t = std::tanh(u);
        const T du = kC * (T(1) + T(3) * kCube * v * v);
        const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
        xn->grad[i] += on->grad[i] * d;
      }
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> activate(const Tensor<T>& x, Activation a) {
  return a == Activation::gelu ? gelu(x) : relu(x);
}

// ---------------------------------------------------------------------------
// movement

template <typename T>
inline Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel_of(new_shape) != x.numel())
    throw ConfigError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
  Tensor<T> out(new_shape);
  out.data() = x.data();
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape<T>::get().record([xn, on]() {
      on->ensure_grad();
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> permute(const Tensor<T>& x, const std::vector<size_t>& perm) {
  const size_t r = x.rank();
  if (perm.size() != r) throw ConfigError("permute: rank mismatch");
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (size_t d = 0; d < r; ++d) {
    if (perm[d] >= r || seen[perm[d]]) throw ConfigError("permute: invalid permutation");
    seen[perm[d]] = true;
    out_shape[d] = x.shape()[perm[d]];
  }
  std::vector<int64_t> xstrides(r, 1);
  for (int64_t d = static_cast<int64_t>(r) - 2; d >= 0; --d) xstrides[d] = xstrides[d + 1] * x.shape()[d + 1];
  std::vector<int64_t> gather(r);
  for (size_t d = 0; d < r; ++d) gather[d] = xstrides[perm[d]];

  Tensor<T> out(out_shape);
  std::vector<int64_t> idx(r, 0);
  int64_t xo = 0;
  for (int64_t oo = 0; oo < out.numel(); ++oo) {
    out.data()[oo] = x.data()[xo];
    for (int64_t d = static_cast<int64_t>(r) - 1; d >= 0; --d) {
      xo += gather[d];
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
      xo -= gather[d] * out_shape[d];
    }
  }
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape<T>::get().record([xn, on, gather, out_shape, r]() {
      on->ensure_grad();
      xn->ensure_grad();
      std::vector<int64_t> idx(r, 0);
      int64_t xo = 0;
      const int64_t total = numel_of(out_shape);
      for (int64_t oo = 0; oo < total; ++oo) {
        xn->grad[xo] += on->grad[oo];
        for (int64_t d = static_cast<int64_t>(r) - 1; d >= 0; --d) {
          xo += gather[d];
          if (++idx[d] < out_shape[d]) break;
          idx[d] = 0;
          xo -= gather[d] * out_shape[d];
        }
      }
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> transpose_last2(const Tensor<T>& x) {
  std::vector<size_t> perm(x.rank());
  for (size_t d = 0; d < x.rank(); ++d) perm[d] = d;
  std::swap(perm[x.rank() - 2], perm[x.rank() - 1]);
  return permute(x, perm);
}

// Contiguous sub-range [start, start+len) along `dim`.
template <typename T>
inline Tensor<T> slice(const Tensor<T>& x, size_t dim, int64_t start, int64_t len) {
  if (dim >= x.rank()) throw ConfigError("slice: dim out of range");
  if (start < 0 || len <= 0 || start + len > x.shape()[dim])
    throw ConfigError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                      ") out of bounds for dim extent " + std::to_string(x.shape()[dim]));
  Shape out_shape = x.shape();
  out_shape[dim] = len;
  int64_t outer = 1, inner = 1;
  for (size_t d = 0; d < dim; ++d) outer *= x.shape()[d];
  for (size_t d = dim + 1; d < x.rank(); ++d) inner *= x.shape()[d];
  const int64_t xdim = x.shape()[dim];

  Tensor<T> out(out_shape);
  for (int64_t o = 0; o < outer; ++o) {
    const T* src = x.data().data() + (o * xdim + start) * inner;
    T* dst = out.data().data() + o * len * inner;
    std::copy(src, src + len * inner, dst);
  }
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape<T>::get().record([xn, on, outer, inner, xdim, start, len]() {
      on->ensure_grad();
      xn->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        T* dst = xn->grad.data() + (o * xdim + start) * inner;
        const T* src = on->grad.data() + o * len * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> slice_prefix(const Tensor<T>& x, size_t dim, int64_t count) {
  if (dim < x.rank() && count == x.shape()[dim]) return x;  // full slice: share the buffer
  return slice(x, dim, 0, count);
}

template <typename T>
inline Tensor<T> concat(const std::vector<Tensor<T>>& parts, size_t dim) {
  if (parts.empty()) throw ConfigError("concat: no inputs");
  const size_t r = parts[0].rank();
  if (dim >= r) throw ConfigError("concat: dim out of range");
  Shape out_shape = parts[0].shape();
  int64_t total_dim = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ConfigError("concat: rank mismatch");
    for (size_t d = 0; d < r; ++d)
      if (d != dim && p.shape()[d] != out_shape[d]) throw ConfigError("concat: shape mismatch on dim " + std::to_string(d));
    total_dim += p.shape()[dim];
  }
  out_shape[dim] = total_dim;
  int64_t outer = 1, inner = 1;
  for (size_t d = 0; d < dim; ++d) outer *= out_shape[d];
  for (size_t d = dim + 1; d < r; ++d) inner *= out_shape[d];

  Tensor<T> out(out_shape);
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t pdim = p.shape()[dim];
    for (int64_t o = 0; o < outer; ++o) {
      const T* src = p.data().data() + o * pdim * inner;
      T* dst = out.data().data() + (o * total_dim + offset) * inner;
      std::copy(src, src + pdim * inner, dst);
    }
    offset += pdim;
  }
  bool want = false;
  for (const auto& p : parts) want = want || p.requires_grad();
  if (Tape<T>::get().recording() && want) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto on = out.node();
    Tape<T>::get().record([nodes, on, outer, inner, total_dim, dim]() {
      on->ensure_grad();
      int64_t offset = 0;
      for (auto& pn : nodes) {
        pn->ensure_grad();
        const int64_t pdim = pn->shape[dim];
        for (int64_t o = 0; o < outer; ++o) {
          const T* src = on->grad.data() + (o * total_dim + offset) * inner;
          T* dst = pn->grad.data() + o * pdim * inner;
          for (int64_t i = 0; i < pdim * inner; ++i) dst[i] += src[i];
        }
        offset += pdim;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
inline Tensor<T> sum_all(const Tensor<T>& x) {
  Tensor<T> out(Shape{1});
  T acc = T(0);
  for (T v : x.data()) acc += v;
  out.data()[0] = acc;
  detail::check_finite(out, "sum_all");
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape<T>::get().record([xn, on]() {
      on->ensure_grad();
      xn->ensure_grad();
      const T g = on->grad[0];
      for (auto& v : xn->grad) v += g;
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> mean_all(const Tensor<T>& x) {
  return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// [B,C,H,W] -> [B,C]
template <typename T>
inline Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ConfigError("global_avg_pool: expected 4-d input");
  const int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{b, c});
  const T inv = T(1) / static_cast<T>(hw);
  for (int64_t i = 0; i < b * c; ++i) {
    T acc = T(0);
    const T* px = x.data().data() + i * hw;
    for (int64_t j = 0; j < hw; ++j) acc += px[j];
    out.data()[i] = acc * inv;
  }
  detail::check_finite(out, "global_avg_pool");
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape<T>::get().record([xn, on, b, c, hw, inv]() {
      on->ensure_grad();
      xn->ensure_grad();
      for (int64_t i = 0; i < b * c; ++i) {
        const T g = on->grad[i] * inv;
        T* px = xn->grad.data() + i * hw;
        for (int64_t j = 0; j < hw; ++j) px[j] += g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul / softmax

// a[...,M,K] x b[...,K,P] -> [...,M,P]; leading dims broadcast.
template <typename T>
inline Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ConfigError("matmul: operands must have rank >= 2");
  const int64_t m = a.shape()[a.rank() - 2], k = a.shape()[a.rank() - 1];
  const int64_t kb = b.shape()[b.rank() - 2], p = b.shape()[b.rank() - 1];
  if (k != kb)
    throw ConfigError("matmul: inner dims disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  Shape obatch = detail::broadcast_shape(abatch, bbatch, "matmul");
  auto astr = detail::broadcast_strides(obatch, abatch, "matmul");
  auto bstr = detail::broadcast_strides(obatch, bbatch, "matmul");
  // strides above count matrices, not scalars
  Shape out_shape = obatch;
  out_shape.push_back(m);
  out_shape.push_back(p);

  Tensor<T> out(out_shape);
  const int64_t amat = m * k, bmat = kb * p, omat = m * p;
  detail::for_each_broadcast(obatch, astr, bstr, [&](int64_t oo, int64_t ao, int64_t bo) {
    detail::gemm_nn_acc(a.data().data() + ao * amat, b.data().data() + bo * bmat,
                        out.data().data() + oo * omat, m, k, p);
  });
  detail::check_finite(out, "matmul");
  if (detail::grad_wanted<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<T>::get().record([an, bn, on, obatch, astr, bstr, m, k, p, amat, bmat, omat]() {
      on->ensure_grad();
      an->ensure_grad();
      bn->ensure_grad();
      detail::for_each_broadcast(obatch, astr, bstr, [&](int64_t oo, int64_t ao, int64_t bo) {
        // dA += dOut * B^T ; dB += A^T * dOut
        detail::gemm_nt_acc(on->grad.data() + oo * omat, bn->data.data() + bo * bmat,
                            an->grad.data() + ao * amat, m, p, k);
        detail::gemm_tn_acc(an->data.data() + ao * amat, on->grad.data() + oo * omat,
                            bn->grad.data() + bo * bmat, k, m, p);
      });
    });
  }
  return out;
}

template <typename T>
inline Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() < 1 || x.shape().back() < 1) throw ConfigError("softmax_lastdim: empty last dim");
  const int64_t cols = x.shape().back();
  const int64_t rows = x.numel() / cols;
  Tensor<T> out(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const T* px = x.data().data() + r * cols;
    T* po = out.data().data() + r * cols;
    T mx = px[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, px[j]);
    T acc = T(0);
    for (int64_t j = 0; j < cols; ++j) {
      po[j] = std::exp(px[j] - mx);
      acc += po[j];
    }
    const T inv = T(1) / acc;
    for (int64_t j = 0; j < cols; ++j) po[j] *= inv;
  }
  detail::check_finite(out, "softmax_lastdim");
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape<T>::get().record([xn, on, rows, cols]() {
      on->ensure_grad();
      xn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* y = on->data.data() + r * cols;
        const T* dy = on->grad.data() + r * cols;
        T* dx = xn->grad.data() + r * cols;
        T dot = T(0);
        for (int64_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
        for (int64_t j = 0; j < cols; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution

// Cross-correlation, NCHW, square stride/padding, grouped.
template <typename T>
inline Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                        const std::type_identity_t<Tensor<T>>* bias, int64_t stride, int64_t padding,
                        int64_t groups = 1) {
  if (x.rank() != 4 || weight.rank() != 4) throw ConfigError("conv2d: x and weight must be 4-d");
  const int64_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t cout = weight.dim(0), cin_g = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (groups < 1 || cin % groups != 0 || cout % groups != 0)
    throw ConfigError("conv2d: channels not divisible by groups");
  if (cin / groups != cin_g)
    throw ConfigError("conv2d: weight expects " + std::to_string(cin_g * groups) + " input channels, got " +
                      std::to_string(cin));
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) throw ConfigError("conv2d: bias shape mismatch");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (h + 2 * padding < kh || w + 2 * padding < kw) throw ConfigError("conv2d: kernel does not fit input");
  const int64_t oh = (h + 2 * padding - kh) / stride + 1;
  const int64_t ow = (w + 2 * padding - kw) / stride + 1;

  detail::ConvDims dims{b,  cin, h,  w,      cout,   cin_g, kh, kw,
                        groups, stride, padding, oh, ow, cout / groups, cin_g * kh * kw, oh * ow};
  const int64_t cg_out = dims.cg_out, krows = dims.krows, opix = dims.opix;

  Tensor<T> out(Shape{b, cout, oh, ow});
  std::vector<T> col(static_cast<size_t>(krows * opix));
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t g = 0; g < groups; ++g) {
      detail::im2col(x.data().data() + (bi * cin + g * cin_g) * h * w, dims, col.data());
      T* dst = out.data().data() + (bi * cout + g * cg_out) * opix;
      detail::gemm_nn_acc(weight.data().data() + g * cg_out * krows, col.data(), dst, cg_out, krows, opix);
    }
    if (bias) {
      for (int64_t co = 0; co < cout; ++co) {
        const T bv = bias->data()[co];
        T* dst = out.data().data() + (bi * cout + co) * opix;
        for (int64_t i = 0; i < opix; ++i) dst[i] += bv;
      }
    }
  }
  detail::check_finite(out, "conv2d");

  const bool want = bias ? detail::grad_wanted<T>({&x, &weight, bias}) : detail::grad_wanted<T>({&x, &weight});
  if (want) {
    out.set_requires_grad(true);
    auto xn = x.node(), wn = weight.node(), on = out.node();
    std::shared_ptr<TensorNode<T>> biasn = bias ? bias->node() : nullptr;
    Tape<T>::get().record([xn, wn, biasn, on, dims]() {
      const int64_t b = dims.b, cin = dims.cin, cout = dims.cout, cin_g = dims.cin_g;
      const int64_t cg_out = dims.cg_out, krows = dims.krows, opix = dims.opix;
      on->ensure_grad();
      xn->ensure_grad();
      wn->ensure_grad();
      if (biasn) {
        biasn->ensure_grad();
        for (int64_t bi = 0; bi < b; ++bi)
          for (int64_t co = 0; co < cout; ++co) {
            const T* g = on->grad.data() + (bi * cout + co) * opix;
            T acc = T(0);
            for (int64_t i = 0; i < opix; ++i) acc += g[i];
            biasn->grad[co] += acc;
          }
      }
      std::vector<T> col(static_cast<size_t>(krows * opix));
      std::vector<T> dcol(static_cast<size_t>(krows * opix));
      for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t g = 0; g < dims.groups; ++g) {
          const T* dout = on->grad.data() + (bi * cout + g * cg_out) * opix;
          // dW += dOut x col^T
          detail::im2col(xn->data.data() + (bi * cin + g * cin_g) * dims.h * dims.w, dims, col.data());
          detail::gemm_nt_acc(dout, col.data(), wn->grad.data() + g * cg_out * krows, cg_out, opix, krows);
          // dcol = W^T x dOut, scattered back through col2im
          std::fill(dcol.begin(), dcol.end(), T(0));
          detail::gemm_tn_acc(wn->data.data() + g * cg_out * krows, dout, dcol.data(), krows, cg_out, opix);
          detail::col2im_acc(dcol.data(), dims, xn->grad.data() + (bi * cin + g * cin_g) * dims.h * dims.w);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization

enum class NormMode { train, eval };

// Batch normalization over [B,C,H,W]. Train mode normalizes by batch
// statistics (biased variance) and folds the batch mean/var into the running
// buffers with momentum; the running variance uses the unbiased estimate.
// Running buffers are plain tensors mutated in place, never differentiated.
template <typename T>
inline Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             Tensor<T> running_mu, Tensor<T> running_var, NormMode mode,
                             T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() != 4) throw ConfigError("batchnorm2d: expected 4-d input");
  const int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c || running_mu.numel() != c || running_var.numel() != c)
    throw ConfigError("batchnorm2d: parameter extents do not match " + std::to_string(c) + " channels");
  const int64_t n = b * hw;
  if (mode == NormMode::train && n < 2) throw ConfigError("batchnorm2d: need B*H*W >= 2 in train mode");

  std::vector<T> mu(c), invstd(c);
  if (mode == NormMode::train) {
    for (int64_t ci = 0; ci < c; ++ci) {
      T acc = T(0);
      for (int64_t bi = 0; bi < b; ++bi) {
        const T* px = x.data().data() + (bi * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) acc += px[i];
      }
      const T m = acc / static_cast<T>(n);
      T vacc = T(0);
      for (int64_t bi = 0; bi < b; ++bi) {
        const T* px = x.data().data() + (bi * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const T d = px[i] - m;
          vacc += d * d;
        }
      }
      const T var = vacc / static_cast<T>(n);
      mu[ci] = m;
      invstd[ci] = T(1) / std::sqrt(var + eps);
      running_mu.data()[ci] = (T(1) - momentum) * running_mu.data()[ci] + momentum * m;
      const T unbiased = vacc / static_cast<T>(n - 1);
      running_var.data()[ci] = (T(1) - momentum) * running_var.data()[ci] + momentum * unbiased;
    }
  } else {
    for (int64_t ci = 0; ci < c; ++ci) {
      mu[ci] = running_mu.data()[ci];
      invstd[ci] = T(1) / std::sqrt(running_var.data()[ci] + eps);
    }
  }

  Tensor<T> out(x.shape());
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* px = x.data().data() + (bi * c + ci) * hw;
      T* po = out.data().data() + (bi * c + ci) * hw;
      const T g = gamma.data()[ci], bt = beta.data()[ci], m = mu[ci], is = invstd[ci];
      for (int64_t i = 0; i < hw; ++i) po[i] = g * (px[i] - m) * is + bt;
    }
  detail::check_finite(out, "batchnorm2d");

  if (detail::grad_wanted<T>({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    const bool train = mode == NormMode::train;
    Tape<T>::get().record([xn, gn, bn, on, mu, invstd, b, c, hw, n, train]() {
      on->ensure_grad();
      xn->ensure_grad();
      gn->ensure_grad();
      bn->ensure_grad();
      for (int64_t ci = 0; ci < c; ++ci) {
        const T m = mu[ci], is = invstd[ci], g = gn->data[ci];
        T sum_dy = T(0), sum_dy_xhat = T(0);
        for (int64_t bi = 0; bi < b; ++bi) {
          const T* dy = on->grad.data() + (bi * c + ci) * hw;
          const T* px = xn->data.data() + (bi * c + ci) * hw;
          for (int64_t i = 0; i < hw; ++i) {
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * (px[i] - m) * is;
          }
        }
        gn->grad[ci] += sum_dy_xhat;
        bn->grad[ci] += sum_dy;
        const T inv_n = T(1) / static_cast<T>(n);
        for (int64_t bi = 0; bi < b; ++bi) {
          const T* dy = on->grad.data() + (bi * c + ci) * hw;
          const T* px = xn->data.data() + (bi * c + ci) * hw;
          T* dx = xn->grad.data() + (bi * c + ci) * hw;
          for (int64_t i = 0; i < hw; ++i) {
            if (train) {
              const T xhat = (px[i] - m) * is;
              dx[i] += g * is * (dy[i] - sum_dy * inv_n - xhat * sum_dy_xhat * inv_n);
            } else {
              dx[i] += g * is * dy[i];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// resampling

// Non-overlapping mean over fh x fw windows.
template <typename T>
inline Tensor<T> avgpool2d_hw(const Tensor<T>& x, int64_t fh, int64_t fw) {
  if (x.rank() != 4) throw ConfigError("avgpool2d: expected 4-d input");
  if (fh < 1 || fw < 1) throw ConfigError("avgpool2d: factor must be >= 1");
  if (fh == 1 && fw == 1) return x;
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % fh != 0 || w % fw != 0)
    throw ConfigError("avgpool2d: extents " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by factor");
  const int64_t oh = h / fh, ow = w / fw;
  const T inv = T(1) / static_cast<T>(fh * fw);
  Tensor<T> out(Shape{b, c, oh, ow});
  for (int64_t bc = 0; bc < b * c; ++bc) {
    const T* px = x.data().data() + bc * h * w;
    T* po = out.data().data() + bc * oh * ow;
    for (int64_t oi = 0; oi < oh; ++oi)
      for (int64_t oj = 0; oj < ow; ++oj) {
        T acc = T(0);
        for (int64_t ki = 0; ki < fh; ++ki)
          for (int64_t kj = 0; kj < fw; ++kj) acc += px[(oi * fh + ki) * w + oj * fw + kj];
        po[oi * ow + oj] = acc * inv;
      }
  }
  detail::check_finite(out, "avgpool2d");
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape<T>::get().record([xn, on, b, c, h, w, oh, ow, fh, fw, inv]() {
      on->ensure_grad();
      xn->ensure_grad();
      for (int64_t bc = 0; bc < b * c; ++bc) {
        T* dx = xn->grad.data() + bc * h * w;
        const T* dy = on->grad.data() + bc * oh * ow;
        for (int64_t oi = 0; oi < oh; ++oi)
          for (int64_t oj = 0; oj < ow; ++oj) {
            const T g = dy[oi * ow + oj] * inv;
            for (int64_t ki = 0; ki < fh; ++ki)
              for (int64_t kj = 0; kj < fw; ++kj) dx[(oi * fh + ki) * w + oj * fw + kj] += g;
          }
      }
    });
  }
  return out;
}

// Each pixel replicated factor x factor.
template <typename T>
inline Tensor<T> nearest_upsample2d(const Tensor<T>& x, int64_t factor) {
  if (x.rank() != 4) throw ConfigError("nearest_upsample2d: expected 4-d input");
  if (factor < 1) throw ConfigError("nearest_upsample2d: factor must be >= 1");
  if (factor == 1) return x;
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t oh = h * factor, ow = w * factor;
  Tensor<T> out(Shape{b, c, oh, ow});
  for (int64_t bc = 0; bc < b * c; ++bc) {
    const T* px = x.data().data() + bc * h * w;
    T* po = out.data().data() + bc * oh * ow;
    for (int64_t oi = 0; oi < oh; ++oi)
      for (int64_t oj = 0; oj < ow; ++oj) po[oi * ow + oj] = px[(oi / factor) * w + oj / factor];
  }
  if (detail::grad_wanted<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape<T>::get().record([xn, on, b, c, h, w, oh, ow, factor]() {
      on->ensure_grad();
      xn->ensure_grad();
      for (int64_t bc = 0; bc < b * c; ++bc) {
        T* dx = xn->grad.data() + bc * h * w;
        const T* dy = on->grad.data() + bc * oh * ow;
        for (int64_t oi = 0; oi < oh; ++oi)
          for (int64_t oj = 0; oj < ow; ++oj) dx[(oi / factor) * w + oj / factor] += dy[oi * ow + oj];
      }
    });
  }
  return out;
}

enum class ResampleMode { avgpool, nearest_up };

template <typename T>
inline Tensor<T> resample2d(const Tensor<T>& x, ResampleMode mode, int64_t factor) {
  return mode == ResampleMode::avgpool ? avgpool2d_hw(x, factor, factor) : nearest_upsample2d(x, factor);
}

// ---------------------------------------------------------------------------
// loss

// Mean softmax cross-entropy over the batch. logits [B,K], labels in [0,K).
template <typename T>
inline Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int64_t>& labels) {
  if (logits.rank() != 2) throw ConfigError("cross_entropy: logits must be [B,K]");
  const int64_t b = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != b) throw ConfigError("cross_entropy: label count mismatch");
  std::vector<T> probs(static_cast<size_t>(b * k));
  T loss_acc = T(0);
  for (int64_t bi = 0; bi < b; ++bi) {
    const int64_t y = labels[bi];
    if (y < 0 || y >= k) throw ConfigError("cross_entropy: label out of range");
    const T* px = logits.data().data() + bi * k;
    T* pp = probs.data() + bi * k;
    T mx = px[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, px[j]);
    T acc = T(0);
    for (int64_t j = 0; j < k; ++j) {
      pp[j] = std::exp(px[j] - mx);
      acc += pp[j];
    }
    const T inv = T(1) / acc;
    for (int64_t j = 0; j < k; ++j) pp[j] *= inv;
    loss_acc += std::log(acc) + mx - px[y];
  }
  Tensor<T> out(Shape{1});
  out.data()[0] = loss_acc / static_cast<T>(b);
  detail::check_finite(out, "cross_entropy");
  if (detail::grad_wanted<T>({&logits})) {
    out.set_requires_grad(true);
    auto ln = logits.node(), on = out.node();
    Tape<T>::get().record([ln, on, probs, labels, b, k]() {
      on->ensure_grad();
      ln->ensure_grad();
      const T g = on->grad[0] / static_cast<T>(b);
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t j = 0; j < k; ++j)
          ln->grad[bi * k + j] += g * (probs[bi * k + j] - (j == labels[bi] ? T(1) : T(0)));
    });
  }
  return out;
}

}  // namespace slimnas
