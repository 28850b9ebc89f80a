// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
//
// Network building blocks: convolutional stem, unified FFN with an embedded
// depthwise conv, attention with a learnable position bias, head mixing and
// locality injected into V, stride attention, and the two downsampling
// flavours. Each block is a pure function of (params, input).
//
// Convention used throughout: conv -> norm -> activation. The attention core
// itself (logits, softmax, weighted values) carries no normalization.

#pragma once

#include <cmath>
#include <optional>
#include <type_traits>

#include "slimnas/ops.hpp"

namespace slimnas {

template <typename T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mu;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  Tensor<T> forward(const Tensor<T>& x, NormMode mode) const {
    return batchnorm2d(x, gamma, beta, running_mu, running_var, mode, momentum, eps);
  }
};

template <typename T>
inline NormParams<T> make_norm(int64_t channels) {
  NormParams<T> n;
  n.gamma = Tensor<T>::full({channels}, T(1));
  n.beta = Tensor<T>::zeros({channels});
  n.running_mu = Tensor<T>::zeros({channels});
  n.running_var = Tensor<T>::full({channels}, T(1));
  return n;
}

// conv (+ optional norm) (+ optional activation); convs followed by a norm
// carry no bias, the norm's beta takes that role.
template <typename T>
struct ConvNorm {
  Tensor<T> weight;  // [cout, cin/groups, kh, kw]
  std::optional<Tensor<T>> bias;
  std::optional<NormParams<T>> norm;
  std::optional<Activation> act;
  int64_t stride = 1;
  int64_t padding = 0;
  int64_t groups = 1;

  Tensor<T> forward(const Tensor<T>& x, NormMode mode) const {
    auto y = conv2d(x, weight, bias ? &*bias : nullptr, stride, padding, groups);
    if (norm) y = norm->forward(y, mode);
    if (act) y = activate(y, *act);
    return y;
  }

  int64_t out_channels() const { return weight.dim(0); }
};

enum class ConvInit { spatial, projection };

template <typename T>
inline Tensor<T> init_conv_weight(int64_t cout, int64_t cin_g, int64_t kh, int64_t kw, ConvInit kind,
                                  Rng& rng) {
  if (kind == ConvInit::projection)
    return Tensor<T>::truncated_normal({cout, cin_g, kh, kw}, rng, T(0.02));
  const double fan_in = static_cast<double>(cin_g * kh * kw);
  return Tensor<T>::randn({cout, cin_g, kh, kw}, rng, static_cast<T>(std::sqrt(2.0 / fan_in)));
}

template <typename T>
inline ConvNorm<T> make_conv_norm(int64_t cin, int64_t cout, int64_t k, int64_t stride, int64_t padding,
                                  int64_t groups, std::optional<Activation> act, Rng& rng) {
  ConvNorm<T> c;
  c.weight = init_conv_weight<T>(cout, cin / groups, k, k, k == 1 ? ConvInit::projection : ConvInit::spatial, rng);
  c.norm = make_norm<T>(cout);
  c.act = act;
  c.stride = stride;
  c.padding = padding;
  c.groups = groups;
  return c;
}

// ---------------------------------------------------------------------------
// stem

template <typename T>
struct StemParams {
  ConvNorm<T> conv1;  // 3 -> mid, 3x3 stride 2
  ConvNorm<T> conv2;  // mid -> C1, 3x3 stride 2
};

template <typename T>
inline StemParams<T> make_stem_params(int64_t mid, int64_t c1, Activation act, Rng& rng) {
  StemParams<T> p;
  p.conv1 = make_conv_norm<T>(3, mid, 3, 2, 1, 1, act, rng);
  p.conv2 = make_conv_norm<T>(mid, c1, 3, 2, 1, 1, act, rng);
  return p;
}

template <typename T>
inline Tensor<T> stem_forward(const StemParams<T>& p, const Tensor<T>& x, NormMode mode) {
  if (x.rank() != 4 || x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0)
    throw ConfigError("stem_forward: input resolution must be divisible by 4, got " + shape_str(x.shape()));
  return p.conv2.forward(p.conv1.forward(x, mode), mode);
}

// ---------------------------------------------------------------------------
// unified FFN

template <typename T>
struct FFNParams {
  ConvNorm<T> expand;   // 1x1, C -> E*C
  ConvNorm<T> dw;       // 3x3 depthwise on E*C
  ConvNorm<T> project;  // 1x1, E*C -> C
  Tensor<T> layer_scale;  // [C]
};

template <typename T>
inline FFNParams<T> make_ffn_params(int64_t c, int64_t expansion, Activation act, Rng& rng,
                                    T layer_scale_init = T(0.1)) {
  FFNParams<T> p;
  const int64_t ec = expansion * c;
  p.expand = make_conv_norm<T>(c, ec, 1, 1, 0, 1, act, rng);
  p.dw = make_conv_norm<T>(ec, ec, 3, 1, 1, ec, act, rng);
  p.project = make_conv_norm<T>(ec, c, 1, 1, 0, 1, std::nullopt, rng);
  p.layer_scale = Tensor<T>::full({c}, layer_scale_init);
  return p;
}

// The residual branch alone; kept separate so elastic-depth training can
// gate it without touching the residual.
template <typename T>
inline Tensor<T> ffn_branch(const FFNParams<T>& p, const Tensor<T>& x, NormMode mode) {
  if (x.rank() != 4 || x.dim(1) != p.project.out_channels())
    throw ConfigError("ffn: expected " + std::to_string(p.project.out_channels()) + " channels, got " +
                      shape_str(x.shape()));
  auto y = p.expand.forward(x, mode);
  y = p.dw.forward(y, mode);
  y = p.project.forward(y, mode);
  return scale_channels(y, p.layer_scale);
}

template <typename T>
inline Tensor<T> unified_ffn_forward(const FFNParams<T>& p, const Tensor<T>& x, NormMode mode) {
  return add(x, ffn_branch(p, x, mode));
}

// ---------------------------------------------------------------------------
// attention

// [B, h*d, H, W] -> [B, h, H*W, d]
template <typename T>
inline Tensor<T> spatial_to_tokens(const Tensor<T>& x, int64_t heads) {
  const int64_t b = x.dim(0), hd = x.dim(1), n = x.dim(2) * x.dim(3);
  return permute(reshape(x, {b, heads, hd / heads, n}), {0, 1, 3, 2});
}

// [B, h, N, d] -> [B, h*d, H, W]
template <typename T>
inline Tensor<T> tokens_to_spatial(const Tensor<T>& t, int64_t hh, int64_t ww) {
  const int64_t b = t.dim(0), heads = t.dim(1), d = t.dim(3);
  return reshape(permute(t, {0, 1, 3, 2}), {b, heads * d, hh, ww});
}

// Linear mixing across the head dimension: out[b,g] = sum_h L[g,h] x[b,h].
template <typename T>
inline Tensor<T> mix_heads(const Tensor<T>& x, const Tensor<T>& mix) {
  const int64_t b = x.dim(0), h = x.dim(1), n = x.dim(2), m = x.dim(3);
  return reshape(matmul(mix, reshape(x, {b, h, n * m})), {b, h, n, m});
}

// softmax(q k^T / sqrt(d) + bias) v, with optional pre/post head mixing.
// q [B,h,Nq,d], k/v [B,h,Nkv,d], bias [h,Nq,Nkv].
template <typename T>
inline Tensor<T> attention_tokens(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                  const Tensor<T>& bias, const std::type_identity_t<Tensor<T>>* pre_mix,
                                  const std::type_identity_t<Tensor<T>>* post_mix) {
  const int64_t d = q.dim(3);
  if (bias.dim(1) != q.dim(2) || bias.dim(2) != k.dim(2))
    throw ConfigError("attention: bias table is " + shape_str(bias.shape()) + " but tokens are " +
                      std::to_string(q.dim(2)) + "x" + std::to_string(k.dim(2)));
  auto logits = mul_scalar(matmul(q, transpose_last2(k)), T(1) / static_cast<T>(std::sqrt(static_cast<double>(d))));
  logits = add(logits, bias);
  if (pre_mix) logits = mix_heads(logits, *pre_mix);
  auto attn = softmax_lastdim(logits);
  if (post_mix) attn = mix_heads(attn, *post_mix);
  return matmul(attn, v);
}

template <typename T>
struct MHSAParams {
  ConvNorm<T> qkv;           // 1x1, C -> 3*h*d
  Tensor<T> v_dw_weight;     // [h*d, 1, 3, 3], bare conv inside the core
  Tensor<T> v_dw_bias;       // [h*d]
  Tensor<T> attn_bias;       // [h, Nq, Nkv]
  Tensor<T> head_mix_pre;    // [h, h]
  Tensor<T> head_mix_post;   // [h, h]
  ConvNorm<T> out_proj;      // 1x1, h*d -> C
  Tensor<T> layer_scale;     // [C]
  int64_t heads = 1;
  int64_t head_dim = 8;
};

template <typename T>
inline Tensor<T> identity_matrix(int64_t n) {
  auto m = Tensor<T>::zeros({n, n});
  for (int64_t i = 0; i < n; ++i) m.at({i, i}) = T(1);
  return m;
}

template <typename T>
inline MHSAParams<T> make_mhsa_params(int64_t c, int64_t heads, int64_t head_dim, int64_t tokens_q,
                                      int64_t tokens_kv, Rng& rng, T layer_scale_init = T(0.1)) {
  MHSAParams<T> p;
  const int64_t hd = heads * head_dim;
  p.qkv = make_conv_norm<T>(c, 3 * hd, 1, 1, 0, 1, std::nullopt, rng);
  p.v_dw_weight = init_conv_weight<T>(hd, 1, 3, 3, ConvInit::spatial, rng);
  p.v_dw_bias = Tensor<T>::zeros({hd});
  p.attn_bias = Tensor<T>::zeros({heads, tokens_q, tokens_kv});
  p.head_mix_pre = add(identity_matrix<T>(heads), Tensor<T>::truncated_normal({heads, heads}, rng, T(0.02)));
  p.head_mix_post = add(identity_matrix<T>(heads), Tensor<T>::truncated_normal({heads, heads}, rng, T(0.02)));
  p.out_proj = make_conv_norm<T>(hd, c, 1, 1, 0, 1, std::nullopt, rng);
  p.layer_scale = Tensor<T>::full({c}, layer_scale_init);
  p.heads = heads;
  p.head_dim = head_dim;
  return p;
}

namespace detail_blocks {

// qkv projection, V locality, and the attention core; returns the spatial
// token map [B, h*d, H, W] still to be output-projected.
template <typename T>
inline Tensor<T> mhsa_core(const MHSAParams<T>& p, const Tensor<T>& x, NormMode mode) {
  const int64_t hh = x.dim(2), ww = x.dim(3);
  const int64_t hd = p.heads * p.head_dim;
  if (hh * ww != p.attn_bias.dim(1))
    throw ConfigError("mhsa: bias table built for " + std::to_string(p.attn_bias.dim(1)) + " tokens, input has " +
                      std::to_string(hh * ww));
  auto qkv = p.qkv.forward(x, mode);
  auto q_sp = slice(qkv, 1, 0, hd);
  auto k_sp = slice(qkv, 1, hd, hd);
  auto v_sp = slice(qkv, 1, 2 * hd, hd);
  v_sp = add(v_sp, conv2d(v_sp, p.v_dw_weight, &p.v_dw_bias, 1, 1, hd));
  auto out = attention_tokens(spatial_to_tokens(q_sp, p.heads), spatial_to_tokens(k_sp, p.heads),
                              spatial_to_tokens(v_sp, p.heads), p.attn_bias, &p.head_mix_pre,
                              &p.head_mix_post);
  return tokens_to_spatial(out, hh, ww);
}

}  // namespace detail_blocks

// Attention residual branch on pooled tokens; the output is interpolated back
// before the output projection, so projection and residual run at full
// resolution. stride == 1 degenerates to plain attention.
template <typename T>
inline Tensor<T> stride_attention_branch(const MHSAParams<T>& p, const Tensor<T>& x, int64_t stride,
                                         NormMode mode) {
  if (x.dim(2) % stride != 0 || x.dim(3) % stride != 0)
    throw ConfigError("stride_attention: resolution " + shape_str(x.shape()) + " not divisible by stride " +
                      std::to_string(stride));
  auto pooled = resample2d(x, ResampleMode::avgpool, stride);
  auto core = detail_blocks::mhsa_core(p, pooled, mode);
  auto full = nearest_upsample2d(core, stride);
  return scale_channels(p.out_proj.forward(full, mode), p.layer_scale);
}

template <typename T>
inline Tensor<T> stride_attention_forward(const MHSAParams<T>& p, const Tensor<T>& x, int64_t stride,
                                          NormMode mode) {
  return add(x, stride_attention_branch(p, x, stride, mode));
}

template <typename T>
inline Tensor<T> mhsa_branch(const MHSAParams<T>& p, const Tensor<T>& x, NormMode mode) {
  return stride_attention_branch(p, x, 1, mode);
}

template <typename T>
inline Tensor<T> mhsa_forward(const MHSAParams<T>& p, const Tensor<T>& x, NormMode mode) {
  return stride_attention_forward(p, x, 1, mode);
}

// Ablation block: keys and values pooled to half the tokens (factor 2 along
// the vertical axis, applied after the projection), queries at full
// resolution. Requires attn_bias shaped [h, N, N/2].
template <typename T>
inline Tensor<T> downsampled_kv_attention_forward(const MHSAParams<T>& p, const Tensor<T>& x, NormMode mode) {
  const int64_t hh = x.dim(2), ww = x.dim(3);
  const int64_t hd = p.heads * p.head_dim;
  if ((hh * ww) % 2 != 0 || hh % 2 != 0)
    throw ConfigError("downsampled_kv_attention: token count must be even, got " + shape_str(x.shape()));
  auto qkv = p.qkv.forward(x, mode);
  auto q_sp = slice(qkv, 1, 0, hd);
  auto k_sp = avgpool2d_hw(slice(qkv, 1, hd, hd), 2, 1);
  auto v_sp = avgpool2d_hw(slice(qkv, 1, 2 * hd, hd), 2, 1);
  v_sp = add(v_sp, conv2d(v_sp, p.v_dw_weight, &p.v_dw_bias, 1, 1, hd));
  auto out = attention_tokens(spatial_to_tokens(q_sp, p.heads), spatial_to_tokens(k_sp, p.heads),
                              spatial_to_tokens(v_sp, p.heads), p.attn_bias, &p.head_mix_pre,
                              &p.head_mix_post);
  auto branch = scale_channels(p.out_proj.forward(tokens_to_spatial(out, hh, ww), mode), p.layer_scale);
  return add(x, branch);
}

// ---------------------------------------------------------------------------
// downsampling

template <typename T>
struct DualPathDownParams {
  ConvNorm<T> query_dw;    // 3x3 depthwise stride 2, learnable local path
  ConvNorm<T> query_proj;  // 1x1, 2*C_in -> h*d (concat of pooled + dw paths)
  ConvNorm<T> kv_proj;     // 1x1, C_in -> 2*h*d, full resolution
  Tensor<T> attn_bias;     // [h, N/4, N]
  ConvNorm<T> out_proj;    // 1x1, h*d -> C_out
  ConvNorm<T> conv_path;   // 3x3 stride 2, C_in -> C_out
  int64_t heads = 1;
  int64_t head_dim = 8;
};

template <typename T>
inline DualPathDownParams<T> make_dual_path_params(int64_t cin, int64_t cout, int64_t heads, int64_t head_dim,
                                                   int64_t tokens_full, Rng& rng) {
  DualPathDownParams<T> p;
  const int64_t hd = heads * head_dim;
  p.query_dw = make_conv_norm<T>(cin, cin, 3, 2, 1, cin, std::nullopt, rng);
  p.query_proj = make_conv_norm<T>(2 * cin, hd, 1, 1, 0, 1, std::nullopt, rng);
  p.kv_proj = make_conv_norm<T>(cin, 2 * hd, 1, 1, 0, 1, std::nullopt, rng);
  p.attn_bias = Tensor<T>::zeros({heads, tokens_full / 4, tokens_full});
  p.out_proj = make_conv_norm<T>(hd, cout, 1, 1, 0, 1, std::nullopt, rng);
  p.conv_path = make_conv_norm<T>(cin, cout, 3, 2, 1, 1, std::nullopt, rng);
  p.heads = heads;
  p.head_dim = head_dim;
  return p;
}

template <typename T>
inline Tensor<T> dual_path_downsample_forward(const DualPathDownParams<T>& p, const Tensor<T>& x,
                                              NormMode mode) {
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
    throw ConfigError("dual_path_downsample: extents must be even, got " + shape_str(x.shape()));
  const int64_t oh = x.dim(2) / 2, ow = x.dim(3) / 2;
  const int64_t hd = p.heads * p.head_dim;

  auto q_pooled = resample2d(x, ResampleMode::avgpool, 2);
  auto q_local = p.query_dw.forward(x, mode);
  auto q_sp = p.query_proj.forward(concat<T>({q_pooled, q_local}, 1), mode);

  auto kv = p.kv_proj.forward(x, mode);
  auto k_sp = slice(kv, 1, 0, hd);
  auto v_sp = slice(kv, 1, hd, hd);

  auto out = attention_tokens(spatial_to_tokens(q_sp, p.heads), spatial_to_tokens(k_sp, p.heads),
                              spatial_to_tokens(v_sp, p.heads), p.attn_bias, nullptr, nullptr);
  auto attn_path = p.out_proj.forward(tokens_to_spatial(out, oh, ow), mode);
  return add(p.conv_path.forward(x, mode), attn_path);
}

template <typename T>
inline Tensor<T> plain_downsample_forward(const ConvNorm<T>& p, const Tensor<T>& x, NormMode mode) {
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
    throw ConfigError("plain_downsample: extents must be even, got " + shape_str(x.shape()));
  return p.forward(x, mode);
}

// ---------------------------------------------------------------------------
// classifier head

template <typename T>
struct HeadParams {
  Tensor<T> weight;  // [classes, C]
  Tensor<T> bias;    // [classes]
};

template <typename T>
inline HeadParams<T> make_head_params(int64_t c, int64_t classes, Rng& rng) {
  HeadParams<T> p;
  p.weight = Tensor<T>::truncated_normal({classes, c}, rng, T(0.02));
  p.bias = Tensor<T>::zeros({classes});
  return p;
}

// global average pool + linear -> logits [B, classes]
template <typename T>
inline Tensor<T> head_forward(const HeadParams<T>& p, const Tensor<T>& x) {
  auto pooled = global_avg_pool(x);
  return add(matmul(pooled, transpose_last2(p.weight)), p.bias);
}

}  // namespace slimnas
