// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
//
// Elastic 4-stage supernet. Width and expansion switch by slicing the
// leading filters of shared weights, with an independent normalization
// state per output-width choice; depth switches by skipping trailing
// blocks, realized during training as stochastic drop path.

#pragma once

#include <array>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "slimnas/blocks.hpp"
#include "slimnas/optim.hpp"

namespace slimnas {

constexpr int kStages = 4;

struct SearchSpace {
  int64_t input_resolution = 32;
  std::vector<int64_t> max_depths = {2, 2, 3, 3};
  std::vector<std::vector<int64_t>> width_choices = {{16, 24}, {32, 48}, {64, 96}, {96, 128}};
  std::vector<int64_t> expansion_choices = {2, 3, 4};
  int64_t width_granularity = 8;
  int64_t head_dim = 8;
  int64_t head_width_divisor = 32;
  Activation activation = Activation::gelu;
  bool dual_path_2to3 = false;  // stage 2->3 boundary; 3->4 is always dual-path

  void validate() const {
    if (max_depths.size() != kStages || width_choices.size() != kStages)
      throw ConfigError("search space: expected exactly 4 stages");
    if (input_resolution < 32 || input_resolution % 32 != 0)
      throw ConfigError("search space: input resolution must be a positive multiple of 32");
    if (expansion_choices.empty()) throw ConfigError("search space: empty expansion choice set");
    for (size_t i = 1; i < expansion_choices.size(); ++i)
      if (expansion_choices[i] <= expansion_choices[i - 1])
        throw ConfigError("search space: expansion choices must be strictly ascending");
    if (expansion_choices.front() < 1) throw ConfigError("search space: expansions must be >= 1");
    if (width_granularity < 1) throw ConfigError("search space: granularity must be >= 1");
    if (head_dim < 1 || head_width_divisor < 1) throw ConfigError("search space: bad head configuration");
    for (int j = 0; j < kStages; ++j) {
      if (max_depths[j] < 1) throw ConfigError("search space: stage depth must be >= 1");
      const auto& ws = width_choices[j];
      if (ws.empty()) throw ConfigError("search space: empty width choice set");
      for (size_t i = 0; i < ws.size(); ++i) {
        if (ws[i] % width_granularity != 0)
          throw ConfigError("search space: width " + std::to_string(ws[i]) + " is not a multiple of the granularity");
        if (i > 0 && ws[i] <= ws[i - 1])
          throw ConfigError("search space: width choices must be strictly ascending");
      }
    }
  }

  // stage j in [0,4): features at 1/4, 1/8, 1/16, 1/32 of the input
  int64_t stage_resolution(int j) const { return input_resolution >> (2 + j); }
  int64_t stage_tokens(int j) const { return stage_resolution(j) * stage_resolution(j); }
  int64_t max_width(int j) const { return width_choices[j].back(); }
  int64_t min_width(int j) const { return width_choices[j].front(); }
  bool attention_stage(int j) const { return j >= 2; }
  // stride attention brings stage-3 features down to the 1/32 grid
  int64_t attention_stride(int j) const { return j == 2 ? 2 : 1; }
  int64_t heads(int j) const { return std::max<int64_t>(1, max_width(j) / head_width_divisor); }
  int64_t stem_mid_channels() const { return std::max<int64_t>(8, max_width(0) / 2); }

  bool dual_path_boundary(int j) const { return j == 2 || (j == 1 && dual_path_2to3); }
};

struct SubnetConfig {
  std::vector<int64_t> depths;                   // per stage
  std::vector<int64_t> widths;                   // per stage, values (not indices)
  std::vector<std::vector<int64_t>> expansions;  // [stage][block], sized depths[j]
  std::vector<std::vector<bool>> mhsa_on;        // [stage][block]; empty for stages 0-1

  bool operator==(const SubnetConfig& o) const {
    return depths == o.depths && widths == o.widths && expansions == o.expansions && mhsa_on == o.mhsa_on;
  }

  // canonical text key, also the accuracy-cache key
  std::string key() const {
    std::ostringstream os;
    os << "d=";
    for (size_t j = 0; j < depths.size(); ++j) os << (j ? "," : "") << depths[j];
    os << "|w=";
    for (size_t j = 0; j < widths.size(); ++j) os << (j ? "," : "") << widths[j];
    os << "|e=";
    for (size_t j = 0; j < expansions.size(); ++j) {
      if (j) os << ";";
      for (size_t i = 0; i < expansions[j].size(); ++i) os << (i ? "," : "") << expansions[j][i];
    }
    os << "|m=";
    for (size_t j = 0; j < mhsa_on.size(); ++j) {
      if (j) os << ";";
      for (size_t i = 0; i < mhsa_on[j].size(); ++i) os << (i ? "," : "") << (mhsa_on[j][i] ? 1 : 0);
    }
    return os.str();
  }
};

inline void validate_config(const SearchSpace& space, const SubnetConfig& cfg) {
  space.validate();
  if (cfg.depths.size() != kStages || cfg.widths.size() != kStages || cfg.expansions.size() != kStages ||
      cfg.mhsa_on.size() != kStages)
    throw ConfigError("subnet config: expected 4 stages");
  for (int j = 0; j < kStages; ++j) {
    if (cfg.depths[j] < 1 || cfg.depths[j] > space.max_depths[j])
      throw ConfigError("subnet config: stage " + std::to_string(j + 1) + " depth out of range");
    const auto& ws = space.width_choices[j];
    if (std::find(ws.begin(), ws.end(), cfg.widths[j]) == ws.end())
      throw ConfigError("subnet config: width " + std::to_string(cfg.widths[j]) + " not a stage " +
                        std::to_string(j + 1) + " choice");
    if (static_cast<int64_t>(cfg.expansions[j].size()) != cfg.depths[j])
      throw ConfigError("subnet config: expansion list must match stage depth");
    for (int64_t e : cfg.expansions[j]) {
      const auto& es = space.expansion_choices;
      if (std::find(es.begin(), es.end(), e) == es.end())
        throw ConfigError("subnet config: expansion " + std::to_string(e) + " not a choice");
    }
    if (space.attention_stage(j)) {
      if (static_cast<int64_t>(cfg.mhsa_on[j].size()) != cfg.depths[j])
        throw ConfigError("subnet config: mhsa flag list must match stage depth");
    } else if (!cfg.mhsa_on[j].empty()) {
      for (bool f : cfg.mhsa_on[j])
        if (f) throw ConfigError("subnet config: attention enabled outside stages 3-4");
    }
  }
}

inline SubnetConfig max_config(const SearchSpace& space) {
  SubnetConfig cfg;
  cfg.depths = space.max_depths;
  cfg.expansions.resize(kStages);
  cfg.mhsa_on.resize(kStages);
  for (int j = 0; j < kStages; ++j) {
    cfg.widths.push_back(space.max_width(j));
    cfg.expansions[j].assign(space.max_depths[j], space.expansion_choices.back());
    if (space.attention_stage(j)) cfg.mhsa_on[j].assign(space.max_depths[j], true);
  }
  return cfg;
}

inline SubnetConfig min_config(const SearchSpace& space) {
  SubnetConfig cfg;
  cfg.depths.assign(kStages, 1);
  cfg.expansions.resize(kStages);
  cfg.mhsa_on.resize(kStages);
  for (int j = 0; j < kStages; ++j) {
    cfg.widths.push_back(space.min_width(j));
    cfg.expansions[j].assign(1, space.expansion_choices.front());
    if (space.attention_stage(j)) cfg.mhsa_on[j].assign(1, false);
  }
  return cfg;
}

inline SubnetConfig random_config(const SearchSpace& space, Rng& rng) {
  SubnetConfig cfg;
  cfg.expansions.resize(kStages);
  cfg.mhsa_on.resize(kStages);
  for (int j = 0; j < kStages; ++j) cfg.depths.push_back(rng.uniform_int(1, space.max_depths[j]));
  for (int j = 0; j < kStages; ++j) {
    const auto& ws = space.width_choices[j];
    cfg.widths.push_back(ws[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(ws.size()) - 1))]);
  }
  for (int j = 0; j < kStages; ++j) {
    for (int64_t i = 0; i < cfg.depths[j]; ++i) {
      const auto& es = space.expansion_choices;
      cfg.expansions[j].push_back(es[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(es.size()) - 1))]);
    }
    if (space.attention_stage(j))
      for (int64_t i = 0; i < cfg.depths[j]; ++i) cfg.mhsa_on[j].push_back(rng.bernoulli(0.5));
  }
  return cfg;
}

enum class SampleKind { min, max, random };

inline SubnetConfig sample_subnet(const SearchSpace& space, SampleKind kind, uint64_t seed) {
  space.validate();
  switch (kind) {
    case SampleKind::min:
      return min_config(space);
    case SampleKind::max:
      return max_config(space);
    default: {
      Rng rng(seed);
      return random_config(space, rng);
    }
  }
}

// Residual add gated by stochastic depth: per-sample mask in {0, 1/keep_prob},
// expectation equals the plain residual. Gating only happens in train mode.
template <typename T>
inline Tensor<T> residual_with_drop_path(const Tensor<T>& x, const Tensor<T>& branch, T keep_prob,
                                         NormMode mode, Rng* rng) {
  if (mode != NormMode::train || keep_prob >= T(1) || rng == nullptr) return add(x, branch);
  if (keep_prob <= T(0)) throw ConfigError("drop path: keep probability must be positive");
  auto mask = Tensor<T>::zeros({x.dim(0), 1, 1, 1});
  for (int64_t b = 0; b < x.dim(0); ++b)
    mask.at({b, 0, 0, 0}) = rng->bernoulli(static_cast<double>(keep_prob)) ? T(1) / keep_prob : T(0);
  return add(x, mul(branch, mask));
}

// ---------------------------------------------------------------------------
// switchable layers: shared weights sliced by leading filters, per-width norms

template <typename T>
struct SwitchableConv {
  Tensor<T> weight;                  // [cout_max, cin_max/groups, kh, kw]
  std::vector<int64_t> out_choices;  // ascending
  std::vector<NormParams<T>> norms;  // one per out choice
  std::optional<Activation> act;
  int64_t stride = 1;
  int64_t padding = 0;
  bool depthwise = false;

  int64_t choice_index(int64_t cout) const {
    for (size_t i = 0; i < out_choices.size(); ++i)
      if (out_choices[i] == cout) return static_cast<int64_t>(i);
    throw ConfigError("switchable layer: width " + std::to_string(cout) + " is not in the choice set");
  }

  // Slices the first `cout` filters (and `cin` input channels) and pairs them
  // with the norm state owned by that width choice.
  ConvNorm<T> view(int64_t cin, int64_t cout) const {
    const int64_t idx = choice_index(cout);
    ConvNorm<T> v;
    if (depthwise) {
      if (cin != cout) throw ConfigError("switchable depthwise layer: cin must equal cout");
      v.weight = slice_prefix(weight, 0, cout);
      v.groups = cout;
    } else {
      if (cin > weight.dim(1)) throw ConfigError("switchable layer: input width exceeds allocation");
      v.weight = slice_prefix(slice_prefix(weight, 0, cout), 1, cin);
      v.groups = 1;
    }
    v.norm = norms[static_cast<size_t>(idx)];
    v.act = act;
    v.stride = stride;
    v.padding = padding;
    return v;
  }

  Tensor<T> forward(const Tensor<T>& x, int64_t cout, NormMode mode) const {
    const int64_t cin = depthwise ? cout : x.dim(1);
    return view(cin, cout).forward(x, mode);
  }
};

template <typename T>
struct SwitchableAttention {
  SwitchableConv<T> qkv;       // out fixed at 3*h*d
  Tensor<T> v_dw_weight;
  Tensor<T> v_dw_bias;
  Tensor<T> attn_bias;
  Tensor<T> head_mix_pre;
  Tensor<T> head_mix_post;
  SwitchableConv<T> out_proj;  // out choices = stage widths
  Tensor<T> layer_scale;       // [c_max]
  int64_t heads = 1;
  int64_t head_dim = 8;

  MHSAParams<T> view(int64_t c) const {
    const int64_t hd = heads * head_dim;
    MHSAParams<T> m;
    m.qkv = qkv.view(c, 3 * hd);
    m.v_dw_weight = v_dw_weight;
    m.v_dw_bias = v_dw_bias;
    m.attn_bias = attn_bias;
    m.head_mix_pre = head_mix_pre;
    m.head_mix_post = head_mix_post;
    m.out_proj = out_proj.view(hd, c);
    m.layer_scale = slice_prefix(layer_scale, 0, c);
    m.heads = heads;
    m.head_dim = head_dim;
    return m;
  }
};

template <typename T>
struct SwitchableFFN {
  SwitchableConv<T> expand;   // out choices = {e*c}
  SwitchableConv<T> dw;       // depthwise, out choices = {e*c}
  SwitchableConv<T> project;  // out choices = stage widths
  Tensor<T> layer_scale;      // [c_max]

  FFNParams<T> view(int64_t c, int64_t e) const {
    FFNParams<T> f;
    f.expand = expand.view(c, e * c);
    f.dw = dw.view(e * c, e * c);
    f.project = project.view(e * c, c);
    f.layer_scale = slice_prefix(layer_scale, 0, c);
    return f;
  }
};

template <typename T>
struct SwitchableDualPath {
  SwitchableConv<T> query_dw;    // depthwise over incoming widths
  SwitchableConv<T> query_proj;  // out fixed h*d
  SwitchableConv<T> kv_proj;     // out fixed 2*h*d
  Tensor<T> attn_bias;
  SwitchableConv<T> out_proj;    // out choices = next-stage widths
  SwitchableConv<T> conv_path;   // out choices = next-stage widths
  int64_t heads = 1;
  int64_t head_dim = 8;

  DualPathDownParams<T> view(int64_t cin, int64_t cout) const {
    const int64_t hd = heads * head_dim;
    DualPathDownParams<T> d;
    d.query_dw = query_dw.view(cin, cin);
    d.query_proj = query_proj.view(2 * cin, hd);
    d.kv_proj = kv_proj.view(cin, 2 * hd);
    d.attn_bias = attn_bias;
    d.out_proj = out_proj.view(hd, cout);
    d.conv_path = conv_path.view(cin, cout);
    d.heads = heads;
    d.head_dim = head_dim;
    return d;
  }
};

// ---------------------------------------------------------------------------
// registration helpers shared by the supernet and extracted models

namespace detail_net {

template <typename T>
inline void register_norm(ParamRegistry<T>& reg, const std::string& prefix, NormParams<T>& n) {
  n.gamma = reg.add_param(prefix + ".gamma", n.gamma);
  n.beta = reg.add_param(prefix + ".beta", n.beta);
  n.running_mu = reg.add_buffer(prefix + ".running_mu", n.running_mu);
  n.running_var = reg.add_buffer(prefix + ".running_var", n.running_var);
}

template <typename T>
inline void register_conv_norm(ParamRegistry<T>& reg, const std::string& prefix, ConvNorm<T>& c) {
  c.weight = reg.add_param(prefix + ".weight", c.weight);
  if (c.bias) *c.bias = reg.add_param(prefix + ".bias", *c.bias);
  if (c.norm) register_norm(reg, prefix + ".norm", *c.norm);
}

template <typename T>
inline ConvNorm<T> clone_conv_norm(const ConvNorm<T>& v) {
  ConvNorm<T> c;
  c.weight = v.weight.clone_detached();
  if (v.bias) c.bias = v.bias->clone_detached();
  if (v.norm) {
    NormParams<T> n;
    n.gamma = v.norm->gamma.clone_detached();
    n.beta = v.norm->beta.clone_detached();
    n.running_mu = v.norm->running_mu.clone_detached();
    n.running_var = v.norm->running_var.clone_detached();
    n.momentum = v.norm->momentum;
    n.eps = v.norm->eps;
    c.norm = std::move(n);
  }
  c.act = v.act;
  c.stride = v.stride;
  c.padding = v.padding;
  c.groups = v.groups;
  return c;
}

}  // namespace detail_net

// ---------------------------------------------------------------------------
// standalone model (extracted or trained from scratch)

template <typename T>
class SubnetModel {
 public:
  struct PairBlock {
    std::optional<MHSAParams<T>> attn;
    FFNParams<T> ffn;
  };
  struct Down {
    std::optional<ConvNorm<T>> plain;
    std::optional<DualPathDownParams<T>> dual;
  };

  // fresh, randomly initialized standalone network
  SubnetModel(const SearchSpace& space, const SubnetConfig& cfg, int64_t num_classes, uint64_t seed)
      : space_(space), cfg_(cfg), num_classes_(num_classes) {
    validate_config(space, cfg);
    Rng rng(seed);
    stem_ = make_stem_params<T>(space.stem_mid_channels(), cfg.widths[0], space.activation, rng);
    stages_.resize(kStages);
    for (int j = 0; j < kStages; ++j) {
      const int64_t c = cfg.widths[j];
      const int64_t tokens = space.stage_tokens(j) / (space.attention_stride(j) * space.attention_stride(j));
      for (int64_t i = 0; i < cfg.depths[j]; ++i) {
        PairBlock blk;
        if (space.attention_stage(j) && cfg.mhsa_on[j][i])
          blk.attn = make_mhsa_params<T>(c, space.heads(j), space.head_dim, tokens, tokens, rng);
        blk.ffn = make_ffn_params<T>(c, cfg.expansions[j][i], space.activation, rng);
        stages_[j].push_back(std::move(blk));
      }
      if (j < kStages - 1) {
        Down d;
        if (space.dual_path_boundary(j)) {
          d.dual = make_dual_path_params<T>(cfg.widths[j], cfg.widths[j + 1], space.heads(j + 1),
                                            space.head_dim, space.stage_tokens(j), rng);
        } else {
          d.plain = make_conv_norm<T>(cfg.widths[j], cfg.widths[j + 1], 3, 2, 1, 1, std::nullopt, rng);
        }
        downs_[j] = std::move(d);
      }
    }
    head_ = make_head_params<T>(cfg.widths[kStages - 1], num_classes, rng);
    register_all();
  }

  // extraction: physical copies of the supernet's sliced weights
  template <typename Net>
  SubnetModel(const Net& net, const SubnetConfig& cfg, int extraction_tag)
      : space_(net.space()), cfg_(cfg), num_classes_(net.num_classes()) {
    (void)extraction_tag;
    validate_config(space_, cfg);
    NoGradGuard<T> ng;
    auto stem_view = net.stem_view(cfg.widths[0]);
    stem_.conv1 = detail_net::clone_conv_norm(stem_view.conv1);
    stem_.conv2 = detail_net::clone_conv_norm(stem_view.conv2);
    stages_.resize(kStages);
    for (int j = 0; j < kStages; ++j) {
      for (int64_t i = 0; i < cfg.depths[j]; ++i) {
        PairBlock blk;
        if (space_.attention_stage(j) && cfg.mhsa_on[j][i]) {
          auto v = net.attention_view(j, i, cfg.widths[j]);
          MHSAParams<T> m;
          m.qkv = detail_net::clone_conv_norm(v.qkv);
          m.v_dw_weight = v.v_dw_weight.clone_detached();
          m.v_dw_bias = v.v_dw_bias.clone_detached();
          m.attn_bias = v.attn_bias.clone_detached();
          m.head_mix_pre = v.head_mix_pre.clone_detached();
          m.head_mix_post = v.head_mix_post.clone_detached();
          m.out_proj = detail_net::clone_conv_norm(v.out_proj);
          m.layer_scale = v.layer_scale.clone_detached();
          m.heads = v.heads;
          m.head_dim = v.head_dim;
          blk.attn = std::move(m);
        }
        auto f = net.ffn_view(j, i, cfg.widths[j], cfg.expansions[j][i]);
        blk.ffn.expand = detail_net::clone_conv_norm(f.expand);
        blk.ffn.dw = detail_net::clone_conv_norm(f.dw);
        blk.ffn.project = detail_net::clone_conv_norm(f.project);
        blk.ffn.layer_scale = f.layer_scale.clone_detached();
        stages_[j].push_back(std::move(blk));
      }
      if (j < kStages - 1) {
        Down d;
        if (space_.dual_path_boundary(j)) {
          auto v = net.dual_down_view(j, cfg.widths[j], cfg.widths[j + 1]);
          DualPathDownParams<T> dp;
          dp.query_dw = detail_net::clone_conv_norm(v.query_dw);
          dp.query_proj = detail_net::clone_conv_norm(v.query_proj);
          dp.kv_proj = detail_net::clone_conv_norm(v.kv_proj);
          dp.attn_bias = v.attn_bias.clone_detached();
          dp.out_proj = detail_net::clone_conv_norm(v.out_proj);
          dp.conv_path = detail_net::clone_conv_norm(v.conv_path);
          dp.heads = v.heads;
          dp.head_dim = v.head_dim;
          d.dual = std::move(dp);
        } else {
          d.plain = detail_net::clone_conv_norm(net.plain_down_view(j, cfg.widths[j], cfg.widths[j + 1]));
        }
        downs_[j] = std::move(d);
      }
    }
    auto h = net.head_view(cfg.widths[kStages - 1]);
    head_.weight = h.weight.clone_detached();
    head_.bias = h.bias.clone_detached();
    register_all();
  }

  Tensor<T> forward(const Tensor<T>& x, NormMode mode, T drop_path_rate = T(0), Rng* rng = nullptr) const {
    auto y = stem_forward(stem_, x, mode);
    int64_t pos = 0;
    const int64_t total = total_residual_positions();
    auto keep = [&](int64_t p) {
      return T(1) - drop_path_rate * static_cast<T>(p + 1) / static_cast<T>(total);
    };
    for (int j = 0; j < kStages; ++j) {
      for (const auto& blk : stages_[j]) {
        if (blk.attn) {
          auto branch = stride_attention_branch(*blk.attn, y, space_.attention_stride(j), mode);
          y = residual_with_drop_path(y, branch, keep(pos), mode, rng);
        }
        if (space_.attention_stage(j)) ++pos;  // attention slot occupies a position even when absent
        y = residual_with_drop_path(y, ffn_branch(blk.ffn, y, mode), keep(pos), mode, rng);
        ++pos;
      }
      if (j < kStages - 1) {
        const auto& d = downs_[j];
        y = d.dual ? dual_path_downsample_forward(*d.dual, y, mode) : plain_downsample_forward(*d.plain, y, mode);
      }
    }
    return head_forward(head_, y);
  }

  const SearchSpace& space() const { return space_; }
  const SubnetConfig& config() const { return cfg_; }
  int64_t num_classes() const { return num_classes_; }
  ParamRegistry<T>& registry() { return registry_; }
  const ParamRegistry<T>& registry() const { return registry_; }

 private:
  int64_t total_residual_positions() const {
    int64_t n = 0;
    for (int j = 0; j < kStages; ++j) n += cfg_.depths[j] * (space_.attention_stage(j) ? 2 : 1);
    return n;
  }

  void register_all() {
    detail_net::register_conv_norm(registry_, "stem.conv1", stem_.conv1);
    detail_net::register_conv_norm(registry_, "stem.conv2", stem_.conv2);
    for (int j = 0; j < kStages; ++j) {
      for (size_t i = 0; i < stages_[j].size(); ++i) {
        const std::string bp = "stage" + std::to_string(j + 1) + ".block" + std::to_string(i);
        auto& blk = stages_[j][i];
        if (blk.attn) {
          auto& a = *blk.attn;
          detail_net::register_conv_norm(registry_, bp + ".attn.qkv", a.qkv);
          a.v_dw_weight = registry_.add_param(bp + ".attn.v_dw_weight", a.v_dw_weight);
          a.v_dw_bias = registry_.add_param(bp + ".attn.v_dw_bias", a.v_dw_bias);
          a.attn_bias = registry_.add_param(bp + ".attn.attn_bias", a.attn_bias);
          a.head_mix_pre = registry_.add_param(bp + ".attn.head_mix_pre", a.head_mix_pre);
          a.head_mix_post = registry_.add_param(bp + ".attn.head_mix_post", a.head_mix_post);
          detail_net::register_conv_norm(registry_, bp + ".attn.out_proj", a.out_proj);
          a.layer_scale = registry_.add_param(bp + ".attn.layer_scale", a.layer_scale);
        }
        detail_net::register_conv_norm(registry_, bp + ".ffn.expand", blk.ffn.expand);
        detail_net::register_conv_norm(registry_, bp + ".ffn.dw", blk.ffn.dw);
        detail_net::register_conv_norm(registry_, bp + ".ffn.project", blk.ffn.project);
        blk.ffn.layer_scale = registry_.add_param(bp + ".ffn.layer_scale", blk.ffn.layer_scale);
      }
      if (j < kStages - 1) {
        const std::string dp = "down" + std::to_string(j + 1) + "to" + std::to_string(j + 2);
        auto& d = downs_[j];
        if (d.dual) {
          detail_net::register_conv_norm(registry_, dp + ".query_dw", d.dual->query_dw);
          detail_net::register_conv_norm(registry_, dp + ".query_proj", d.dual->query_proj);
          detail_net::register_conv_norm(registry_, dp + ".kv_proj", d.dual->kv_proj);
          d.dual->attn_bias = registry_.add_param(dp + ".attn_bias", d.dual->attn_bias);
          detail_net::register_conv_norm(registry_, dp + ".out_proj", d.dual->out_proj);
          detail_net::register_conv_norm(registry_, dp + ".conv_path", d.dual->conv_path);
        } else {
          detail_net::register_conv_norm(registry_, dp + ".conv", *d.plain);
        }
      }
    }
    head_.weight = registry_.add_param("head.weight", head_.weight);
    head_.bias = registry_.add_param("head.bias", head_.bias);
  }

  SearchSpace space_;
  SubnetConfig cfg_;
  int64_t num_classes_ = 0;
  StemParams<T> stem_;
  std::vector<std::vector<PairBlock>> stages_;
  std::array<Down, kStages - 1> downs_;
  HeadParams<T> head_;
  ParamRegistry<T> registry_;
};

// ---------------------------------------------------------------------------
// the supernet

template <typename T>
class Supernet {
 public:
  struct PairBlock {
    std::optional<SwitchableAttention<T>> attn;  // stages 3-4 only
    SwitchableFFN<T> ffn;
  };
  struct Down {
    std::optional<SwitchableConv<T>> plain;
    std::optional<SwitchableDualPath<T>> dual;
  };

  Supernet(const SearchSpace& space, uint64_t seed, int64_t num_classes)
      : space_(space), num_classes_(num_classes) {
    space_.validate();
    if (num_classes < 2) throw ConfigError("supernet: need at least 2 classes");
    Rng rng(seed);
    build(rng);
  }

  const SearchSpace& space() const { return space_; }
  int64_t num_classes() const { return num_classes_; }
  ParamRegistry<T>& registry() { return registry_; }
  const ParamRegistry<T>& registry() const { return registry_; }

  // --- view builders (also the extraction surface) ---

  StemParams<T> stem_view(int64_t c1) const {
    StemParams<T> s;
    s.conv1 = stem1_;
    s.conv2 = stem2_.view(space_.stem_mid_channels(), c1);
    return s;
  }

  MHSAParams<T> attention_view(int j, int64_t i, int64_t c) const {
    return stages_[j][static_cast<size_t>(i)].attn->view(c);
  }

  FFNParams<T> ffn_view(int j, int64_t i, int64_t c, int64_t e) const {
    return stages_[j][static_cast<size_t>(i)].ffn.view(c, e);
  }

  ConvNorm<T> plain_down_view(int j, int64_t cin, int64_t cout) const {
    return downs_[j].plain->view(cin, cout);
  }

  DualPathDownParams<T> dual_down_view(int j, int64_t cin, int64_t cout) const {
    return downs_[j].dual->view(cin, cout);
  }

  HeadParams<T> head_view(int64_t c4) const {
    HeadParams<T> h;
    h.weight = slice_prefix(head_weight_, 1, c4);
    h.bias = head_bias_;
    return h;
  }

  // Executes one subnet. Blocks past the configured depth are skipped;
  // surviving residual branches are drop-path gated in train mode with a
  // keep probability decaying linearly over the max-config block positions.
  Tensor<T> forward(const SubnetConfig& cfg, const Tensor<T>& x, NormMode mode, T drop_path_rate = T(0),
                    Rng* rng = nullptr) const {
    validate_config(space_, cfg);
    if (drop_path_rate < T(0) || drop_path_rate >= T(1))
      throw ConfigError("supernet: drop path rate must be in [0, 1)");
    if (mode == NormMode::train && drop_path_rate > T(0) && rng == nullptr)
      throw ConfigError("supernet: drop path in train mode needs an rng");
    auto y = stem_forward(stem_view(cfg.widths[0]), x, mode);
    int64_t pos = 0;
    auto keep = [&](int64_t p) {
      return T(1) - drop_path_rate * static_cast<T>(p + 1) / static_cast<T>(total_positions_);
    };
    for (int j = 0; j < kStages; ++j) {
      const int64_t c = cfg.widths[j];
      for (int64_t i = 0; i < space_.max_depths[j]; ++i) {
        const bool alive = i < cfg.depths[j];
        if (space_.attention_stage(j)) {
          if (alive && cfg.mhsa_on[j][i]) {
            auto branch = stride_attention_branch(attention_view(j, i, c), y, space_.attention_stride(j), mode);
            y = residual_with_drop_path(y, branch, keep(pos), mode, rng);
          }
          ++pos;
        }
        if (alive)
          y = residual_with_drop_path(y, ffn_branch(ffn_view(j, i, c, cfg.expansions[j][i]), y, mode),
                                      keep(pos), mode, rng);
        ++pos;
      }
      if (j < kStages - 1) {
        const auto& d = downs_[j];
        y = d.dual ? dual_path_downsample_forward(d.dual->view(c, cfg.widths[j + 1]), y, mode)
                   : plain_downsample_forward(d.plain->view(c, cfg.widths[j + 1]), y, mode);
      }
    }
    return head_forward(head_view(cfg.widths[kStages - 1]), y);
  }

  // every switchable layer with its name, for slicing-equivalence audits
  std::vector<std::pair<std::string, const SwitchableConv<T>*>> switchable_layers() const {
    std::vector<std::pair<std::string, const SwitchableConv<T>*>> out;
    out.emplace_back("stem.conv2", &stem2_);
    for (int j = 0; j < kStages; ++j) {
      for (size_t i = 0; i < stages_[j].size(); ++i) {
        const std::string bp = "stage" + std::to_string(j + 1) + ".block" + std::to_string(i);
        const auto& blk = stages_[j][i];
        if (blk.attn) {
          out.emplace_back(bp + ".attn.qkv", &blk.attn->qkv);
          out.emplace_back(bp + ".attn.out_proj", &blk.attn->out_proj);
        }
        out.emplace_back(bp + ".ffn.expand", &blk.ffn.expand);
        out.emplace_back(bp + ".ffn.dw", &blk.ffn.dw);
        out.emplace_back(bp + ".ffn.project", &blk.ffn.project);
      }
      if (j < kStages - 1) {
        const std::string dp = "down" + std::to_string(j + 1) + "to" + std::to_string(j + 2);
        const auto& d = downs_[j];
        if (d.dual) {
          out.emplace_back(dp + ".query_dw", &d.dual->query_dw);
          out.emplace_back(dp + ".query_proj", &d.dual->query_proj);
          out.emplace_back(dp + ".kv_proj", &d.dual->kv_proj);
          out.emplace_back(dp + ".out_proj", &d.dual->out_proj);
          out.emplace_back(dp + ".conv_path", &d.dual->conv_path);
        } else {
          out.emplace_back(dp + ".conv", &d.plain.value());
        }
      }
    }
    return out;
  }

 private:
  // distinct output widths of an FFN's hidden layers over all (E, C) pairs
  std::vector<int64_t> hidden_width_choices(int j) const {
    std::vector<int64_t> out;
    for (int64_t e : space_.expansion_choices)
      for (int64_t c : space_.width_choices[j]) out.push_back(e * c);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  SwitchableConv<T> make_switchable(const std::string& name, int64_t cin_max, std::vector<int64_t> out_choices,
                                    int64_t k, int64_t stride, int64_t padding, bool depthwise,
                                    std::optional<Activation> act, Rng& rng) {
    SwitchableConv<T> sc;
    const int64_t cout_max = out_choices.back();
    auto w = init_conv_weight<T>(cout_max, depthwise ? 1 : cin_max, k, k,
                                 k == 1 ? ConvInit::projection : ConvInit::spatial, rng);
    sc.weight = registry_.add_param(name + ".weight", w);
    sc.out_choices = std::move(out_choices);
    for (int64_t c : sc.out_choices) {
      auto n = make_norm<T>(c);
      detail_net::register_norm(registry_, name + ".norm.w" + std::to_string(c), n);
      sc.norms.push_back(std::move(n));
    }
    sc.act = act;
    sc.stride = stride;
    sc.padding = padding;
    sc.depthwise = depthwise;
    return sc;
  }

  SwitchableAttention<T> make_switchable_attention(const std::string& name, int j, Rng& rng) {
    SwitchableAttention<T> a;
    a.heads = space_.heads(j);
    a.head_dim = space_.head_dim;
    const int64_t hd = a.heads * a.head_dim;
    const int64_t s = space_.attention_stride(j);
    const int64_t tokens = space_.stage_tokens(j) / (s * s);
    const int64_t cmax = space_.max_width(j);
    a.qkv = make_switchable(name + ".qkv", cmax, {3 * hd}, 1, 1, 0, false, std::nullopt, rng);
    a.v_dw_weight = registry_.add_param(name + ".v_dw_weight",
                                        init_conv_weight<T>(hd, 1, 3, 3, ConvInit::spatial, rng));
    a.v_dw_bias = registry_.add_param(name + ".v_dw_bias", Tensor<T>::zeros({hd}));
    a.attn_bias = registry_.add_param(name + ".attn_bias", Tensor<T>::zeros({a.heads, tokens, tokens}));
    a.head_mix_pre = registry_.add_param(
        name + ".head_mix_pre",
        add(identity_matrix<T>(a.heads), Tensor<T>::truncated_normal({a.heads, a.heads}, rng, T(0.02))));
    a.head_mix_post = registry_.add_param(
        name + ".head_mix_post",
        add(identity_matrix<T>(a.heads), Tensor<T>::truncated_normal({a.heads, a.heads}, rng, T(0.02))));
    a.out_proj = make_switchable(name + ".out_proj", hd, space_.width_choices[j], 1, 1, 0, false,
                                 std::nullopt, rng);
    a.layer_scale = registry_.add_param(name + ".layer_scale", Tensor<T>::full({cmax}, T(0.1)));
    return a;
  }

  void build(Rng& rng) {
    auto stem1 = make_conv_norm<T>(3, space_.stem_mid_channels(), 3, 2, 1, 1, space_.activation, rng);
    detail_net::register_conv_norm(registry_, "stem.conv1", stem1);
    stem1_ = std::move(stem1);
    stem2_ = make_switchable("stem.conv2", space_.stem_mid_channels(), space_.width_choices[0], 3, 2, 1,
                             false, space_.activation, rng);

    stages_.resize(kStages);
    for (int j = 0; j < kStages; ++j) {
      const int64_t cmax = space_.max_width(j);
      const auto hidden = hidden_width_choices(j);
      for (int64_t i = 0; i < space_.max_depths[j]; ++i) {
        const std::string bp = "stage" + std::to_string(j + 1) + ".block" + std::to_string(i);
        PairBlock blk;
        if (space_.attention_stage(j)) blk.attn = make_switchable_attention(bp + ".attn", j, rng);
        blk.ffn.expand =
            make_switchable(bp + ".ffn.expand", cmax, hidden, 1, 1, 0, false, space_.activation, rng);
        blk.ffn.dw = make_switchable(bp + ".ffn.dw", hidden.back(), hidden, 3, 1, 1, true,
                                     space_.activation, rng);
        blk.ffn.project = make_switchable(bp + ".ffn.project", hidden.back(), space_.width_choices[j], 1, 1,
                                          0, false, std::nullopt, rng);
        blk.ffn.layer_scale = registry_.add_param(bp + ".ffn.layer_scale", Tensor<T>::full({cmax}, T(0.1)));
        stages_[j].push_back(std::move(blk));
      }
      if (j < kStages - 1) {
        const std::string dp = "down" + std::to_string(j + 1) + "to" + std::to_string(j + 2);
        Down d;
        if (space_.dual_path_boundary(j)) {
          SwitchableDualPath<T> dual;
          dual.heads = space_.heads(j + 1);
          dual.head_dim = space_.head_dim;
          const int64_t hd = dual.heads * dual.head_dim;
          const int64_t tokens = space_.stage_tokens(j);
          dual.query_dw = make_switchable(dp + ".query_dw", cmax, space_.width_choices[j], 3, 2, 1, true,
                                          std::nullopt, rng);
          dual.query_proj =
              make_switchable(dp + ".query_proj", 2 * cmax, {hd}, 1, 1, 0, false, std::nullopt, rng);
          dual.kv_proj = make_switchable(dp + ".kv_proj", cmax, {2 * hd}, 1, 1, 0, false, std::nullopt, rng);
          dual.attn_bias =
              registry_.add_param(dp + ".attn_bias", Tensor<T>::zeros({dual.heads, tokens / 4, tokens}));
          dual.out_proj = make_switchable(dp + ".out_proj", hd, space_.width_choices[j + 1], 1, 1, 0, false,
                                          std::nullopt, rng);
          dual.conv_path = make_switchable(dp + ".conv_path", cmax, space_.width_choices[j + 1], 3, 2, 1,
                                           false, std::nullopt, rng);
          d.dual = std::move(dual);
        } else {
          d.plain = make_switchable(dp + ".conv", cmax, space_.width_choices[j + 1], 3, 2, 1, false,
                                    std::nullopt, rng);
        }
        downs_[j] = std::move(d);
      }
    }
    head_weight_ = registry_.add_param(
        "head.weight", Tensor<T>::truncated_normal({num_classes_, space_.max_width(kStages - 1)}, rng, T(0.02)));
    head_bias_ = registry_.add_param("head.bias", Tensor<T>::zeros({num_classes_}));

    total_positions_ = 0;
    for (int j = 0; j < kStages; ++j)
      total_positions_ += space_.max_depths[j] * (space_.attention_stage(j) ? 2 : 1);
  }

  SearchSpace space_;
  int64_t num_classes_;
  ConvNorm<T> stem1_;
  SwitchableConv<T> stem2_;
  std::vector<std::vector<PairBlock>> stages_;
  std::array<Down, kStages - 1> downs_;
  Tensor<T> head_weight_;
  Tensor<T> head_bias_;
  int64_t total_positions_ = 0;
  ParamRegistry<T> registry_;
};

// free-function entry points

template <typename T>
inline Supernet<T> build_supernet(const SearchSpace& space, uint64_t seed, int64_t num_classes = 10) {
  return Supernet<T>(space, seed, num_classes);
}

template <typename T>
inline Tensor<T> execute_subnet(const Supernet<T>& net, const SubnetConfig& cfg, const Tensor<T>& x,
                                NormMode mode, T drop_path_rate = T(0), Rng* rng = nullptr) {
  return net.forward(cfg, x, mode, drop_path_rate, rng);
}

template <typename T>
inline SubnetModel<T> extract_subnet(const Supernet<T>& net, const SubnetConfig& cfg) {
  return SubnetModel<T>(net, cfg, 0);
}

template <typename T>
struct SandwichLosses {
  T min_loss, rand1_loss, rand2_loss, max_loss;
};

// Sandwich rule: accumulate gradients from the smallest, two random, and the
// largest subnet, then take one optimizer step.
template <typename T>
inline SandwichLosses<T> sandwich_train_step(Supernet<T>& net, const Tensor<T>& images,
                                             const std::vector<int64_t>& labels, AdamW<T>& opt,
                                             uint64_t seed, T drop_path_rate = T(0.1)) {
  Rng rng(seed);
  std::array<SubnetConfig, 4> cfgs = {min_config(net.space()), random_config(net.space(), rng),
                                      random_config(net.space(), rng), max_config(net.space())};
  opt.zero_grad();
  std::array<T, 4> losses{};
  for (size_t s = 0; s < cfgs.size(); ++s) {
    auto logits = net.forward(cfgs[s], images, NormMode::train, drop_path_rate, &rng);
    auto loss = cross_entropy_logits(logits, labels);
    losses[s] = loss.item();
    backward(loss);
  }
  opt.step();
  return SandwichLosses<T>{losses[0], losses[1], losses[2], losses[3]};
}

}  // namespace slimnas
