// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
//
// Mobile Efficiency Score, closed-form parameter/MAC counting, and the
// per-block latency lookup table with a host wall-clock benchmarker.

#pragma once

#include <chrono>
#include <optional>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#ifdef __linux__
#include <sched.h>
#endif

#include "slimnas/supernet.hpp"

namespace slimnas {

// ---------------------------------------------------------------------------
// Mobile Efficiency Score

struct MetricSpec {
  std::string name;
  double unit;   // same physical unit as the measurement
  double alpha;  // importance exponent in (0, 1]
};

struct MESConfig {
  double base_score = 100.0;
  std::vector<MetricSpec> metrics;

  // size against a 3M-parameter unit at weight 0.5, latency against 1 ms at
  // weight 1.0
  static MESConfig defaults(double alpha_size = 0.5, double alpha_latency = 1.0) {
    MESConfig c;
    c.metrics.push_back({"size", 3e6, alpha_size});
    c.metrics.push_back({"latency", 1.0, alpha_latency});
    return c;
  }

  void validate() const {
    if (base_score <= 0) throw ConfigError("mes: base score must be positive");
    for (size_t i = 0; i < metrics.size(); ++i) {
      const auto& m = metrics[i];
      if (m.unit <= 0) throw ConfigError("mes: unit for '" + m.name + "' must be positive");
      if (m.alpha <= 0 || m.alpha > 1)
        throw ConfigError("mes: alpha for '" + m.name + "' must be in (0, 1]");
      for (size_t j = 0; j < i; ++j)
        if (metrics[j].name == m.name) throw ConfigError("mes: duplicate metric '" + m.name + "'");
    }
  }
};

inline double compute_mes(const MESConfig& cfg, const std::map<std::string, double>& measurements) {
  cfg.validate();
  double score = cfg.base_score;
  for (const auto& m : cfg.metrics) {
    auto it = measurements.find(m.name);
    if (it == measurements.end()) throw ConfigError("mes: missing measurement for '" + m.name + "'");
    if (it->second <= 0) throw ConfigError("mes: measurement '" + m.name + "' must be positive");
    score *= std::pow(it->second / m.unit, -m.alpha);
  }
  return score;
}

// ---------------------------------------------------------------------------
// block enumeration

enum class BlockKind { Stem, FFN, MHSA, StrideAttn, DualPathDown, PlainDown, Head };

inline const char* block_kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::Stem: return "Stem";
    case BlockKind::FFN: return "FFN";
    case BlockKind::MHSA: return "MHSA";
    case BlockKind::StrideAttn: return "StrideAttn";
    case BlockKind::DualPathDown: return "DualPathDown";
    case BlockKind::PlainDown: return "PlainDown";
    case BlockKind::Head: return "Head";
  }
  return "?";
}

inline BlockKind block_kind_from_name(const std::string& s) {
  for (BlockKind k : {BlockKind::Stem, BlockKind::FFN, BlockKind::MHSA, BlockKind::StrideAttn,
                      BlockKind::DualPathDown, BlockKind::PlainDown, BlockKind::Head})
    if (s == block_kind_name(k)) return k;
  throw FormatError("unknown block kind: " + s);
}

// One priced unit of architecture. `resolution` is the block's input feature
// resolution; for downsampling blocks `width` is the produced width and
// `expansion` reuses the slot to carry the incoming width.
struct BlockDesc {
  BlockKind kind;
  int stage;  // 1-based
  int64_t resolution;
  int64_t width;
  int64_t expansion;

  std::string str() const {
    std::ostringstream os;
    os << block_kind_name(kind) << "(stage=" << stage << ",res=" << resolution << ",width=" << width
       << ",exp=" << expansion << ")";
    return os.str();
  }
};

inline std::vector<BlockDesc> enumerate_blocks(const SearchSpace& space, const SubnetConfig& cfg) {
  validate_config(space, cfg);
  std::vector<BlockDesc> out;
  out.push_back({BlockKind::Stem, 1, space.input_resolution, cfg.widths[0], 0});
  for (int j = 0; j < kStages; ++j) {
    const int64_t res = space.stage_resolution(j);
    for (int64_t i = 0; i < cfg.depths[j]; ++i) {
      if (space.attention_stage(j) && cfg.mhsa_on[j][i])
        out.push_back({space.attention_stride(j) > 1 ? BlockKind::StrideAttn : BlockKind::MHSA, j + 1, res,
                       cfg.widths[j], 0});
      out.push_back({BlockKind::FFN, j + 1, res, cfg.widths[j], cfg.expansions[j][i]});
    }
    if (j < kStages - 1)
      out.push_back({space.dual_path_boundary(j) ? BlockKind::DualPathDown : BlockKind::PlainDown, j + 1, res,
                     cfg.widths[j + 1], cfg.widths[j]});
  }
  out.push_back({BlockKind::Head, kStages, space.stage_resolution(kStages - 1), cfg.widths[kStages - 1], 0});
  return out;
}

// ---------------------------------------------------------------------------
// parameter counting

inline int64_t conv_param_count(int64_t cin, int64_t cout, int64_t k, int64_t groups, bool bias, bool norm) {
  return cout * (cin / groups) * k * k + (bias ? cout : 0) + (norm ? 2 * cout : 0);
}

inline int64_t attention_param_count(int64_t c, int64_t heads, int64_t head_dim, int64_t tokens) {
  const int64_t hd = heads * head_dim;
  int64_t n = conv_param_count(c, 3 * hd, 1, 1, false, true);   // qkv
  n += conv_param_count(hd, hd, 3, hd, true, false);            // v locality, bare conv
  n += heads * tokens * tokens;                                 // position bias
  n += 2 * heads * heads;                                       // head mixing
  n += conv_param_count(hd, c, 1, 1, false, true);              // output projection
  n += c;                                                       // layer scale
  return n;
}

inline int64_t block_param_count(const SearchSpace& space, const BlockDesc& d, int64_t num_classes) {
  switch (d.kind) {
    case BlockKind::Stem: {
      const int64_t mid = space.stem_mid_channels();
      return conv_param_count(3, mid, 3, 1, false, true) + conv_param_count(mid, d.width, 3, 1, false, true);
    }
    case BlockKind::FFN: {
      const int64_t ec = d.expansion * d.width;
      return conv_param_count(d.width, ec, 1, 1, false, true) + conv_param_count(ec, ec, 3, ec, false, true) +
             conv_param_count(ec, d.width, 1, 1, false, true) + d.width;
    }
    case BlockKind::MHSA:
    case BlockKind::StrideAttn: {
      const int j = d.stage - 1;
      const int64_t s = d.kind == BlockKind::StrideAttn ? 2 : 1;
      const int64_t tokens = (d.resolution / s) * (d.resolution / s);
      return attention_param_count(d.width, space.heads(j), space.head_dim, tokens);
    }
    case BlockKind::DualPathDown: {
      const int j = d.stage - 1;
      const int64_t cin = d.expansion, cout = d.width;
      const int64_t heads = space.heads(j + 1), hd = heads * space.head_dim;
      const int64_t n_full = d.resolution * d.resolution;
      int64_t n = conv_param_count(cin, cin, 3, cin, false, true);       // query dw
      n += conv_param_count(2 * cin, hd, 1, 1, false, true);             // query projection
      n += conv_param_count(cin, 2 * hd, 1, 1, false, true);             // kv projection
      n += heads * (n_full / 4) * n_full;                                // mixed-resolution bias
      n += conv_param_count(hd, cout, 1, 1, false, true);                // output projection
      n += conv_param_count(cin, cout, 3, 1, false, true);               // conv path
      return n;
    }
    case BlockKind::PlainDown:
      return conv_param_count(d.expansion, d.width, 3, 1, false, true);
    case BlockKind::Head:
      return num_classes * d.width + num_classes;
  }
  return 0;
}

inline int64_t count_params(const SearchSpace& space, const SubnetConfig& cfg, int64_t num_classes = 10) {
  int64_t total = 0;
  for (const auto& d : enumerate_blocks(space, cfg)) total += block_param_count(space, d, num_classes);
  return total;
}

// ---------------------------------------------------------------------------
// MAC counting (multiply-accumulates per forward pass, batch of one)

struct MacCount {
  int64_t total = 0;
  int64_t attention_matmul = 0;  // the q k^T and attn*v products only
};

inline int64_t conv_macs(int64_t cin, int64_t cout, int64_t k, int64_t groups, int64_t out_res) {
  return cout * (cin / groups) * k * k * out_res * out_res;
}

inline MacCount block_macs(const SearchSpace& space, const BlockDesc& d, int64_t num_classes) {
  MacCount m;
  switch (d.kind) {
    case BlockKind::Stem: {
      const int64_t mid = space.stem_mid_channels();
      m.total = conv_macs(3, mid, 3, 1, d.resolution / 2) + conv_macs(mid, d.width, 3, 1, d.resolution / 4);
      break;
    }
    case BlockKind::FFN: {
      const int64_t ec = d.expansion * d.width;
      m.total = conv_macs(d.width, ec, 1, 1, d.resolution) + conv_macs(ec, ec, 3, ec, d.resolution) +
                conv_macs(ec, d.width, 1, 1, d.resolution);
      break;
    }
    case BlockKind::MHSA:
    case BlockKind::StrideAttn: {
      const int j = d.stage - 1;
      const int64_t s = d.kind == BlockKind::StrideAttn ? 2 : 1;
      const int64_t rs = d.resolution / s;     // token grid inside the core
      const int64_t n = rs * rs;
      const int64_t heads = space.heads(j), hd = heads * space.head_dim;
      m.total += conv_macs(d.width, 3 * hd, 1, 1, rs);       // qkv at pooled resolution
      m.total += conv_macs(hd, hd, 3, hd, rs);               // v locality
      m.attention_matmul = 2 * heads * n * n * space.head_dim;
      m.total += m.attention_matmul;
      m.total += 2 * heads * heads * n * n;                  // head mixing
      m.total += conv_macs(hd, d.width, 1, 1, d.resolution); // output projection at full resolution
      break;
    }
    case BlockKind::DualPathDown: {
      const int j = d.stage - 1;
      const int64_t cin = d.expansion, cout = d.width;
      const int64_t heads = space.heads(j + 1), hd = heads * space.head_dim;
      const int64_t half = d.resolution / 2;
      const int64_t n_full = d.resolution * d.resolution;
      m.total += conv_macs(cin, cin, 3, cin, half);          // query dw
      m.total += conv_macs(2 * cin, hd, 1, 1, half);         // query projection
      m.total += conv_macs(cin, 2 * hd, 1, 1, d.resolution); // kv projection
      m.attention_matmul = 2 * heads * (n_full / 4) * n_full * space.head_dim;
      m.total += m.attention_matmul;
      m.total += conv_macs(hd, cout, 1, 1, half);            // output projection
      m.total += conv_macs(cin, cout, 3, 1, half);           // conv path
      break;
    }
    case BlockKind::PlainDown:
      m.total = conv_macs(d.expansion, d.width, 3, 1, d.resolution / 2);
      break;
    case BlockKind::Head:
      m.total = num_classes * d.width;
      break;
  }
  return m;
}

inline MacCount count_macs_detailed(const SearchSpace& space, const SubnetConfig& cfg,
                                    int64_t num_classes = 10) {
  MacCount sum;
  for (const auto& d : enumerate_blocks(space, cfg)) {
    auto m = block_macs(space, d, num_classes);
    sum.total += m.total;
    sum.attention_matmul += m.attention_matmul;
  }
  return sum;
}

inline int64_t count_macs(const SearchSpace& space, const SubnetConfig& cfg, int64_t num_classes = 10) {
  return count_macs_detailed(space, cfg, num_classes).total;
}

// ---------------------------------------------------------------------------
// latency lookup table

struct LatencyKey {
  std::string kind;
  int stage;
  int64_t resolution;
  int64_t width;
  int64_t expansion;

  auto operator<=>(const LatencyKey&) const = default;

  static LatencyKey of(const BlockDesc& d) {
    return {block_kind_name(d.kind), d.stage, d.resolution, d.width, d.expansion};
  }

  std::string str() const {
    std::ostringstream os;
    os << kind << "(stage=" << stage << ",res=" << resolution << ",width=" << width << ",exp=" << expansion
       << ")";
    return os.str();
  }
};

struct LatencyEntry {
  double latency_ms = 0;
  std::string provenance;
};

class LatencyTable {
 public:
  void insert(const LatencyKey& key, const LatencyEntry& entry) {
    if (entry.latency_ms <= 0) throw ConfigError("latency table: entry must be positive for " + key.str());
    if (!entries_.emplace(key, entry).second)
      throw ConfigError("latency table: duplicate key " + key.str());
    }

  const LatencyEntry& lookup(const LatencyKey& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw ConfigError("latency table: no entry for " + key.str());
    return it->second;
  }

  bool contains(const LatencyKey& key) const { return entries_.count(key) != 0; }
  size_t size() const { return entries_.size(); }
  const std::map<LatencyKey, LatencyEntry>& entries() const { return entries_; }

  // delimiter-separated text, '.' decimals, one row per entry
  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("latency table: cannot write " + path);
    out << "kind,stage,resolution,width,expansion,latency_ms,provenance\n";
    char buf[64];
    for (const auto& [k, e] : entries_) {
      std::snprintf(buf, sizeof(buf), "%.17g", e.latency_ms);
      out << k.kind << "," << k.stage << "," << k.resolution << "," << k.width << "," << k.expansion << ","
          << buf << "," << e.provenance << "\n";
    }
  }

  static LatencyTable load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("latency table: cannot read " + path);
    std::string line;
    if (!std::getline(in, line) || line != "kind,stage,resolution,width,expansion,latency_ms,provenance")
      throw FormatError("latency table: bad header in " + path);
    LatencyTable t;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) f.push_back(cell);
      if (f.size() != 7) throw FormatError("latency table: malformed row '" + line + "'");
      block_kind_from_name(f[0]);  // validates the kind
      LatencyKey key{f[0], std::stoi(f[1]), std::stoll(f[2]), std::stoll(f[3]), std::stoll(f[4])};
      LatencyEntry e{std::stod(f[5]), f[6]};
      if (t.contains(key)) throw FormatError("latency table: duplicate key " + key.str());
      if (e.latency_ms <= 0) throw FormatError("latency table: non-positive latency for " + key.str());
      t.entries_.emplace(key, e);
    }
    return t;
  }

 private:
  std::map<LatencyKey, LatencyEntry> entries_;
};

// Sum of per-block entries over the subnet's surviving blocks.
inline double predict_latency(const LatencyTable& table, const SearchSpace& space, const SubnetConfig& cfg,
                              int64_t num_classes = 10) {
  (void)num_classes;
  double ms = 0;
  for (const auto& d : enumerate_blocks(space, cfg)) ms += table.lookup(LatencyKey::of(d)).latency_ms;
  return ms;
}

// Every descriptor reachable in the space (the table-coverage closure).
inline std::vector<BlockDesc> reachable_blocks(const SearchSpace& space) {
  space.validate();
  std::vector<BlockDesc> out;
  for (int64_t c1 : space.width_choices[0]) out.push_back({BlockKind::Stem, 1, space.input_resolution, c1, 0});
  for (int j = 0; j < kStages; ++j) {
    const int64_t res = space.stage_resolution(j);
    for (int64_t c : space.width_choices[j]) {
      for (int64_t e : space.expansion_choices) out.push_back({BlockKind::FFN, j + 1, res, c, e});
      if (space.attention_stage(j))
        out.push_back({space.attention_stride(j) > 1 ? BlockKind::StrideAttn : BlockKind::MHSA, j + 1, res, c, 0});
    }
    if (j < kStages - 1)
      for (int64_t cin : space.width_choices[j])
        for (int64_t cout : space.width_choices[j + 1])
          out.push_back({space.dual_path_boundary(j) ? BlockKind::DualPathDown : BlockKind::PlainDown, j + 1,
                         res, cout, cin});
  }
  for (int64_t c4 : space.width_choices[kStages - 1])
    out.push_back({BlockKind::Head, kStages, space.stage_resolution(kStages - 1), c4, 0});
  return out;
}

inline std::vector<std::string> audit_coverage(const LatencyTable& table, const SearchSpace& space) {
  std::vector<std::string> missing;
  for (const auto& d : reachable_blocks(space))
    if (!table.contains(LatencyKey::of(d))) missing.push_back(LatencyKey::of(d).str());
  return missing;
}

// ---------------------------------------------------------------------------
// table construction

enum class BenchDevice { host_wall_clock, analytic };

// Pins the calling thread to one core for the benchmark's lifetime and
// restores the previous mask afterwards. Best effort; no-op off Linux.
class ScopedCpuPin {
 public:
  ScopedCpuPin() {
#ifdef __linux__
    if (sched_getaffinity(0, sizeof(saved_), &saved_) == 0) {
      cpu_set_t one;
      CPU_ZERO(&one);
      for (int cpu = 0; cpu < CPU_SETSIZE; ++cpu)
        if (CPU_ISSET(cpu, &saved_)) {
          CPU_SET(cpu, &one);
          break;
        }
      if (CPU_COUNT(&one) == 1 && sched_setaffinity(0, sizeof(one), &one) == 0) active_ = true;
    }
#endif
  }
  ~ScopedCpuPin() {
#ifdef __linux__
    if (active_) sched_setaffinity(0, sizeof(saved_), &saved_);
#endif
  }

 private:
#ifdef __linux__
  cpu_set_t saved_{};
#endif
  bool active_ = false;
};

namespace detail_bench {

inline double timer_resolution_ms() {
  using clock = std::chrono::steady_clock;
  double best = 1e9;
  for (int i = 0; i < 64; ++i) {
    auto a = clock::now();
    auto b = clock::now();
    while (b == a) b = clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(b - a).count());
  }
  return best;
}

// One isolated eval-mode forward of the described block at its exact shapes.
template <typename T>
inline std::function<void()> make_block_runner(const SearchSpace& space, const BlockDesc& d,
                                               int64_t num_classes, Rng& rng) {
  const int j = d.stage - 1;
  switch (d.kind) {
    case BlockKind::Stem: {
      auto p = std::make_shared<StemParams<T>>(
          make_stem_params<T>(space.stem_mid_channels(), d.width, space.activation, rng));
      auto x = Tensor<T>::randn({1, 3, d.resolution, d.resolution}, rng);
      return [p, x]() { (void)stem_forward(*p, x, NormMode::eval); };
    }
    case BlockKind::FFN: {
      auto p = std::make_shared<FFNParams<T>>(
          make_ffn_params<T>(d.width, d.expansion, space.activation, rng));
      auto x = Tensor<T>::randn({1, d.width, d.resolution, d.resolution}, rng);
      return [p, x]() { (void)unified_ffn_forward(*p, x, NormMode::eval); };
    }
    case BlockKind::MHSA:
    case BlockKind::StrideAttn: {
      const int64_t s = d.kind == BlockKind::StrideAttn ? 2 : 1;
      const int64_t tokens = (d.resolution / s) * (d.resolution / s);
      auto p = std::make_shared<MHSAParams<T>>(
          make_mhsa_params<T>(d.width, space.heads(j), space.head_dim, tokens, tokens, rng));
      auto x = Tensor<T>::randn({1, d.width, d.resolution, d.resolution}, rng);
      return [p, x, s]() { (void)stride_attention_forward(*p, x, s, NormMode::eval); };
    }
    case BlockKind::DualPathDown: {
      auto p = std::make_shared<DualPathDownParams<T>>(make_dual_path_params<T>(
          d.expansion, d.width, space.heads(j + 1), space.head_dim, d.resolution * d.resolution, rng));
      auto x = Tensor<T>::randn({1, d.expansion, d.resolution, d.resolution}, rng);
      return [p, x]() { (void)dual_path_downsample_forward(*p, x, NormMode::eval); };
    }
    case BlockKind::PlainDown: {
      auto p = std::make_shared<ConvNorm<T>>(
          make_conv_norm<T>(d.expansion, d.width, 3, 2, 1, 1, std::nullopt, rng));
      auto x = Tensor<T>::randn({1, d.expansion, d.resolution, d.resolution}, rng);
      return [p, x]() { (void)plain_downsample_forward(*p, x, NormMode::eval); };
    }
    case BlockKind::Head: {
      auto p = std::make_shared<HeadParams<T>>(make_head_params<T>(d.width, num_classes, rng));
      auto x = Tensor<T>::randn({1, d.width, d.resolution, d.resolution}, rng);
      return [p, x]() { (void)head_forward(*p, x); };
    }
  }
  throw ConfigError("unknown block kind");
}

}  // namespace detail_bench

struct BenchOptions {
  int64_t num_classes = 10;
  double ms_per_mac = 1e-9;  // analytic mode: 1 ms per GMAC
  uint64_t seed = 0;
};

// Measured mode times each block in isolation at its exact shapes (median of
// `reps` after `warmup` discarded runs, batch of one, single thread, with
// fast blocks looped to outrun timer resolution). Analytic mode prices every
// block at ms_per_mac times its MAC count.
inline LatencyTable build_latency_table(const SearchSpace& space, BenchDevice device, int reps = 15,
                                        int warmup = 3, const BenchOptions& opts = {}) {
  if (device == BenchDevice::host_wall_clock && reps < 3)
    throw ConfigError("build_latency_table: need reps >= 3");
  LatencyTable table;
  std::optional<ScopedCpuPin> pin;
  if (device == BenchDevice::host_wall_clock) pin.emplace();
  const double tick_ms = device == BenchDevice::host_wall_clock ? detail_bench::timer_resolution_ms() : 0;
  Rng rng(opts.seed);
  for (const auto& d : reachable_blocks(space)) {
    LatencyEntry e;
    if (device == BenchDevice::analytic) {
      e.latency_ms = static_cast<double>(block_macs(space, d, opts.num_classes).total) * opts.ms_per_mac;
      e.provenance = "analytic_macs";
    } else {
      NoGradGuard<float> ng;
      auto run = detail_bench::make_block_runner<float>(space, d, opts.num_classes, rng);
      using clock = std::chrono::steady_clock;
      // size the inner loop so one rep takes ~50us even for tiny blocks
      run();
      auto t0 = clock::now();
      run();
      double est_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
      const int iters = static_cast<int>(std::min(1000.0, std::max(1.0, std::ceil(0.05 / std::max(est_ms, 1e-7)))));
      std::vector<double> samples;
      for (int r = 0; r < warmup + reps; ++r) {
        auto a = clock::now();
        for (int i = 0; i < iters; ++i) run();
        auto b = clock::now();
        if (r >= warmup)
          samples.push_back(std::chrono::duration<double, std::milli>(b - a).count() / iters);
      }
      std::sort(samples.begin(), samples.end());
      e.latency_ms = samples[samples.size() / 2];
      e.provenance = e.latency_ms * iters < tick_ms ? "measured_host+timer_warn" : "measured_host";
    }
    table.insert(LatencyKey::of(d), e);
  }
  return table;
}

// Convenience for the searcher: size and latency measurements of a config.
inline double mes_of_config(const MESConfig& mes_cfg, const LatencyTable& table, const SearchSpace& space,
                            const SubnetConfig& cfg, int64_t num_classes = 10) {
  std::map<std::string, double> m;
  m["size"] = static_cast<double>(count_params(space, cfg, num_classes));
  m["latency"] = predict_latency(table, space, cfg, num_classes);
  return compute_mes(mes_cfg, m);
}

}  // namespace slimnas
