// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation-based greedy slimming: enumerate the single-step frontier
// actions, score each by accuracy drop per efficiency-score gain, and apply
// the argmin until the objective is met. Includes exhaustive and random
// baselines for comparison at toy scale.

#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "slimnas/config.hpp"
#include "slimnas/mes.hpp"

namespace slimnas {

// ---------------------------------------------------------------------------
// actions

struct Action {
  enum class Kind { SlimBlock, ShrinkWidth, ShrinkExpansion };
  Kind kind;
  int stage = 0;         // 0-based
  int64_t block = -1;    // SlimBlock(mhsa)/ShrinkExpansion target block
  bool mhsa_only = false;
  int64_t to_value = 0;  // ShrinkWidth/ShrinkExpansion target value

  // fields separated by ';' so records stay comma-splittable
  std::string str() const {
    std::ostringstream os;
    switch (kind) {
      case Kind::SlimBlock:
        os << "slim_block(stage=" << stage + 1 << ";block=" << block
           << ";sub=" << (mhsa_only ? "mhsa" : "whole") << ")";
        break;
      case Kind::ShrinkWidth:
        os << "shrink_width(stage=" << stage + 1 << ";to=" << to_value << ")";
        break;
      case Kind::ShrinkExpansion:
        os << "shrink_expansion(stage=" << stage + 1 << ";block=" << block << ";to=" << to_value << ")";
        break;
    }
    return os.str();
  }

  static Action parse(const std::string& s) {
    auto field = [&](const char* name) -> std::string {
      const std::string tag = std::string(name) + "=";
      auto p = s.find(tag);
      if (p == std::string::npos) throw FormatError("action: missing field '" + std::string(name) + "' in " + s);
      p += tag.size();
      auto e = s.find_first_of(";)", p);
      return s.substr(p, e - p);
    };
    Action a;
    if (s.rfind("slim_block(", 0) == 0) {
      a.kind = Kind::SlimBlock;
      a.stage = std::stoi(field("stage")) - 1;
      a.block = std::stoll(field("block"));
      a.mhsa_only = field("sub") == "mhsa";
    } else if (s.rfind("shrink_width(", 0) == 0) {
      a.kind = Kind::ShrinkWidth;
      a.stage = std::stoi(field("stage")) - 1;
      a.to_value = std::stoll(field("to"));
    } else if (s.rfind("shrink_expansion(", 0) == 0) {
      a.kind = Kind::ShrinkExpansion;
      a.stage = std::stoi(field("stage")) - 1;
      a.block = std::stoll(field("block"));
      a.to_value = std::stoll(field("to"));
    } else {
      throw FormatError("action: cannot parse '" + s + "'");
    }
    return a;
  }
};

inline SubnetConfig apply_action(const SearchSpace& space, const SubnetConfig& cfg, const Action& a) {
  if (a.stage < 0 || a.stage >= kStages) throw ConfigError("action: stage out of range in " + a.str());
  if (a.kind != Action::Kind::ShrinkWidth && (a.block < 0 || a.block >= cfg.depths[a.stage]))
    throw ConfigError("action: block index out of range in " + a.str());
  SubnetConfig out = cfg;
  switch (a.kind) {
    case Action::Kind::SlimBlock: {
      if (a.mhsa_only) {
        if (!space.attention_stage(a.stage) || a.block >= cfg.depths[a.stage] ||
            !cfg.mhsa_on[a.stage][static_cast<size_t>(a.block)])
          throw ConfigError("action not applicable: " + a.str());
        out.mhsa_on[a.stage][static_cast<size_t>(a.block)] = false;
      } else {
        if (cfg.depths[a.stage] <= 1 || a.block != cfg.depths[a.stage] - 1)
          throw ConfigError("action not applicable: " + a.str());
        out.depths[a.stage] -= 1;
        out.expansions[a.stage].pop_back();
        if (space.attention_stage(a.stage)) out.mhsa_on[a.stage].pop_back();
      }
      break;
    }
    case Action::Kind::ShrinkWidth: {
      const auto& ws = space.width_choices[a.stage];
      auto it = std::find(ws.begin(), ws.end(), cfg.widths[a.stage]);
      if (it == ws.begin()) throw ConfigError("action not applicable: " + a.str());
      out.widths[a.stage] = *(it - 1);
      if (out.widths[a.stage] != a.to_value && a.to_value != 0)
        throw ConfigError("action target mismatch: " + a.str());
      break;
    }
    case Action::Kind::ShrinkExpansion: {
      const auto& es = space.expansion_choices;
      auto it = std::find(es.begin(), es.end(), cfg.expansions[a.stage][static_cast<size_t>(a.block)]);
      if (a.block >= cfg.depths[a.stage] || it == es.begin())
        throw ConfigError("action not applicable: " + a.str());
      out.expansions[a.stage][static_cast<size_t>(a.block)] = *(it - 1);
      if (out.expansions[a.stage][static_cast<size_t>(a.block)] != a.to_value && a.to_value != 0)
        throw ConfigError("action target mismatch: " + a.str());
      break;
    }
  }
  validate_config(space, out);
  return out;
}

// All applicable single-step slimmings, in the fixed order that also breaks
// ties: trailing-block removals, attention sub-block removals, width steps,
// expansion steps.
inline std::vector<Action> enumerate_actions(const SearchSpace& space, const SubnetConfig& cfg) {
  validate_config(space, cfg);
  std::vector<Action> out;
  for (int j = 0; j < kStages; ++j)
    if (cfg.depths[j] > 1)
      out.push_back({Action::Kind::SlimBlock, j, cfg.depths[j] - 1, false, 0});
  for (int j = 0; j < kStages; ++j)
    if (space.attention_stage(j))
      for (int64_t i = 0; i < cfg.depths[j]; ++i)
        if (cfg.mhsa_on[j][static_cast<size_t>(i)])
          out.push_back({Action::Kind::SlimBlock, j, i, true, 0});
  for (int j = 0; j < kStages; ++j) {
    const auto& ws = space.width_choices[j];
    auto it = std::find(ws.begin(), ws.end(), cfg.widths[j]);
    if (it != ws.begin()) out.push_back({Action::Kind::ShrinkWidth, j, -1, false, *(it - 1)});
  }
  for (int j = 0; j < kStages; ++j) {
    const auto& es = space.expansion_choices;
    for (int64_t i = 0; i < cfg.depths[j]; ++i) {
      auto it = std::find(es.begin(), es.end(), cfg.expansions[j][static_cast<size_t>(i)]);
      if (it != es.begin()) out.push_back({Action::Kind::ShrinkExpansion, j, i, false, *(it - 1)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// objectives and accuracy

struct SearchObjective {
  enum class Mode { target_mes, target_params, target_latency };
  Mode mode = Mode::target_mes;
  double value = 0;

  bool satisfied(int64_t params, double latency_ms, double mes) const {
    switch (mode) {
      case Mode::target_mes: return mes >= value;
      case Mode::target_params: return static_cast<double>(params) <= value;
      case Mode::target_latency: return latency_ms <= value;
    }
    return false;
  }

  std::string str() const {
    switch (mode) {
      case Mode::target_mes: return "mes>=" + format_value();
      case Mode::target_params: return "params<=" + format_value();
      case Mode::target_latency: return "latency<=" + format_value();
    }
    return "?";
  }

  // accepts mes>=V | params<=V | latency<=V (utf-8 comparison glyphs too)
  static SearchObjective parse(const std::string& raw) {
    std::string s = raw;
    for (const auto& [from, to] : {std::pair<std::string, std::string>{"≥", ">="}, {"≤", "<="}}) {
      for (size_t p = s.find(from); p != std::string::npos; p = s.find(from)) s.replace(p, from.size(), to);
    }
    SearchObjective o;
    auto take = [&](const std::string& prefix, Mode m) {
      if (s.rfind(prefix, 0) != 0) return false;
      o.mode = m;
      try {
        o.value = std::stod(s.substr(prefix.size()));
      } catch (const std::exception&) {
        throw ConfigError("objective: bad value in '" + s + "'");
      }
      return true;
    };
    if (!take("mes>=", Mode::target_mes) && !take("params<=", Mode::target_params) &&
        !take("latency<=", Mode::target_latency))
      throw ConfigError("objective: expected mes>=V, params<=V or latency<=V, got '" + s + "'");
    if (o.value <= 0) throw ConfigError("objective: value must be positive");
    return o;
  }

 private:
  std::string format_value() const {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
  }
};

// top-1 fraction in [0,1]
using AccuracyFn = std::function<double(const SubnetConfig&)>;

// Deterministic eval-mode top-1 over a fixed-order partition.
template <typename T>
inline double evaluate_accuracy(const Supernet<T>& net, const SubnetConfig& cfg, const Tensor<T>& images,
                                const std::vector<int64_t>& labels, int64_t batch_size = 64) {
  const int64_t n = images.dim(0);
  if (n == 0 || labels.size() != static_cast<size_t>(n)) throw ConfigError("evaluate_accuracy: empty or inconsistent partition");
  NoGradGuard<T> ng;
  int64_t correct = 0;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t len = std::min(batch_size, n - start);
    auto logits = net.forward(cfg, slice(images, 0, start, len), NormMode::eval);
    const int64_t k = logits.dim(1);
    for (int64_t b = 0; b < len; ++b) {
      int64_t best = 0;
      for (int64_t c = 1; c < k; ++c)
        if (logits.at({b, c}) > logits.at({b, best})) best = c;
      if (best == labels[static_cast<size_t>(start + b)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

// Memoizes an accuracy function by canonical config key.
class CachedAccuracy {
 public:
  explicit CachedAccuracy(AccuracyFn fn) : fn_(std::move(fn)) {}

  double operator()(const SubnetConfig& cfg) {
    const std::string key = cfg.key();
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    const double v = fn_(cfg);
    cache_.emplace(key, v);
    return v;
  }

  size_t size() const { return cache_.size(); }

 private:
  AccuracyFn fn_;
  std::map<std::string, double> cache_;
};

// ---------------------------------------------------------------------------
// scoring and the greedy loop

struct ScoredAction {
  Action action;
  double dacc_points = 0;  // accuracy drop in percentage points (positive = worse)
  double dmes = 0;         // score gain (positive for slimming)
  double ratio = 0;
  double acc_after = 0;    // fraction
  int64_t params_after = 0;
  double latency_after = 0;
  double mes_after = 0;
};

struct StepRecord {
  int step = 0;
  Action action;
  double dacc_points = 0;
  double dmes = 0;
  double ratio = 0;
  int64_t params = 0;
  double latency_ms = 0;
  double mes = 0;
  double accuracy = 0;  // fraction, after the step
};

struct SearchResult {
  SubnetConfig final_config;
  double final_accuracy = 0;  // fraction
  int64_t final_params = 0;
  double final_latency_ms = 0;
  double final_mes = 0;
  double initial_accuracy = 0;
  int64_t initial_params = 0;
  double initial_latency_ms = 0;
  double initial_mes = 0;
  std::vector<StepRecord> history;
  std::vector<std::string> anomalies;  // discarded actions (non-positive score gain)
};

struct UnreachableObjective : Error {
  SubnetConfig best_config;
  SearchResult partial;
  UnreachableObjective(const std::string& msg, SubnetConfig best, SearchResult res)
      : Error(msg), best_config(std::move(best)), partial(std::move(res)) {}
};

struct SearchContext {
  const SearchSpace& space;
  const LatencyTable& table;
  const MESConfig& mes_cfg;
  int64_t num_classes = 10;
};

inline ScoredAction score_action(const SearchContext& ctx, const SubnetConfig& current, double current_acc,
                                 double current_mes, const Action& action, CachedAccuracy& acc) {
  ScoredAction s;
  s.action = action;
  auto after = apply_action(ctx.space, current, action);
  s.acc_after = acc(after);
  s.dacc_points = (current_acc - s.acc_after) * 100.0;
  s.params_after = count_params(ctx.space, after, ctx.num_classes);
  s.latency_after = predict_latency(ctx.table, ctx.space, after, ctx.num_classes);
  s.mes_after = compute_mes(ctx.mes_cfg, {{"size", static_cast<double>(s.params_after)},
                                          {"latency", s.latency_after}});
  s.dmes = s.mes_after - current_mes;
  s.ratio = s.dmes > 0 ? s.dacc_points / s.dmes : 0;
  return s;
}

// Slims greedily from the max config until the objective is satisfied.
// Throws UnreachableObjective (carrying the best state reached) when the
// floors are hit first.
inline SearchResult run_search(const SearchContext& ctx, AccuracyFn accuracy_fn,
                               const SearchObjective& objective) {
  CachedAccuracy acc(std::move(accuracy_fn));
  SearchResult res;
  SubnetConfig current = max_config(ctx.space);
  double cur_acc = acc(current);
  int64_t cur_params = count_params(ctx.space, current, ctx.num_classes);
  double cur_lat = predict_latency(ctx.table, ctx.space, current, ctx.num_classes);
  double cur_mes = compute_mes(ctx.mes_cfg, {{"size", static_cast<double>(cur_params)}, {"latency", cur_lat}});
  res.initial_accuracy = cur_acc;
  res.initial_params = cur_params;
  res.initial_latency_ms = cur_lat;
  res.initial_mes = cur_mes;

  int step = 0;
  for (;;) {
    if (objective.satisfied(cur_params, cur_lat, cur_mes)) break;
    auto actions = enumerate_actions(ctx.space, current);
    std::vector<ScoredAction> scored;
    for (const auto& a : actions) {
      auto s = score_action(ctx, current, cur_acc, cur_mes, a, acc);
      if (s.dmes <= 0) {
        res.anomalies.push_back("discarded " + a.str() + ": non-positive score gain " +
                                std::to_string(s.dmes));
        continue;
      }
      scored.push_back(std::move(s));
    }
    if (scored.empty()) {
      res.final_config = current;
      res.final_accuracy = cur_acc;
      res.final_params = cur_params;
      res.final_latency_ms = cur_lat;
      res.final_mes = cur_mes;
      throw UnreachableObjective("objective " + objective.str() + " unreachable: no applicable action left",
                                 current, res);
    }
    // argmin ratio; improvements (negative ratio) sort first, ties prefer
    // the larger score gain, then enumeration order
    size_t best = 0;
    for (size_t i = 1; i < scored.size(); ++i) {
      if (scored[i].ratio < scored[best].ratio ||
          (scored[i].ratio == scored[best].ratio && scored[i].dmes > scored[best].dmes))
        best = i;
    }
    const auto& s = scored[best];
    current = apply_action(ctx.space, current, s.action);
    cur_acc = s.acc_after;
    cur_params = s.params_after;
    cur_lat = s.latency_after;
    cur_mes = s.mes_after;
    ++step;
    res.history.push_back(
        {step, s.action, s.dacc_points, s.dmes, s.ratio, cur_params, cur_lat, cur_mes, cur_acc});
  }
  res.final_config = current;
  res.final_accuracy = cur_acc;
  res.final_params = cur_params;
  res.final_latency_ms = cur_lat;
  res.final_mes = cur_mes;
  return res;
}

// ---------------------------------------------------------------------------
// baselines

// Every valid config in the space, depth-first over stages. Guarded by a
// hard cap on the enumeration size.
inline void enumerate_all_configs(const SearchSpace& space, int64_t limit,
                                  const std::function<void(const SubnetConfig&)>& visit) {
  space.validate();
  SubnetConfig cfg;
  cfg.depths.assign(kStages, 1);
  cfg.widths.assign(kStages, 0);
  cfg.expansions.resize(kStages);
  cfg.mhsa_on.resize(kStages);
  int64_t count = 0;

  std::function<void(int)> per_stage = [&](int j) {
    if (j == kStages) {
      if (++count > limit) throw ConfigError("config enumeration exceeds limit of " + std::to_string(limit));
      visit(cfg);
      return;
    }
    for (int64_t depth = 1; depth <= space.max_depths[j]; ++depth) {
      cfg.depths[j] = depth;
      for (int64_t width : space.width_choices[j]) {
        cfg.widths[j] = width;
        // per-block expansion and attention-flag products
        std::function<void(int64_t)> per_block = [&](int64_t i) {
          if (i == depth) {
            per_stage(j + 1);
            return;
          }
          for (int64_t e : space.expansion_choices) {
            cfg.expansions[j].push_back(e);
            if (space.attention_stage(j)) {
              for (bool f : {false, true}) {
                cfg.mhsa_on[j].push_back(f);
                per_block(i + 1);
                cfg.mhsa_on[j].pop_back();
              }
            } else {
              per_block(i + 1);
            }
            cfg.expansions[j].pop_back();
          }
        };
        per_block(0);
      }
    }
    cfg.depths[j] = 1;
  };
  per_stage(0);
}

struct ParetoPoint {
  SubnetConfig config;
  double accuracy = 0;
  double mes = 0;
};

// Exhaustive non-dominated set under (accuracy up, mes up).
inline std::vector<ParetoPoint> brute_force_pareto(const SearchContext& ctx, const AccuracyFn& accuracy_fn,
                                                   int64_t limit = 100000) {
  std::vector<ParetoPoint> all;
  enumerate_all_configs(ctx.space, limit, [&](const SubnetConfig& cfg) {
    ParetoPoint p;
    p.config = cfg;
    p.accuracy = accuracy_fn(cfg);
    p.mes = mes_of_config(ctx.mes_cfg, ctx.table, ctx.space, cfg, ctx.num_classes);
    all.push_back(std::move(p));
  });
  std::vector<ParetoPoint> front;
  for (const auto& p : all) {
    bool dominated = false;
    for (const auto& q : all)
      if ((q.accuracy > p.accuracy && q.mes >= p.mes) || (q.accuracy >= p.accuracy && q.mes > p.mes)) {
        dominated = true;
        break;
      }
    if (!dominated) front.push_back(p);
  }
  return front;
}

// Uniform rejection sampling of configs meeting the objective; returns the
// accuracy-best accepted sample.
inline SubnetConfig random_search(const SearchContext& ctx, const AccuracyFn& accuracy_fn, int64_t budget,
                                  const SearchObjective& objective, uint64_t seed) {
  if (budget < 1) throw ConfigError("random_search: budget must be >= 1");
  Rng rng(seed);
  SubnetConfig best;
  double best_acc = -1;
  int64_t accepted = 0;
  for (int64_t draw = 0; draw < 100 * budget && accepted < budget; ++draw) {
    auto cfg = random_config(ctx.space, rng);
    const int64_t params = count_params(ctx.space, cfg, ctx.num_classes);
    const double lat = predict_latency(ctx.table, ctx.space, cfg, ctx.num_classes);
    const double mes =
        compute_mes(ctx.mes_cfg, {{"size", static_cast<double>(params)}, {"latency", lat}});
    if (!objective.satisfied(params, lat, mes)) continue;
    ++accepted;
    const double acc = accuracy_fn(cfg);
    if (acc > best_acc) {
      best_acc = acc;
      best = cfg;
    }
  }
  if (accepted == 0) {
    SearchResult empty;
    throw UnreachableObjective("random_search: no sample met " + objective.str() + " within " +
                                   std::to_string(100 * budget) + " draws",
                               SubnetConfig{}, empty);
  }
  return best;
}

// ---------------------------------------------------------------------------
// search report file

struct ReportHeader {
  std::string objective;
  double alpha_size = 0.5;
  double alpha_latency = 1.0;
  double base_score = 100.0;
  double unit_size = 3e6;
  double unit_latency = 1.0;
  int64_t num_classes = 10;
  uint64_t seed = 0;
  int64_t val_size = 0;
};

namespace detail_report {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail_report

// Step log plus the final configuration as a loadable [space]/[subnet] block.
// The generated-at line is the only line that varies between identical runs.
inline void write_search_report(const std::string& path, const SearchSpace& space, const SearchResult& res,
                                const ReportHeader& hdr, const std::string& timestamp) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write search report: " + path);
  using detail_report::fmt;
  out << "# slimnas search report\n";
  out << "# generated: " << timestamp << "\n";
  out << "# objective=" << hdr.objective << " alpha_size=" << fmt(hdr.alpha_size)
      << " alpha_latency=" << fmt(hdr.alpha_latency) << " base_score=" << fmt(hdr.base_score)
      << " unit_size=" << fmt(hdr.unit_size) << " unit_latency=" << fmt(hdr.unit_latency)
      << " num_classes=" << hdr.num_classes << " seed=" << hdr.seed << " val_size=" << hdr.val_size << "\n";
  out << "# initial: accuracy=" << fmt(res.initial_accuracy) << " params=" << res.initial_params
      << " latency_ms=" << fmt(res.initial_latency_ms) << " mes=" << fmt(res.initial_mes) << "\n";
  for (const auto& a : res.anomalies) out << "# anomaly: " << a << "\n";
  out << "step,action,dacc,dmes,ratio,params,predicted_latency_ms,mes\n";
  for (const auto& r : res.history)
    out << r.step << "," << r.action.str() << "," << fmt(r.dacc_points) << "," << fmt(r.dmes) << ","
        << fmt(r.ratio) << "," << r.params << "," << fmt(r.latency_ms) << "," << fmt(r.mes) << "\n";
  out << "# final: accuracy=" << fmt(res.final_accuracy) << " params=" << res.final_params
      << " latency_ms=" << fmt(res.final_latency_ms) << " mes=" << fmt(res.final_mes) << "\n";
  out << "\n";
  KVConfig kv;
  write_space(kv, space);
  write_subnet(kv, res.final_config);
  out << kv.serialize();
}

struct ParsedReport {
  SearchSpace space;
  SubnetConfig final_config;
  SearchResult result;
  ReportHeader header;
};

inline ParsedReport parse_search_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read search report: " + path);
  ParsedReport rep;
  std::string line;
  std::string config_text;
  bool in_config = false;
  auto header_value = [](const std::string& l, const std::string& key) -> std::string {
    const std::string tag = key + "=";
    auto p = l.find(tag);
    if (p == std::string::npos) throw FormatError("report: missing header field " + key);
    p += tag.size();
    auto e = l.find(' ', p);
    return l.substr(p, e == std::string::npos ? std::string::npos : e - p);
  };
  while (std::getline(in, line)) {
    if (in_config) {
      config_text += line + "\n";
      continue;
    }
    if (line.rfind("[space]", 0) == 0) {
      in_config = true;
      config_text += line + "\n";
      continue;
    }
    if (line.rfind("# objective=", 0) == 0) {
      rep.header.objective = header_value(line, "objective");
      rep.header.alpha_size = std::stod(header_value(line, "alpha_size"));
      rep.header.alpha_latency = std::stod(header_value(line, "alpha_latency"));
      rep.header.base_score = std::stod(header_value(line, "base_score"));
      rep.header.unit_size = std::stod(header_value(line, "unit_size"));
      rep.header.unit_latency = std::stod(header_value(line, "unit_latency"));
      rep.header.num_classes = std::stoll(header_value(line, "num_classes"));
      rep.header.seed = std::stoull(header_value(line, "seed"));
      rep.header.val_size = std::stoll(header_value(line, "val_size"));
      continue;
    }
    if (line.rfind("# initial:", 0) == 0) {
      rep.result.initial_accuracy = std::stod(header_value(line, "accuracy"));
      rep.result.initial_params = std::stoll(header_value(line, "params"));
      rep.result.initial_latency_ms = std::stod(header_value(line, "latency_ms"));
      rep.result.initial_mes = std::stod(header_value(line, "mes"));
      continue;
    }
    if (line.rfind("# final:", 0) == 0) {
      rep.result.final_accuracy = std::stod(header_value(line, "accuracy"));
      rep.result.final_params = std::stoll(header_value(line, "params"));
      rep.result.final_latency_ms = std::stod(header_value(line, "latency_ms"));
      rep.result.final_mes = std::stod(header_value(line, "mes"));
      continue;
    }
    if (line.empty() || line[0] == '#' || line.rfind("step,action", 0) == 0) continue;
    // a step record
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw FormatError("report: malformed step record '" + line + "'");
    StepRecord r;
    r.step = std::stoi(f[0]);
    r.action = Action::parse(f[1]);
    r.dacc_points = std::stod(f[2]);
    r.dmes = std::stod(f[3]);
    r.ratio = std::stod(f[4]);
    r.params = std::stoll(f[5]);
    r.latency_ms = std::stod(f[6]);
    r.mes = std::stod(f[7]);
    rep.result.history.push_back(r);
  }
  if (config_text.empty()) throw FormatError("report: missing final config block in " + path);
  auto kv = KVConfig::parse_string(config_text, path);
  rep.space = read_space(kv);
  rep.final_config = read_subnet(kv, rep.space);
  rep.result.final_config = rep.final_config;
  return rep;
}

}  // namespace slimnas
