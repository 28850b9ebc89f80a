// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>

#include "slimnas/search.hpp"

using namespace slimnas;

namespace {

SearchSpace toy_space() {
  SearchSpace s;
  s.input_resolution = 32;
  s.max_depths = {2, 2, 3, 3};
  s.width_choices = {{16, 24}, {32, 48}, {64, 96}, {96, 128}};
  s.expansion_choices = {2, 3, 4};
  return s;
}

// small enough to enumerate exhaustively (384 configs)
SearchSpace fixture_space() {
  SearchSpace s;
  s.input_resolution = 32;
  s.max_depths = {2, 1, 1, 1};
  s.width_choices = {{8}, {16}, {24}, {24, 32}};
  s.expansion_choices = {2, 3};
  return s;
}

struct Fixture {
  SearchSpace space = fixture_space();
  LatencyTable table;
  MESConfig mes_cfg = MESConfig::defaults();
  double p0 = 0;

  Fixture() {
    table = build_latency_table(space, BenchDevice::analytic);
    p0 = static_cast<double>(count_params(space, max_config(space), 10)) / 3.0;
  }

  SearchContext ctx() const { return {space, table, mes_cfg, 10}; }

  // capacity-monotone synthetic accuracy, fraction in [0.3, 0.9)
  AccuracyFn oracle() const {
    const SearchSpace sp = space;
    const double p = p0;
    return [sp, p](const SubnetConfig& cfg) {
      const double params = static_cast<double>(count_params(sp, cfg, 10));
      return 0.3 + 0.6 * (1.0 - std::exp(-params / p));
    };
  }
};

}  // namespace

TEST_CASE("action applicability and enumeration") {
  auto space = toy_space();
  REQUIRE(enumerate_actions(space, min_config(space)).empty());

  // max config of the documented toy space: 4 trailing-block removals,
  // 3+3 attention sub-block removals, 4 width steps, 2+2+3+3 expansion steps
  auto actions = enumerate_actions(space, max_config(space));
  REQUIRE(actions.size() == 4 + 6 + 4 + 10);

  // every action applied to 100 random states yields a valid config
  for (uint64_t seed = 0; seed < 100; ++seed) {
    auto cfg = sample_subnet(space, SampleKind::random, 7000 + seed);
    for (const auto& a : enumerate_actions(space, cfg)) {
      auto next = apply_action(space, cfg, a);
      REQUIRE_NOTHROW(validate_config(space, next));
      REQUIRE(count_params(space, next, 10) < count_params(space, cfg, 10));
    }
  }
}

TEST_CASE("action string round trip") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto space = toy_space();
    auto cfg = sample_subnet(space, SampleKind::random, 7700 + seed);
    for (const auto& a : enumerate_actions(space, cfg)) {
      auto parsed = Action::parse(a.str());
      REQUIRE(parsed.str() == a.str());
      REQUIRE(apply_action(space, cfg, parsed).key() == apply_action(space, cfg, a).key());
    }
  }
}

TEST_CASE("score action sign conventions") {
  Fixture fx;
  auto ctx = fx.ctx();
  auto cur = max_config(fx.space);
  const double cur_mes = mes_of_config(fx.mes_cfg, fx.table, fx.space, cur, 10);
  auto actions = enumerate_actions(fx.space, cur);

  // constant accuracy: every ratio is exactly zero
  CachedAccuracy flat([](const SubnetConfig&) { return 0.5; });
  for (const auto& a : actions) {
    auto s = score_action(ctx, cur, 0.5, cur_mes, a, flat);
    REQUIRE(s.dmes > 0);
    REQUIRE(s.ratio == 0.0);
  }

  // an accuracy-improving slimming scores negative, below any drop
  CachedAccuracy improving([&](const SubnetConfig& cfg) { return cfg == cur ? 0.5 : 0.6; });
  auto s_neg = score_action(ctx, cur, 0.5, cur_mes, actions[0], improving);
  REQUIRE(s_neg.dacc_points < 0);
  REQUIRE(s_neg.ratio < 0);
  CachedAccuracy dropping([&](const SubnetConfig& cfg) { return cfg == cur ? 0.5 : 0.4; });
  auto s_pos = score_action(ctx, cur, 0.5, cur_mes, actions[0], dropping);
  REQUIRE(s_neg.ratio < s_pos.ratio);
}

TEST_CASE("hand built two action argmin") {
  Fixture fx;
  auto ctx = fx.ctx();
  // craft an oracle that makes exactly one action clearly cheapest in
  // accuracy per score gain, then check one greedy step picks it
  auto cur = max_config(fx.space);
  auto actions = enumerate_actions(fx.space, cur);
  REQUIRE(actions.size() >= 2);
  const std::string cheap_key = apply_action(fx.space, cur, actions[1]).key();
  AccuracyFn oracle = [&, cheap_key](const SubnetConfig& cfg) {
    if (cfg == cur) return 0.9;
    return cfg.key() == cheap_key ? 0.899 : 0.5;  // others lose 40 points
  };
  // pick an objective one step cannot reach, so the search applies >= 1 action
  SearchObjective obj = SearchObjective::parse("params<=1");
  try {
    (void)run_search(ctx, oracle, obj);
    FAIL("expected UnreachableObjective");
  } catch (const UnreachableObjective& e) {
    REQUIRE_FALSE(e.partial.history.empty());
    REQUIRE(e.partial.history[0].action.str() == actions[1].str());
  }
}

TEST_CASE("objective parsing") {
  auto o1 = SearchObjective::parse("mes>=102.5");
  REQUIRE(o1.mode == SearchObjective::Mode::target_mes);
  REQUIRE(o1.value == 102.5);
  auto o2 = SearchObjective::parse("params<=3000000");
  REQUIRE(o2.satisfied(2999999, 100.0, 0.0));
  REQUIRE_FALSE(o2.satisfied(3000001, 0.0, 0.0));
  auto o3 = SearchObjective::parse("latency<=1.5");
  REQUIRE(o3.satisfied(1, 1.5, 0.0));
  REQUIRE_THROWS_AS(SearchObjective::parse("acc>=1"), ConfigError);
  REQUIRE_THROWS_AS(SearchObjective::parse("mes>=-3"), ConfigError);
}

TEST_CASE("search stops immediately when the objective already holds") {
  Fixture fx;
  auto res = run_search(fx.ctx(), fx.oracle(), SearchObjective::parse("mes>=0.0001"));
  REQUIRE(res.history.empty());
  REQUIRE(res.final_config == max_config(fx.space));
}

TEST_CASE("greedy trajectory is monotone and replayable") {
  Fixture fx;
  const double mes_max = mes_of_config(fx.mes_cfg, fx.table, fx.space, max_config(fx.space), 10);
  const double mes_min = mes_of_config(fx.mes_cfg, fx.table, fx.space, min_config(fx.space), 10);
  const double target = std::sqrt(mes_max * mes_min);
  auto res = run_search(fx.ctx(), fx.oracle(), SearchObjective::parse("mes>=" + std::to_string(target)));
  REQUIRE_FALSE(res.history.empty());

  double prev_mes = res.initial_mes;
  int64_t prev_params = res.initial_params;
  double prev_lat = res.initial_latency_ms;
  for (const auto& r : res.history) {
    REQUIRE(r.mes > prev_mes);
    REQUIRE(r.params <= prev_params);
    REQUIRE(r.latency_ms <= prev_lat);
    prev_mes = r.mes;
    prev_params = r.params;
    prev_lat = r.latency_ms;
  }
  REQUIRE(res.final_mes >= target);

  // replay the recorded actions from the max config
  auto replayed = max_config(fx.space);
  for (const auto& r : res.history) replayed = apply_action(fx.space, replayed, r.action);
  REQUIRE(replayed == res.final_config);
}

TEST_CASE("each greedy step attains the minimum ratio") {
  Fixture fx;
  auto ctx = fx.ctx();
  const double mes_max = mes_of_config(fx.mes_cfg, fx.table, fx.space, max_config(fx.space), 10);
  const double mes_min = mes_of_config(fx.mes_cfg, fx.table, fx.space, min_config(fx.space), 10);
  const double target = std::sqrt(mes_max * mes_min);
  auto res = run_search(ctx, fx.oracle(), SearchObjective::parse("mes>=" + std::to_string(target)));

  CachedAccuracy acc(fx.oracle());
  auto cur = max_config(fx.space);
  double cur_acc = acc(cur);
  double cur_mes = res.initial_mes;
  for (const auto& r : res.history) {
    double best_ratio = 1e300;
    for (const auto& a : enumerate_actions(fx.space, cur)) {
      auto s = score_action(ctx, cur, cur_acc, cur_mes, a, acc);
      if (s.dmes > 0) best_ratio = std::min(best_ratio, s.ratio);
    }
    REQUIRE(r.ratio == Catch::Approx(best_ratio).margin(1e-12));
    cur = apply_action(fx.space, cur, r.action);
    cur_acc = acc(cur);
    cur_mes = r.mes;
  }
}

TEST_CASE("constant oracle maximizes score gain at each step") {
  Fixture fx;
  auto ctx = fx.ctx();
  AccuracyFn flat = [](const SubnetConfig&) { return 0.5; };
  const double mes_max = mes_of_config(fx.mes_cfg, fx.table, fx.space, max_config(fx.space), 10);
  auto res = run_search(ctx, flat, SearchObjective::parse("mes>=" + std::to_string(mes_max * 1.5)));

  CachedAccuracy acc(flat);
  auto cur = max_config(fx.space);
  double cur_mes = res.initial_mes;
  for (const auto& r : res.history) {
    double best_gain = 0;
    for (const auto& a : enumerate_actions(fx.space, cur)) {
      auto s = score_action(ctx, cur, 0.5, cur_mes, a, acc);
      best_gain = std::max(best_gain, s.dmes);
    }
    REQUIRE(r.dmes == Catch::Approx(best_gain).margin(1e-12));
    cur = apply_action(fx.space, cur, r.action);
    cur_mes = r.mes;
  }
}

TEST_CASE("unreachable objective carries the best state") {
  Fixture fx;
  try {
    (void)run_search(fx.ctx(), fx.oracle(), SearchObjective::parse("mes>=1e12"));
    FAIL("expected UnreachableObjective");
  } catch (const UnreachableObjective& e) {
    REQUIRE(e.best_config == min_config(fx.space));
    REQUIRE_FALSE(e.partial.history.empty());
  }
}

TEST_CASE("exhaustive enumeration count and pareto on a hand checkable space") {
  // one stage dimension degenerate: 1-block stages with fixed widths except
  // stage 4 and a binary expansion -> 8 hand-countable configs
  SearchSpace s;
  s.input_resolution = 32;
  s.max_depths = {1, 1, 1, 1};
  s.width_choices = {{8}, {16}, {24}, {24, 32}};
  s.expansion_choices = {2};
  // configs: stage4 widths (2) x stage3 mhsa (2) x stage4 mhsa (2) = 8
  int64_t n = 0;
  enumerate_all_configs(s, 1000, [&](const SubnetConfig&) { ++n; });
  REQUIRE(n == 8);

  auto table = build_latency_table(s, BenchDevice::analytic);
  MESConfig mes_cfg = MESConfig::defaults();
  SearchContext ctx{s, table, mes_cfg, 10};
  // accuracy keyed on capacity: every extra feature helps
  AccuracyFn oracle = [&](const SubnetConfig& cfg) {
    return 0.5 + 0.001 * static_cast<double>(count_params(s, cfg, 10)) / 1000.0;
  };
  auto front = brute_force_pareto(ctx, oracle, 1000);

  // hand enumeration: list all eight points, mark the non-dominated ones
  struct Point {
    std::string key;
    double acc, mes;
  };
  std::vector<Point> all;
  enumerate_all_configs(s, 1000, [&](const SubnetConfig& cfg) {
    all.push_back({cfg.key(), oracle(cfg), mes_of_config(mes_cfg, table, s, cfg, 10)});
  });
  std::set<std::string> expected;
  for (const auto& p : all) {
    bool dominated = false;
    for (const auto& q : all)
      if ((q.acc > p.acc && q.mes >= p.mes) || (q.acc >= p.acc && q.mes > p.mes)) dominated = true;
    if (!dominated) expected.insert(p.key);
  }
  REQUIRE_FALSE(expected.empty());
  std::set<std::string> got;
  for (const auto& p : front) got.insert(p.config.key());
  REQUIRE(got == expected);

  // every returned point is non-dominated against the full enumeration
  for (const auto& p : front)
    for (const auto& q : all) {
      const bool dominates = (q.acc > p.accuracy && q.mes >= p.mes) || (q.acc >= p.accuracy && q.mes > p.mes);
      REQUIRE_FALSE(dominates);
    }
}

TEST_CASE("enumeration cap is enforced") {
  auto space = toy_space();
  REQUIRE_THROWS_AS(enumerate_all_configs(space, 10, [](const SubnetConfig&) {}), ConfigError);
}

TEST_CASE("greedy final accuracy is within one point of the brute force best") {
  Fixture fx;
  auto ctx = fx.ctx();
  auto oracle = fx.oracle();
  const double mes_max = mes_of_config(fx.mes_cfg, fx.table, fx.space, max_config(fx.space), 10);
  const double mes_min = mes_of_config(fx.mes_cfg, fx.table, fx.space, min_config(fx.space), 10);
  const double target = std::sqrt(mes_max * mes_min);
  SearchObjective obj = SearchObjective::parse("mes>=" + std::to_string(target));

  auto res = run_search(ctx, oracle, obj);

  double best_acc = -1;
  int64_t n = 0;
  enumerate_all_configs(fx.space, 500, [&](const SubnetConfig& cfg) {
    ++n;
    const int64_t params = count_params(fx.space, cfg, 10);
    const double lat = predict_latency(fx.table, fx.space, cfg, 10);
    const double mes = compute_mes(fx.mes_cfg, {{"size", static_cast<double>(params)}, {"latency", lat}});
    if (obj.satisfied(params, lat, mes)) best_acc = std::max(best_acc, oracle(cfg));
  });
  REQUIRE(n <= 500);
  REQUIRE(best_acc > 0);
  REQUIRE(res.final_accuracy * 100.0 >= best_acc * 100.0 - 1.0);
}

TEST_CASE("greedy beats random search on at least eight of ten seeds") {
  Fixture fx;
  auto ctx = fx.ctx();
  auto oracle = fx.oracle();
  const double mes_max = mes_of_config(fx.mes_cfg, fx.table, fx.space, max_config(fx.space), 10);
  const double mes_min = mes_of_config(fx.mes_cfg, fx.table, fx.space, min_config(fx.space), 10);
  SearchObjective obj =
      SearchObjective::parse("mes>=" + std::to_string(std::sqrt(mes_max * mes_min)));
  auto res = run_search(ctx, oracle, obj);

  int wins = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    auto cfg = random_search(ctx, oracle, 10, obj, 9000 + seed);
    if (res.final_accuracy >= oracle(cfg)) ++wins;
  }
  REQUIRE(wins >= 8);
}

TEST_CASE("random search basics") {
  Fixture fx;
  auto ctx = fx.ctx();
  auto oracle = fx.oracle();
  SearchObjective loose = SearchObjective::parse("mes>=0.0001");
  auto a = random_search(ctx, oracle, 1, loose, 42);
  auto b = random_search(ctx, oracle, 1, loose, 42);
  REQUIRE(a == b);  // reproducible
  REQUIRE_THROWS_AS(random_search(ctx, oracle, 5, SearchObjective::parse("mes>=1e12"), 1),
                    UnreachableObjective);
  REQUIRE_THROWS_AS(random_search(ctx, oracle, 0, loose, 1), ConfigError);
}

TEST_CASE("accuracy cache avoids re-evaluating configs") {
  Fixture fx;
  int calls = 0;
  CachedAccuracy acc([&](const SubnetConfig&) {
    ++calls;
    return 0.5;
  });
  auto cfg = max_config(fx.space);
  (void)acc(cfg);
  (void)acc(cfg);
  REQUIRE(calls == 1);
}

TEST_CASE("evaluate accuracy determinism and chance level") {
  SearchSpace s;
  s.input_resolution = 32;
  s.max_depths = {1, 1, 1, 1};
  s.width_choices = {{8}, {16}, {16, 24}, {24}};
  s.expansion_choices = {2};
  Supernet<float> net(s, 33, 10);

  // balanced 500-sample partition, labels independent of the images
  const int64_t n = 500;
  Rng rng(2);
  auto images = Tensor<float>::randn({n, 3, 32, 32}, rng);
  std::vector<int64_t> labels;
  for (int64_t i = 0; i < n; ++i) labels.push_back(i % 10);

  auto cfg = max_config(s);
  const double a1 = evaluate_accuracy(net, cfg, images, labels);
  const double a2 = evaluate_accuracy(net, cfg, images, labels);
  REQUIRE(a1 == a2);

  // untrained net on a balanced partition: inside the 99% binomial band of 1/10
  const double margin = 2.576 * std::sqrt(0.1 * 0.9 / static_cast<double>(n));
  REQUIRE(a1 >= 0.1 - margin);
  REQUIRE(a1 <= 0.1 + margin);

  REQUIRE_THROWS_AS(evaluate_accuracy(net, cfg, images, std::vector<int64_t>{}), ConfigError);
}

TEST_CASE("search report round trip") {
  Fixture fx;
  const double mes_max = mes_of_config(fx.mes_cfg, fx.table, fx.space, max_config(fx.space), 10);
  const double mes_min = mes_of_config(fx.mes_cfg, fx.table, fx.space, min_config(fx.space), 10);
  SearchObjective obj =
      SearchObjective::parse("mes>=" + std::to_string(std::sqrt(mes_max * mes_min)));
  auto res = run_search(fx.ctx(), fx.oracle(), obj);

  ReportHeader hdr;
  hdr.objective = obj.str();
  hdr.seed = 7;
  hdr.val_size = 0;
  const auto path = std::filesystem::temp_directory_path() / "slimnas_test_report.txt";
  write_search_report(path.string(), fx.space, res, hdr, "test-run");

  auto rep = parse_search_report(path.string());
  REQUIRE(rep.final_config == res.final_config);
  REQUIRE(rep.result.history.size() == res.history.size());
  for (size_t i = 0; i < res.history.size(); ++i) {
    REQUIRE(rep.result.history[i].action.str() == res.history[i].action.str());
    REQUIRE(rep.result.history[i].mes == res.history[i].mes);
    REQUIRE(rep.result.history[i].params == res.history[i].params);
  }
  REQUIRE(rep.header.seed == 7);
  REQUIRE(rep.result.initial_params == res.initial_params);

  // the parsed history replays to the same final config
  auto replayed = max_config(rep.space);
  for (const auto& r : rep.result.history) replayed = apply_action(rep.space, replayed, r.action);
  REQUIRE(replayed == rep.final_config);
  std::filesystem::remove(path);
}
