// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "slimnas/mes.hpp"

using namespace slimnas;

namespace {

SearchSpace tiny_space() {
  SearchSpace s;
  s.input_resolution = 32;
  s.max_depths = {1, 1, 2, 2};
  s.width_choices = {{8, 16}, {16, 24}, {24, 32}, {32, 48}};
  s.expansion_choices = {2, 3};
  return s;
}

SearchSpace toy_space() {
  SearchSpace s;
  s.input_resolution = 32;
  s.max_depths = {2, 2, 3, 3};
  s.width_choices = {{16, 24}, {32, 48}, {64, 96}, {96, 128}};
  s.expansion_choices = {2, 3, 4};
  return s;
}

double mes_size_latency(double params, double latency_ms) {
  return compute_mes(MESConfig::defaults(), {{"size", params}, {"latency", latency_ms}});
}

double round1(double x) { return std::round(x * 10.0) / 10.0; }

}  // namespace

TEST_CASE("mes reference values") {
  // published (params, latency) -> score points, one-decimal rounding +-0.05
  struct Row {
    double params_m, latency_ms, expected;
  };
  const Row rows[] = {
      {3.5, 0.9, 102.9},   // MobileNetV2 x1.0 reference point
      {3.5, 0.9, 102.9},   // S0 shares the row values
      {6.1, 1.1, 63.8},    {12.6, 1.6, 30.5}, {26.1, 2.7, 12.6},
      {12.3, 1.4, 35.3},   {2.3, 7.3, 15.6},  {6.7, 3.6, 18.6},
      {14.0, 6.6, 7.0},
  };
  for (const auto& r : rows) {
    const double got = mes_size_latency(r.params_m * 1e6, r.latency_ms);
    REQUIRE(std::abs(round1(got) - r.expected) <= 0.05);
  }
  // the unit point is exact
  REQUIRE(mes_size_latency(3e6, 1.0) == Catch::Approx(100.0).epsilon(1e-12));
}

TEST_CASE("mes is monotone and halves when latency doubles") {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const double p = rng.uniform(1e5, 5e7);
    const double l = rng.uniform(0.1, 20.0);
    const double base = mes_size_latency(p, l);
    REQUIRE(mes_size_latency(p * rng.uniform(1.01, 3.0), l) < base);
    REQUIRE(mes_size_latency(p, l * rng.uniform(1.01, 3.0)) < base);
    REQUIRE(std::abs(mes_size_latency(p, 2 * l) - base / 2) <= 1e-12 * base);
  }
}

TEST_CASE("mes validation errors") {
  auto cfg = MESConfig::defaults();
  REQUIRE_THROWS_AS(compute_mes(cfg, {{"size", 3e6}}), ConfigError);               // missing latency
  REQUIRE_THROWS_AS(compute_mes(cfg, {{"size", -1.0}, {"latency", 1.0}}), ConfigError);
  auto bad = MESConfig::defaults();
  bad.metrics[0].alpha = 1.5;
  REQUIRE_THROWS_AS(compute_mes(bad, {{"size", 3e6}, {"latency", 1.0}}), ConfigError);
  auto dup = MESConfig::defaults();
  dup.metrics.push_back({"size", 1.0, 0.5});
  REQUIRE_THROWS_AS(compute_mes(dup, {{"size", 3e6}, {"latency", 1.0}}), ConfigError);
}

TEST_CASE("conv parameter arithmetic") {
  REQUIRE(conv_param_count(16, 32, 1, 1, true, true) == 16 * 32 + 32 + 2 * 32);
  REQUIRE(conv_macs(16, 16, 3, 1, 8) == 147456);
}

TEST_CASE("count_params equals extracted weight enumeration") {
  auto space = tiny_space();
  Supernet<float> net(space, 17, 10);
  for (uint64_t seed = 0; seed < 10; ++seed) {
    auto cfg = sample_subnet(space, SampleKind::random, 3000 + seed);
    auto model = extract_subnet(net, cfg);
    REQUIRE(count_params(space, cfg, 10) == model.registry().total_param_count());
  }
  // the documented toy space as well
  auto toy = toy_space();
  Supernet<float> net2(toy, 17, 10);
  auto mx = max_config(toy);
  auto model2 = extract_subnet(net2, mx);
  REQUIRE(count_params(toy, mx, 10) == model2.registry().total_param_count());
}

TEST_CASE("dual path at the 2-3 boundary counts and executes consistently") {
  auto space = tiny_space();
  space.dual_path_2to3 = true;
  Supernet<float> net(space, 21, 10);
  Rng rng(4);
  auto x = Tensor<float>::randn({2, 3, 32, 32}, rng);
  NoGradGuard<float> ng;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    auto cfg = sample_subnet(space, SampleKind::random, 5200 + seed);
    auto model = extract_subnet(net, cfg);
    REQUIRE(count_params(space, cfg, 10) == model.registry().total_param_count());
    auto a = net.forward(cfg, x, NormMode::eval);
    REQUIRE(a.shape() == Shape{2, 10});
    REQUIRE(a.data() == model.forward(x, NormMode::eval).data());
  }
  // the boundary descriptor switches kind with the flag
  auto blocks = enumerate_blocks(space, max_config(space));
  int dual_count = 0;
  for (const auto& d : blocks)
    if (d.kind == BlockKind::DualPathDown) ++dual_count;
  REQUIRE(dual_count == 2);  // boundaries 2->3 and 3->4
}

TEST_CASE("removing one ffn block shifts params by the block formula") {
  auto space = toy_space();
  auto cfg = max_config(space);
  const int64_t before = count_params(space, cfg, 10);
  // drop the last block of stage 2 (an FFN-only stage)
  cfg.depths[1] -= 1;
  cfg.expansions[1].pop_back();
  const int64_t after = count_params(space, cfg, 10);
  BlockDesc d{BlockKind::FFN, 2, space.stage_resolution(1), space.max_width(1), space.expansion_choices.back()};
  REQUIRE(before - after == block_param_count(space, d, 10));
}

TEST_CASE("stride attention cuts attention matmuls by exactly 16x") {
  auto space = toy_space();
  const int stage = 3;  // 1/16 resolution
  const int64_t res = space.stage_resolution(stage - 1);
  const int64_t c = space.max_width(stage - 1);
  BlockDesc full{BlockKind::MHSA, stage, res, c, 0};
  BlockDesc strided{BlockKind::StrideAttn, stage, res, c, 0};
  auto m_full = block_macs(space, full, 10);
  auto m_strided = block_macs(space, strided, 10);
  REQUIRE(m_full.attention_matmul == 16 * m_strided.attention_matmul);
  REQUIRE(m_strided.total < m_full.total);

  // and at a higher-resolution instantiation of the same stage
  auto big = toy_space();
  big.input_resolution = 128;
  const int64_t res_big = big.stage_resolution(stage - 1);
  auto f2 = block_macs(big, {BlockKind::MHSA, stage, res_big, c, 0}, 10);
  auto s2 = block_macs(big, {BlockKind::StrideAttn, stage, res_big, c, 0}, 10);
  REQUIRE(f2.attention_matmul == 16 * s2.attention_matmul);
  REQUIRE(s2.total < f2.total);
}

TEST_CASE("dual path macs decompose additively") {
  auto space = toy_space();
  const int64_t cin = 96, cout = 128, res = space.stage_resolution(2);
  BlockDesc d{BlockKind::DualPathDown, 3, res, cout, cin};
  auto m = block_macs(space, d, 10);
  const int64_t heads = space.heads(3), hd = heads * space.head_dim;
  const int64_t half = res / 2, n = res * res;
  const int64_t conv_path = conv_macs(cin, cout, 3, 1, half);
  const int64_t attn_path = conv_macs(cin, cin, 3, cin, half) + conv_macs(2 * cin, hd, 1, 1, half) +
                            conv_macs(cin, 2 * hd, 1, 1, res) + 2 * heads * (n / 4) * n * space.head_dim +
                            conv_macs(hd, cout, 1, 1, half);
  REQUIRE(m.total == conv_path + attn_path);
}

TEST_CASE("analytic latency table") {
  auto space = tiny_space();
  BenchOptions opts;
  opts.ms_per_mac = 1e-9;  // 1 ms per GMAC
  auto table = build_latency_table(space, BenchDevice::analytic, 15, 3, opts);

  REQUIRE(audit_coverage(table, space).empty());

  // an FFN entry equals its GMAC count numerically
  BlockDesc d{BlockKind::FFN, 4, space.stage_resolution(3), 32, 2};
  const double gmacs = static_cast<double>(block_macs(space, d, 10).total) * 1e-9;
  REQUIRE(table.lookup(LatencyKey::of(d)).latency_ms == Catch::Approx(gmacs).epsilon(1e-15));

  // with a dyadic per-MAC price the additive prediction is exact
  BenchOptions dyadic;
  dyadic.ms_per_mac = std::ldexp(1.0, -30);
  auto t2 = build_latency_table(space, BenchDevice::analytic, 15, 3, dyadic);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto cfg = sample_subnet(space, SampleKind::random, 4000 + seed);
    const double predicted = predict_latency(t2, space, cfg, 10);
    const double direct = static_cast<double>(count_macs(space, cfg, 10)) * dyadic.ms_per_mac;
    REQUIRE(predicted == direct);
  }
}

TEST_CASE("latency prediction is additive over blocks") {
  auto space = tiny_space();
  auto table = build_latency_table(space, BenchDevice::analytic);
  auto cfg = max_config(space);
  const double full = predict_latency(table, space, cfg, 10);

  auto smaller = cfg;
  smaller.depths[1] -= 0;  // keep valid; instead drop a stage-3 pair below
  smaller.depths[2] -= 1;
  smaller.expansions[2].pop_back();
  smaller.mhsa_on[2].pop_back();
  const double less = predict_latency(table, space, smaller, 10);

  BlockDesc ffn{BlockKind::FFN, 3, space.stage_resolution(2), cfg.widths[2], cfg.expansions[2].back()};
  BlockDesc attn{BlockKind::StrideAttn, 3, space.stage_resolution(2), cfg.widths[2], 0};
  const double expected_drop =
      table.lookup(LatencyKey::of(ffn)).latency_ms + table.lookup(LatencyKey::of(attn)).latency_ms;
  REQUIRE(full - less == Catch::Approx(expected_drop).epsilon(1e-12));
}

TEST_CASE("latency table io round trip and duplicate rejection") {
  auto space = tiny_space();
  auto table = build_latency_table(space, BenchDevice::analytic);
  const auto path = std::filesystem::temp_directory_path() / "slimnas_test_lut.csv";
  table.save(path.string());
  auto loaded = LatencyTable::load(path.string());
  REQUIRE(loaded.size() == table.size());
  for (const auto& [k, e] : table.entries()) {
    REQUIRE(loaded.lookup(k).latency_ms == e.latency_ms);
    REQUIRE(loaded.lookup(k).provenance == e.provenance);
  }

  // appending a duplicate row must be rejected by the loader
  {
    std::ofstream out(path, std::ios::app);
    const auto& [k, e] = *table.entries().begin();
    out << k.kind << "," << k.stage << "," << k.resolution << "," << k.width << "," << k.expansion << ","
        << e.latency_ms << "," << e.provenance << "\n";
  }
  REQUIRE_THROWS_AS(LatencyTable::load(path.string()), FormatError);
  std::filesystem::remove(path);

  // lookups of absent descriptors name the offender
  LatencyTable empty;
  try {
    empty.lookup({"FFN", 1, 8, 16, 2});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(std::string(e.what()).find("FFN(stage=1,res=8,width=16,exp=2)") != std::string::npos);
  }
}

TEST_CASE("measured latency table is positive stable and covering") {
  auto space = tiny_space();
  BenchOptions opts;
  std::vector<LatencyTable> builds;
  for (int b = 0; b < 3; ++b) builds.push_back(build_latency_table(space, BenchDevice::host_wall_clock, 7, 2, opts));
  REQUIRE(audit_coverage(builds[0], space).empty());
  for (const auto& [k, e] : builds[0].entries()) {
    REQUIRE(e.latency_ms > 0);
    REQUIRE(e.provenance.rfind("measured_host", 0) == 0);
    double lo = e.latency_ms, hi = e.latency_ms;
    for (const auto& t : builds) {
      lo = std::min(lo, t.lookup(k).latency_ms);
      hi = std::max(hi, t.lookup(k).latency_ms);
    }
    INFO(k.str());
    REQUIRE(hi / lo < 2.0);
  }
  REQUIRE_THROWS_AS(build_latency_table(space, BenchDevice::host_wall_clock, 2, 1, opts), ConfigError);
}

TEST_CASE("mes of config composes size and latency") {
  auto space = tiny_space();
  auto table = build_latency_table(space, BenchDevice::analytic);
  auto mes_cfg = MESConfig::defaults();
  const double mes_max = mes_of_config(mes_cfg, table, space, max_config(space), 10);
  const double mes_min = mes_of_config(mes_cfg, table, space, min_config(space), 10);
  REQUIRE(mes_min > mes_max);  // slimming improves the score
}
