// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
//
// Exercises the installed command surface through real subprocesses: exit
// codes, output formats, and cross-run reproducibility.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "slimnas/slimnas.hpp"

using namespace slimnas;
namespace fs = std::filesystem;

namespace {

const std::string kCli = SLIMNAS_CLI_PATH;

fs::path scratch() {
  auto p = fs::temp_directory_path() / "slimnas_cli_test";
  fs::create_directories(p);
  return p;
}

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = kCli + " " + args + " >" + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_space_file(const fs::path& p) {
  SearchSpace s;
  s.input_resolution = 32;
  s.max_depths = {1, 1, 1, 1};
  s.width_choices = {{8, 16}, {16}, {16, 24}, {24, 32}};
  s.expansion_choices = {2, 3};
  KVConfig kv;
  write_space(kv, s);
  kv.save(p.string());
}

const char* kData = "synthetic:seed=7,k=4,n=400,H=32";

}  // namespace

TEST_CASE("cli exit codes for bad input") {
  auto dir = scratch();
  REQUIRE(run("--definitely-not-a-flag", dir / "log0.txt") == 2);
  REQUIRE(run("bogus-subcommand", dir / "log1.txt") == 2);

  write_space_file(dir / "space.cfg");
  // bad bench mode -> ConfigError -> 2
  REQUIRE(run("bench --space " + (dir / "space.cfg").string() + " --mode gpu --out " +
                  (dir / "x.csv").string(),
              dir / "log2.txt") == 2);
  // unreadable data -> DataError -> 3
  REQUIRE(run("eval --ckpt /nonexistent.ckpt --data /nonexistent-dir", dir / "log3.txt") == 3);
  // usage text on unknown flag
  const auto usage = slurp(dir / "log0.txt");
  REQUIRE(usage.find("Usage") != std::string::npos);
}

TEST_CASE("cli pipeline with analytic table and objective exit codes") {
  auto dir = scratch();
  write_space_file(dir / "space.cfg");
  const std::string space = (dir / "space.cfg").string();

  REQUIRE(run("train-supernet --space " + space + " --data " + std::string(kData) + " --out " +
                  (dir / "net.ckpt").string() + " --epochs 1 --batch 16 --max-steps 12 --seed 3",
              dir / "train.log") == 0);

  REQUIRE(run("bench --space " + space + " --mode analytic --out " + (dir / "lut.csv").string(),
              dir / "bench.log") == 0);

  // analytic lookup equals the MAC price of every sampled config
  auto table = LatencyTable::load((dir / "lut.csv").string());
  auto s = read_space(KVConfig::parse_file(space));
  for (uint64_t seed = 0; seed < 10; ++seed) {
    auto cfg = sample_subnet(s, SampleKind::random, seed);
    const double predicted = predict_latency(table, s, cfg, 10);
    const double direct = static_cast<double>(count_macs(s, cfg, 10)) * 1e-9;
    REQUIRE(predicted == Catch::Approx(direct).epsilon(1e-12));
  }

  // reachable objective -> 0
  REQUIRE(run("search --ckpt " + (dir / "net.ckpt").string() + " --lut " + (dir / "lut.csv").string() +
                  " --objective \"params<=30000\" --report " + (dir / "rep.txt").string() + " --data " +
                  std::string(kData) + " --val-limit 20",
              dir / "search.log") == 0);

  // unreachable objective -> 4, report still written with the best state
  REQUIRE(run("search --ckpt " + (dir / "net.ckpt").string() + " --lut " + (dir / "lut.csv").string() +
                  " --objective \"params<=1\" --report " + (dir / "rep_fail.txt").string() + " --data " +
                  std::string(kData) + " --val-limit 20",
              dir / "search_fail.log") == 4);
  auto rep = parse_search_report((dir / "rep_fail.txt").string());
  REQUIRE(rep.final_config == min_config(s));

  REQUIRE(run("train-subnet --config " + (dir / "rep.txt").string() + " --data " + std::string(kData) +
                  " --out " + (dir / "sub.ckpt").string() + " --epochs 1 --batch 16 --max-steps 10",
              dir / "train_sub.log") == 0);
  REQUIRE(run("eval --ckpt " + (dir / "sub.ckpt").string() + " --data " + std::string(kData) +
                  " --split val",
              dir / "eval.log") == 0);
  REQUIRE(slurp(dir / "eval.log").find("subnet top-1 on val:") != std::string::npos);

  REQUIRE(run("report --history " + (dir / "rep.txt").string() + " --out " + (dir / "steps.csv").string(),
              dir / "report.log") == 0);
  auto csv = slurp(dir / "steps.csv");
  REQUIRE(csv.rfind("step,mes,params,latency_ms,accuracy", 0) == 0);

  // the default exponents are written back into the report header
  auto rep_ok = parse_search_report((dir / "rep.txt").string());
  REQUIRE(rep_ok.header.alpha_size == 0.5);
  REQUIRE(rep_ok.header.alpha_latency == 1.0);
  REQUIRE(rep_ok.header.base_score == 100.0);
  REQUIRE(rep_ok.header.unit_size == 3e6);

  fs::remove_all(dir);
}

TEST_CASE("cli outputs are byte reproducible modulo the timestamp header") {
  auto dir = scratch();
  write_space_file(dir / "space.cfg");
  const std::string space = (dir / "space.cfg").string();

  auto train = [&](const std::string& out, const std::string& log) {
    return run("train-supernet --space " + space + " --data " + std::string(kData) + " --out " + out +
                   " --epochs 1 --batch 16 --max-steps 8 --seed 11",
               dir / log);
  };
  REQUIRE(train((dir / "a.ckpt").string(), "a.log") == 0);
  REQUIRE(train((dir / "b.ckpt").string(), "b.log") == 0);
  REQUIRE(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));  // bit-identical checkpoints
  {
    std::istringstream la(slurp(dir / "a.log")), lb(slurp(dir / "b.log"));
    std::string x, y;
    while (std::getline(la, x)) {
      REQUIRE(std::getline(lb, y));
      if (x.rfind("checkpoint:", 0) == 0) continue;  // differs only in the --out path
      REQUIRE(x == y);
    }
  }

  REQUIRE(run("bench --space " + space + " --mode analytic --out " + (dir / "lut.csv").string(),
              dir / "bench.log") == 0);
  auto search = [&](const std::string& rep, const std::string& log) {
    return run("search --ckpt " + (dir / "a.ckpt").string() + " --lut " + (dir / "lut.csv").string() +
                   " --objective \"params<=30000\" --report " + rep + " --data " + std::string(kData) +
                   " --val-limit 20 --seed 5",
               dir / log);
  };
  REQUIRE(search((dir / "r1.txt").string(), "s1.log") == 0);
  REQUIRE(search((dir / "r2.txt").string(), "s2.log") == 0);

  std::istringstream r1(slurp(dir / "r1.txt")), r2(slurp(dir / "r2.txt"));
  std::string l1, l2;
  while (std::getline(r1, l1)) {
    REQUIRE(std::getline(r2, l2));
    if (l1.rfind("# generated:", 0) == 0) {
      REQUIRE(l2.rfind("# generated:", 0) == 0);  // timestamps confined to this line
      continue;
    }
    REQUIRE(l1 == l2);
  }
  REQUIRE_FALSE(std::getline(r2, l2));
  fs::remove_all(dir);
}
