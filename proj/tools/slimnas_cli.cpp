// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: supernet pretraining, latency benchmarking, the
// greedy size/speed search, subnet training, evaluation, and report export.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <string>

#include "slimnas/slimnas.hpp"

namespace {

using namespace slimnas;

std::string now_string() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[64];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", std::gmtime(&t));
  return buf;
}

SearchSpace space_from_file(const std::string& path) { return read_space(KVConfig::parse_file(path)); }

struct TrainFlags {
  int64_t epochs = 20;
  int64_t batch = 64;
  double lr_per_1024 = 1.6e-2;
  double weight_decay = 0.025;
  double drop_path = 0.1;
  uint64_t seed = 0;
  int64_t max_steps = 0;
  bool no_augment = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--epochs", epochs, "training epochs");
    cmd->add_option("--batch", batch, "batch size");
    cmd->add_option("--lr", lr_per_1024, "base learning rate per 1024 batch");
    cmd->add_option("--wd", weight_decay, "weight decay");
    cmd->add_option("--drop-path", drop_path, "max stochastic-depth drop rate");
    cmd->add_option("--seed", seed, "rng seed");
    cmd->add_option("--max-steps", max_steps, "stop after this many optimizer steps (0 = all)");
    cmd->add_flag("--no-augment", no_augment, "disable train-time augmentation");
  }

  TrainConfig to_config() const {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = batch;
    tc.base_lr_per_1024 = lr_per_1024;
    tc.weight_decay = weight_decay;
    tc.drop_path_rate = drop_path;
    tc.seed = seed;
    tc.max_steps = max_steps;
    tc.augment = !no_augment;
    return tc;
  }
};

int cmd_train_supernet(const std::string& space_path, const std::string& data_src, const std::string& out,
                       const TrainFlags& flags, uint64_t data_seed) {
  auto space = space_from_file(space_path);
  auto data = load_dataset(data_src, data_seed);
  Supernet<float> net(space, flags.seed, data.classes);
  auto log = train_supernet(net, data, flags.to_config(), out, true);
  std::printf("best val accuracy (max config): %.4f at epoch %lld\n", log.best_val_accuracy,
              static_cast<long long>(log.best_epoch));
  std::printf("checkpoint: %s\n", out.c_str());
  return 0;
}

int cmd_bench(const std::string& space_path, const std::string& mode, const std::string& out, int reps,
              int warmup, double ms_per_gmac, int64_t classes, uint64_t seed) {
  auto space = space_from_file(space_path);
  BenchOptions opts;
  opts.num_classes = classes;
  opts.ms_per_mac = ms_per_gmac * 1e-9;
  opts.seed = seed;
  BenchDevice device;
  if (mode == "host")
    device = BenchDevice::host_wall_clock;
  else if (mode == "analytic")
    device = BenchDevice::analytic;
  else
    throw ConfigError("bench: mode must be host or analytic, got '" + mode + "'");
  auto table = build_latency_table(space, device, reps, warmup, opts);
  auto missing = audit_coverage(table, space);
  if (!missing.empty()) throw ConfigError("bench: coverage audit failed, missing " + missing[0]);
  table.save(out);
  std::printf("latency table with %zu entries written to %s\n", table.size(), out.c_str());
  return 0;
}

int cmd_search(const std::string& ckpt, const std::string& lut, const std::string& objective_str,
               double alpha_size, double alpha_latency, double base_score, const std::string& report_path,
               const std::string& data_src, uint64_t seed, int64_t val_limit) {
  auto net = load_supernet_checkpoint(ckpt);
  auto table = LatencyTable::load(lut);
  auto missing = audit_coverage(table, net.space());
  if (!missing.empty()) throw ConfigError("search: latency table does not cover " + missing[0]);

  auto data = load_dataset(data_src, seed);
  if (data.classes != net.num_classes())
    throw ConfigError("search: dataset has " + std::to_string(data.classes) + " classes, checkpoint expects " +
                      std::to_string(net.num_classes()));
  auto [sv_images_full, sv_labels_full] = data.split_tensors("search_val");
  auto sv_images = sv_images_full;
  auto sv_labels = sv_labels_full;
  if (val_limit > 0 && val_limit < sv_images_full.dim(0)) {
    NoGradGuard<float> ng;
    sv_images = slice(sv_images_full, 0, 0, val_limit);
    sv_labels.assign(sv_labels_full.begin(), sv_labels_full.begin() + val_limit);
  }

  auto objective = SearchObjective::parse(objective_str);
  auto mes_cfg = MESConfig::defaults(alpha_size, alpha_latency);
  mes_cfg.base_score = base_score;
  SearchContext ctx{net.space(), table, mes_cfg, net.num_classes()};
  AccuracyFn acc = [&](const SubnetConfig& cfg) {
    return evaluate_accuracy(net, cfg, sv_images, sv_labels);
  };

  ReportHeader hdr;
  hdr.objective = objective.str();
  hdr.alpha_size = alpha_size;
  hdr.alpha_latency = alpha_latency;
  hdr.base_score = base_score;
  hdr.unit_size = mes_cfg.metrics[0].unit;
  hdr.unit_latency = mes_cfg.metrics[1].unit;
  hdr.num_classes = net.num_classes();
  hdr.seed = seed;
  hdr.val_size = sv_images.dim(0);

  try {
    auto res = run_search(ctx, acc, objective);
    write_search_report(report_path, net.space(), res, hdr, now_string());
    std::printf("search finished in %zu steps: params %lld, latency %.4f ms, mes %.2f, accuracy %.4f\n",
                res.history.size(), static_cast<long long>(res.final_params), res.final_latency_ms,
                res.final_mes, res.final_accuracy);
    std::printf("report: %s\n", report_path.c_str());
  } catch (const UnreachableObjective& e) {
    write_search_report(report_path, net.space(), e.partial, hdr, now_string());
    std::fprintf(stderr, "unreachable objective: %s\n", e.what());
    std::fprintf(stderr, "best state written to %s\n", report_path.c_str());
    return 4;
  }
  return 0;
}

int cmd_train_subnet(const std::string& config_path, const std::string& data_src, const std::string& out,
                     const TrainFlags& flags, const std::string& teacher_path, uint64_t data_seed) {
  SearchSpace space;
  SubnetConfig cfg;
  std::ifstream probe(config_path);
  std::string first_line;
  std::getline(probe, first_line);
  probe.close();
  if (first_line == "# slimnas search report") {
    auto rep = parse_search_report(config_path);
    space = rep.space;
    cfg = rep.final_config;
  } else {
    auto kv = KVConfig::parse_file(config_path);
    space = read_space(kv);
    cfg = read_subnet(kv, space);
  }
  auto data = load_dataset(data_src, data_seed);
  SubnetModel<float> model(space, cfg, data.classes, flags.seed);
  TeacherFn teacher;
  auto log = teacher_path.empty()
                 ? train_classifier(model, data, flags.to_config(), out, nullptr, true)
                 : (teacher = load_teacher(teacher_path),
                    train_classifier(model, data, flags.to_config(), out, &teacher, true));
  std::printf("best val accuracy: %.4f at epoch %lld\n", log.best_val_accuracy,
              static_cast<long long>(log.best_epoch));
  if (!out.empty()) std::printf("checkpoint: %s\n", out.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_src, const std::string& split,
             uint64_t data_seed) {
  auto data = load_dataset(data_src, data_seed);
  auto [images, labels] = data.split_tensors(split);
  auto info = peek_checkpoint(ckpt);
  double acc = 0;
  if (info.kind == "supernet") {
    auto net = load_supernet_checkpoint(ckpt);
    acc = evaluate_accuracy(net, max_config(net.space()), images, labels);
    std::printf("supernet max-config top-1 on %s: %.4f\n", split.c_str(), acc);
  } else {
    auto model = load_subnet_checkpoint(ckpt);
    acc = model_accuracy(model, images, labels);
    std::printf("subnet top-1 on %s: %.4f\n", split.c_str(), acc);
  }
  return 0;
}

int cmd_report(const std::string& history_path, const std::string& out_path) {
  auto rep = parse_search_report(history_path);
  std::ofstream out(out_path);
  if (!out) throw DataError("cannot write csv: " + out_path);
  out << "step,mes,params,latency_ms,accuracy\n";
  char buf[128];
  double acc = rep.result.initial_accuracy;
  std::snprintf(buf, sizeof(buf), "0,%.6f,%lld,%.6f,%.6f\n", rep.result.initial_mes,
                static_cast<long long>(rep.result.initial_params), rep.result.initial_latency_ms, acc);
  out << buf;
  for (const auto& r : rep.result.history) {
    acc -= r.dacc_points / 100.0;
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%lld,%.6f,%.6f\n", r.step, r.mes,
                  static_cast<long long>(r.params), r.latency_ms, acc);
    out << buf;
  }
  std::printf("wrote %zu rows to %s\n", rep.result.history.size() + 1, out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slimnas: slimmable hybrid-attention supernet with joint size/speed search"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  // train-supernet
  auto* ts = app.add_subcommand("train-supernet", "pretrain the weight-shared supernet (sandwich rule)");
  std::string ts_space, ts_data, ts_out;
  uint64_t ts_data_seed = 7;
  TrainFlags ts_flags;
  ts->add_option("--space", ts_space, "search space config file")->required();
  ts->add_option("--data", ts_data, "dataset source (synthetic:... or directory)")->required();
  ts->add_option("--out", ts_out, "output checkpoint path")->required();
  ts->add_option("--data-seed", ts_data_seed, "dataset split seed");
  ts_flags.attach(ts);

  // bench
  auto* be = app.add_subcommand("bench", "build the per-block latency lookup table");
  std::string be_space, be_mode = "host", be_out;
  int be_reps = 15, be_warmup = 3;
  double be_ms_per_gmac = 1.0;
  int64_t be_classes = 10;
  uint64_t be_seed = 0;
  be->add_option("--space", be_space, "search space config file")->required();
  be->add_option("--mode", be_mode, "host | analytic")->required();
  be->add_option("--out", be_out, "output table path (csv)")->required();
  be->add_option("--reps", be_reps, "timing repetitions per entry");
  be->add_option("--warmup", be_warmup, "discarded warmup repetitions");
  be->add_option("--ms-per-gmac", be_ms_per_gmac, "analytic mode: milliseconds per GMAC");
  be->add_option("--classes", be_classes, "classifier head width for Head entries");
  be->add_option("--seed", be_seed, "weight init seed for measured blocks");

  // search
  auto* se = app.add_subcommand("search", "greedy joint size/speed search from a pretrained supernet");
  std::string se_ckpt, se_lut, se_objective, se_report, se_data;
  double se_alpha_size = 0.5, se_alpha_latency = 1.0, se_base = 100.0;
  uint64_t se_seed = 0;
  int64_t se_val_limit = 1000;
  se->add_option("--ckpt", se_ckpt, "supernet checkpoint")->required();
  se->add_option("--lut", se_lut, "latency lookup table (csv)")->required();
  se->add_option("--objective", se_objective, "mes>=V | params<=V | latency<=V")->required();
  se->add_option("--report", se_report, "output report path")->required();
  se->add_option("--data", se_data, "dataset source; the search_val split scores actions")->required();
  se->add_option("--alpha-size", se_alpha_size, "size exponent");
  se->add_option("--alpha-latency", se_alpha_latency, "latency exponent");
  se->add_option("--base-score", se_base, "base score");
  se->add_option("--seed", se_seed, "dataset split seed (recorded in the report)");
  se->add_option("--val-limit", se_val_limit, "cap the validation partition size (0 = all)");

  // train-subnet
  auto* tb = app.add_subcommand("train-subnet", "train a searched architecture from scratch");
  std::string tb_config, tb_data, tb_out, tb_teacher;
  uint64_t tb_data_seed = 7;
  TrainFlags tb_flags;
  tb->add_option("--config", tb_config, "config file with [space] and [subnet] (e.g. a search report)")
      ->required();
  tb->add_option("--data", tb_data, "dataset source")->required();
  tb->add_option("--out", tb_out, "output checkpoint path");
  tb->add_option("--teacher", tb_teacher, "optional teacher checkpoint for hard distillation");
  tb->add_option("--data-seed", tb_data_seed, "dataset split seed");
  tb_flags.attach(tb);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  std::string ev_ckpt, ev_data, ev_split = "test";
  uint64_t ev_data_seed = 7;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--data", ev_data, "dataset source")->required();
  ev->add_option("--split", ev_split, "train | val | search_val | test");
  ev->add_option("--data-seed", ev_data_seed, "dataset split seed");

  // report
  auto* re = app.add_subcommand("report", "convert a search report into a step-wise csv");
  std::string re_history, re_out;
  re->add_option("--history", re_history, "search report file")->required();
  re->add_option("--out", re_out, "output csv path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (ts->parsed()) return cmd_train_supernet(ts_space, ts_data, ts_out, ts_flags, ts_data_seed);
    if (be->parsed()) return cmd_bench(be_space, be_mode, be_out, be_reps, be_warmup, be_ms_per_gmac,
                                       be_classes, be_seed);
    if (se->parsed())
      return cmd_search(se_ckpt, se_lut, se_objective, se_alpha_size, se_alpha_latency, se_base, se_report,
                        se_data, se_seed, se_val_limit);
    if (tb->parsed()) return cmd_train_subnet(tb_config, tb_data, tb_out, tb_flags, tb_teacher, tb_data_seed);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_split, ev_data_seed);
    if (re->parsed()) return cmd_report(re_history, re_out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
