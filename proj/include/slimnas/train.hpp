// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy-scale training loops: cosine-decayed AdamW, light augmentation, per
// epoch validation with best-checkpoint retention, and supernet sandwich
// pretraining. Fully seeded; identical seeds give identical loss curves.

#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "slimnas/checkpoint.hpp"
#include "slimnas/data.hpp"
#include "slimnas/search.hpp"
#include "slimnas/supernet.hpp"

namespace slimnas {

struct TrainConfig {
  int64_t epochs = 20;
  int64_t batch_size = 64;
  double base_lr_per_1024 = 1.6e-2;  // linear batch scaling: peak = base * batch / 1024
  double weight_decay = 0.025;
  double drop_path_rate = 0.1;
  uint64_t seed = 0;
  int64_t max_steps = 0;  // 0 = run all epochs
  bool augment = true;

  void validate() const {
    if (epochs < 1 || batch_size < 2 || base_lr_per_1024 <= 0 || weight_decay < 0)
      throw ConfigError("train config: non-positive setting");
    if (drop_path_rate < 0 || drop_path_rate >= 1) throw ConfigError("train config: drop path rate in [0,1)");
  }

  double peak_lr() const { return base_lr_per_1024 * static_cast<double>(batch_size) / 1024.0; }
};

struct EpochLog {
  int64_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_accuracy = 0;
  // sandwich means over the epoch (supernet pretraining only)
  double min_loss = 0, rand_loss = 0, max_loss = 0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  double best_val_accuracy = 0;
  int64_t best_epoch = -1;
  int64_t total_steps = 0;
};

// optional hard-label teacher: returns logits for a batch
using TeacherFn = std::function<Tensor<float>(const Tensor<float>&)>;

namespace detail_train {

// horizontal flip (p=1/2, whole image) + per-channel gaussian noise
inline void augment_batch(Tensor<float>& images, Rng& rng) {
  const int64_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  for (int64_t bi = 0; bi < b; ++bi) {
    if (rng.bernoulli(0.5)) {
      for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t y = 0; y < h; ++y) {
          float* row = images.data().data() + ((bi * c + ci) * h + y) * w;
          for (int64_t x = 0; x < w / 2; ++x) std::swap(row[x], row[w - 1 - x]);
        }
    }
    for (int64_t ci = 0; ci < c; ++ci) {
      const float noise = static_cast<float>(rng.normal(0.0, 0.02));
      float* chan = images.data().data() + (bi * c + ci) * h * w;
      for (int64_t i = 0; i < h * w; ++i) chan[i] += noise;
    }
  }
}

inline std::vector<int64_t> shuffled(const std::vector<int64_t>& idx, Rng& rng) {
  std::vector<int64_t> out = idx;
  for (int64_t i = static_cast<int64_t>(out.size()) - 1; i > 0; --i)
    std::swap(out[static_cast<size_t>(i)], out[static_cast<size_t>(rng.uniform_int(0, i))]);
  return out;
}

inline Tensor<float> distill_loss(const Tensor<float>& logits, const std::vector<int64_t>& labels,
                                  const TeacherFn* teacher, const Tensor<float>& images) {
  auto loss = cross_entropy_logits(logits, labels);
  if (!teacher) return loss;
  std::vector<int64_t> hard;
  {
    NoGradGuard<float> ng;
    auto tl = (*teacher)(images);
    const int64_t k = tl.dim(1);
    for (int64_t b = 0; b < tl.dim(0); ++b) {
      int64_t best = 0;
      for (int64_t c = 1; c < k; ++c)
        if (tl.at({b, c}) > tl.at({b, best})) best = c;
      hard.push_back(best);
    }
  }
  auto distill = cross_entropy_logits(logits, hard);
  return mul_scalar(add(loss, distill), 0.5f);
}

}  // namespace detail_train

template <typename Model>
inline double model_accuracy(const Model& model, const Tensor<float>& images,
                             const std::vector<int64_t>& labels, int64_t batch_size = 128) {
  NoGradGuard<float> ng;
  const int64_t n = images.dim(0);
  if (n == 0) throw ConfigError("model_accuracy: empty partition");
  int64_t correct = 0;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t len = std::min(batch_size, n - start);
    auto logits = model.forward(slice(images, 0, start, len), NormMode::eval);
    for (int64_t b = 0; b < len; ++b) {
      int64_t best = 0;
      for (int64_t c = 1; c < logits.dim(1); ++c)
        if (logits.at({b, c}) > logits.at({b, best})) best = c;
      if (best == labels[static_cast<size_t>(start + b)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

// Trains a standalone model with AdamW + cosine decay. Keeps the best-val
// checkpoint when a path is given; a non-finite loss aborts with
// NumericError, leaving the last good checkpoint on disk.
inline TrainLog train_classifier(SubnetModel<float>& model, const Dataset& data, const TrainConfig& cfg,
                                 const std::string& ckpt_path = "", const TeacherFn* teacher = nullptr,
                                 bool log_to_stdout = false) {
  cfg.validate();
  if (data.train_idx.empty() || data.val_idx.empty()) throw ConfigError("train_classifier: empty splits");
  auto params = model.registry().parameters();
  AdamW<float> opt(params, static_cast<float>(cfg.peak_lr()), 0.9f, 0.999f,
                   static_cast<float>(cfg.weight_decay));
  const int64_t steps_per_epoch =
      (static_cast<int64_t>(data.train_idx.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps =
      cfg.max_steps > 0 ? std::min(cfg.max_steps, cfg.epochs * steps_per_epoch) : cfg.epochs * steps_per_epoch;

  auto [val_images, val_labels] = data.split_tensors("val");
  auto save_meta = [&]() {
    KVConfig meta;
    write_space(meta, model.space());
    write_subnet(meta, model.config());
    meta.set_int("model", "num_classes", model.num_classes());
    return meta;
  };

  TrainLog log;
  Rng rng(cfg.seed);
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs && step < total_steps; ++epoch) {
    EpochLog el;
    el.epoch = epoch;
    el.lr = cosine_lr(cfg.peak_lr(), step, total_steps);
    auto order = detail_train::shuffled(data.train_idx, rng);
    double loss_sum = 0;
    int64_t batches = 0;
    for (int64_t start = 0; start + 1 < static_cast<int64_t>(order.size()) && step < total_steps;
         start += cfg.batch_size) {
      const int64_t len = std::min<int64_t>(cfg.batch_size, static_cast<int64_t>(order.size()) - start);
      if (len < 2) break;  // batch norm needs more than one pixel row
      auto images = data.batch_images(order, start, len);
      auto labels = data.batch_labels(order, start, len);
      if (cfg.augment) detail_train::augment_batch(images, rng);

      opt.zero_grad();
      float loss_value = 0;
      try {
        auto logits = model.forward(images, NormMode::train, static_cast<float>(cfg.drop_path_rate), &rng);
        auto loss = detail_train::distill_loss(logits, labels, teacher, images);
        loss_value = loss.item();
        backward(loss);
      } catch (const NumericError&) {
        throw NumericError("training diverged at step " + std::to_string(step) +
                           (ckpt_path.empty() ? "" : "; last good checkpoint kept at " + ckpt_path));
      }
      opt.set_lr(static_cast<float>(cosine_lr(cfg.peak_lr(), step, total_steps)));
      opt.step();
      loss_sum += loss_value;
      ++batches;
      ++step;
    }
    el.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    el.val_accuracy = model_accuracy(model, val_images, val_labels);
    if (el.val_accuracy > log.best_val_accuracy || log.best_epoch < 0) {
      log.best_val_accuracy = el.val_accuracy;
      log.best_epoch = epoch;
      if (!ckpt_path.empty()) save_checkpoint(ckpt_path, "subnet", save_meta(), model.registry(), false);
    }
    log.epochs.push_back(el);
    if (log_to_stdout)
      std::printf("epoch %3lld  lr %.5f  loss %.4f  val %.4f\n", static_cast<long long>(epoch), el.lr,
                  el.train_loss, el.val_accuracy);
  }
  log.total_steps = step;
  return log;
}

// Sandwich-rule supernet pretraining. Reports per-epoch mean losses of the
// four passes and tracks max-config validation accuracy.
inline TrainLog train_supernet(Supernet<float>& net, const Dataset& data, const TrainConfig& cfg,
                               const std::string& ckpt_path = "", bool log_to_stdout = false,
                               std::vector<SandwichLosses<float>>* step_losses = nullptr) {
  cfg.validate();
  if (data.train_idx.empty() || data.val_idx.empty()) throw ConfigError("train_supernet: empty splits");
  auto params = net.registry().parameters();
  AdamW<float> opt(params, static_cast<float>(cfg.peak_lr()), 0.9f, 0.999f,
                   static_cast<float>(cfg.weight_decay));
  const int64_t steps_per_epoch =
      (static_cast<int64_t>(data.train_idx.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps =
      cfg.max_steps > 0 ? std::min(cfg.max_steps, cfg.epochs * steps_per_epoch) : cfg.epochs * steps_per_epoch;

  auto [val_images, val_labels] = data.split_tensors("val");
  const auto cfg_max = max_config(net.space());
  auto save_meta = [&]() {
    KVConfig meta;
    write_space(meta, net.space());
    meta.set_int("model", "num_classes", net.num_classes());
    return meta;
  };

  TrainLog log;
  Rng rng(cfg.seed);
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs && step < total_steps; ++epoch) {
    EpochLog el;
    el.epoch = epoch;
    el.lr = cosine_lr(cfg.peak_lr(), step, total_steps);
    auto order = detail_train::shuffled(data.train_idx, rng);
    double min_sum = 0, rand_sum = 0, max_sum = 0;
    int64_t batches = 0;
    for (int64_t start = 0; start + 1 < static_cast<int64_t>(order.size()) && step < total_steps;
         start += cfg.batch_size) {
      const int64_t len = std::min<int64_t>(cfg.batch_size, static_cast<int64_t>(order.size()) - start);
      if (len < 2) break;
      auto images = data.batch_images(order, start, len);
      auto labels = data.batch_labels(order, start, len);
      if (cfg.augment) detail_train::augment_batch(images, rng);

      opt.set_lr(static_cast<float>(cosine_lr(cfg.peak_lr(), step, total_steps)));
      SandwichLosses<float> losses;
      try {
        losses = sandwich_train_step(net, images, labels, opt, cfg.seed * 0x9e3779b9ULL + static_cast<uint64_t>(step),
                                     static_cast<float>(cfg.drop_path_rate));
      } catch (const NumericError&) {
        throw NumericError("supernet training diverged at step " + std::to_string(step) +
                           (ckpt_path.empty() ? "" : "; last good checkpoint kept at " + ckpt_path));
      }
      if (step_losses) step_losses->push_back(losses);
      min_sum += losses.min_loss;
      rand_sum += 0.5 * (losses.rand1_loss + losses.rand2_loss);
      max_sum += losses.max_loss;
      ++batches;
      ++step;
    }
    el.min_loss = batches ? min_sum / static_cast<double>(batches) : 0.0;
    el.rand_loss = batches ? rand_sum / static_cast<double>(batches) : 0.0;
    el.max_loss = batches ? max_sum / static_cast<double>(batches) : 0.0;
    el.train_loss = el.max_loss;
    el.val_accuracy = evaluate_accuracy(net, cfg_max, val_images, val_labels);
    if (el.val_accuracy > log.best_val_accuracy || log.best_epoch < 0) {
      log.best_val_accuracy = el.val_accuracy;
      log.best_epoch = epoch;
      if (!ckpt_path.empty()) save_checkpoint(ckpt_path, "supernet", save_meta(), net.registry(), false);
    }
    log.epochs.push_back(el);
    if (log_to_stdout)
      std::printf("epoch %3lld  lr %.5f  losses min %.4f rand %.4f max %.4f  val(max) %.4f\n",
                  static_cast<long long>(epoch), el.lr, el.min_loss, el.rand_loss, el.max_loss,
                  el.val_accuracy);
  }
  log.total_steps = step;
  if (!ckpt_path.empty() && log.best_epoch < 0)
    save_checkpoint(ckpt_path, "supernet", save_meta(), net.registry(), false);
  return log;
}

// ---------------------------------------------------------------------------
// checkpoint reconstruction

inline Supernet<float> load_supernet_checkpoint(const std::string& path) {
  auto info = peek_checkpoint(path);
  if (info.kind != "supernet") throw FormatError("checkpoint " + path + " holds a " + info.kind);
  auto space = read_space(info.meta);
  Supernet<float> net(space, 0, info.meta.get_int("model", "num_classes"));
  load_checkpoint_into(path, net.registry(), false);
  return net;
}

inline SubnetModel<float> load_subnet_checkpoint(const std::string& path) {
  auto info = peek_checkpoint(path);
  if (info.kind != "subnet") throw FormatError("checkpoint " + path + " holds a " + info.kind);
  auto space = read_space(info.meta);
  auto cfg = read_subnet(info.meta, space);
  SubnetModel<float> model(space, cfg, info.meta.get_int("model", "num_classes"), 0);
  load_checkpoint_into(path, model.registry(), false);
  return model;
}

// Teacher hook: wraps any checkpointed classifier as a logits function.
inline TeacherFn load_teacher(const std::string& path) {
  auto info = peek_checkpoint(path);
  if (info.kind == "supernet") {
    auto net = std::make_shared<Supernet<float>>(load_supernet_checkpoint(path));
    auto cfg = max_config(net->space());
    return [net, cfg](const Tensor<float>& images) {
      return net->forward(cfg, images, NormMode::eval);
    };
  }
  auto model = std::make_shared<SubnetModel<float>>(load_subnet_checkpoint(path));
  return [model](const Tensor<float>& images) { return model->forward(images, NormMode::eval); };
}

}  // namespace slimnas
