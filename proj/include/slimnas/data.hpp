// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
//
// Dataset plumbing: a deterministic synthetic classification set and a
// directory loader for raw float rasters, with fixed 80/10/5/5 splits.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "slimnas/tensor.hpp"

namespace slimnas {

struct Dataset {
  int64_t count = 0;
  int64_t classes = 0;
  int64_t height = 0;  // square images, 3 channels
  std::vector<float> images;  // [n,3,H,H], normalized to [-1,1]
  std::vector<int64_t> labels;
  std::vector<int64_t> train_idx, val_idx, search_val_idx, test_idx;

  int64_t image_floats() const { return 3 * height * height; }

  const std::vector<int64_t>& split(const std::string& name) const {
    if (name == "train") return train_idx;
    if (name == "val") return val_idx;
    if (name == "search_val") return search_val_idx;
    if (name == "test") return test_idx;
    throw ConfigError("unknown split: " + name);
  }

  // Materializes samples [start, start+len) of an index list.
  Tensor<float> batch_images(const std::vector<int64_t>& idx, int64_t start, int64_t len) const {
    Tensor<float> out(Shape{len, 3, height, height});
    for (int64_t i = 0; i < len; ++i) {
      const int64_t src = idx[static_cast<size_t>(start + i)];
      std::copy(images.begin() + src * image_floats(), images.begin() + (src + 1) * image_floats(),
                out.data().begin() + i * image_floats());
    }
    return out;
  }

  std::vector<int64_t> batch_labels(const std::vector<int64_t>& idx, int64_t start, int64_t len) const {
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(len));
    for (int64_t i = 0; i < len; ++i) out.push_back(labels[static_cast<size_t>(idx[static_cast<size_t>(start + i)])]);
    return out;
  }

  // whole split as one fixed-order tensor (search/val partitions)
  std::pair<Tensor<float>, std::vector<int64_t>> split_tensors(const std::string& name) const {
    const auto& idx = split(name);
    return {batch_images(idx, 0, static_cast<int64_t>(idx.size())),
            batch_labels(idx, 0, static_cast<int64_t>(idx.size()))};
  }
};

namespace detail_data {

inline void assign_splits(Dataset& d, uint64_t seed) {
  std::vector<int64_t> order(static_cast<size_t>(d.count));
  for (int64_t i = 0; i < d.count; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(seed ^ 0x5eedf00dULL);
  for (int64_t i = d.count - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.uniform_int(0, i))]);
  const int64_t n_train = d.count * 80 / 100;
  const int64_t n_val = d.count * 10 / 100;
  const int64_t n_search = d.count * 5 / 100;
  d.train_idx.assign(order.begin(), order.begin() + n_train);
  d.val_idx.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  d.search_val_idx.assign(order.begin() + n_train + n_val, order.begin() + n_train + n_val + n_search);
  d.test_idx.assign(order.begin() + n_train + n_val + n_search, order.end());
}

inline float normalize_pixel(float raw01) { return (raw01 - 0.5f) * 2.0f; }

}  // namespace detail_data

// Class-dependent Gaussian blobs over class-dependent gratings plus pixel
// noise: linearly separable enough to learn quickly, noisy enough to rank
// architectures.
inline Dataset synthetic_dataset(uint64_t seed, int64_t classes, int64_t count, int64_t height) {
  if (classes < 2) throw ConfigError("synthetic_dataset: need at least 2 classes");
  if (count < 20 || height < 8) throw ConfigError("synthetic_dataset: degenerate size");
  Dataset d;
  d.count = count;
  d.classes = classes;
  d.height = height;
  d.images.resize(static_cast<size_t>(count * 3 * height * height));
  d.labels.resize(static_cast<size_t>(count));

  Rng class_rng(seed);
  struct ClassPattern {
    double cx, cy, sigma, freq, angle, phase;
    double color[3];
  };
  std::vector<ClassPattern> patterns;
  for (int64_t c = 0; c < classes; ++c) {
    ClassPattern p;
    p.cx = class_rng.uniform(0.2, 0.8) * static_cast<double>(height);
    p.cy = class_rng.uniform(0.2, 0.8) * static_cast<double>(height);
    p.sigma = static_cast<double>(height) / class_rng.uniform(5.0, 8.0);
    p.freq = class_rng.uniform(1.0, 3.0);
    p.angle = class_rng.uniform(0.0, 3.14159265);
    p.phase = class_rng.uniform(0.0, 6.2831853);
    for (auto& ch : p.color) ch = class_rng.uniform(0.1, 0.9);
    patterns.push_back(p);
  }

  Rng rng(seed + 1);
  const double tau = 6.28318530717958648;
  for (int64_t i = 0; i < count; ++i) {
    const int64_t label = i % classes;  // balanced by construction
    d.labels[static_cast<size_t>(i)] = label;
    const auto& p = patterns[static_cast<size_t>(label)];
    const double ca = std::cos(p.angle), sa = std::sin(p.angle);
    for (int64_t ch = 0; ch < 3; ++ch)
      for (int64_t y = 0; y < height; ++y)
        for (int64_t x = 0; x < height; ++x) {
          const double dx = static_cast<double>(x) - p.cx;
          const double dy = static_cast<double>(y) - p.cy;
          const double blob = std::exp(-(dx * dx + dy * dy) / (2 * p.sigma * p.sigma));
          const double axis = (ca * static_cast<double>(x) + sa * static_cast<double>(y)) /
                              static_cast<double>(height);
          const double grating = 0.5 + 0.5 * std::sin(tau * p.freq * axis + p.phase);
          double v = 0.25 + 0.45 * blob * p.color[ch] + 0.2 * grating + 0.08 * rng.normal();
          v = std::min(1.0, std::max(0.0, v));
          d.images[static_cast<size_t>(((i * 3 + ch) * height + y) * height + x)] =
              detail_data::normalize_pixel(static_cast<float>(v));
        }
  }
  detail_data::assign_splits(d, seed);
  return d;
}

// ---------------------------------------------------------------------------
// raw raster directory format: one subdirectory per class, files holding a
// "P-RAW w h" header line then w*h*3 little-endian float32 values in [0,1]

inline void write_praw(const std::string& path, int64_t w, int64_t h, const std::vector<float>& rgb01) {
  if (static_cast<int64_t>(rgb01.size()) != w * h * 3) throw ConfigError("write_praw: value count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image: " + path);
  out << "P-RAW " << w << " " << h << "\n";
  for (float v : rgb01) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    const unsigned char bytes[4] = {static_cast<unsigned char>(bits & 0xff),
                                    static_cast<unsigned char>((bits >> 8) & 0xff),
                                    static_cast<unsigned char>((bits >> 16) & 0xff),
                                    static_cast<unsigned char>((bits >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(bytes), 4);
  }
}

inline std::vector<float> read_praw(const std::string& path, int64_t& w, int64_t& h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read image: " + path);
  std::string magic;
  in >> magic >> w >> h;
  if (magic != "P-RAW" || w < 1 || h < 1) throw DataError("not a P-RAW file: " + path);
  in.get();  // the single newline after the header
  std::vector<float> out(static_cast<size_t>(w * h * 3));
  for (auto& v : out) {
    unsigned char bytes[4];
    if (!in.read(reinterpret_cast<char*>(bytes), 4)) throw DataError("truncated P-RAW file: " + path);
    const uint32_t bits = static_cast<uint32_t>(bytes[0]) | (static_cast<uint32_t>(bytes[1]) << 8) |
                          (static_cast<uint32_t>(bytes[2]) << 16) | (static_cast<uint32_t>(bytes[3]) << 24);
    std::memcpy(&v, &bits, 4);
  }
  return out;
}

// Loads `dir/<class-name>/*.praw`; class ids follow the sorted subdirectory
// names, image order within a class is sorted by filename.
inline Dataset directory_dataset(const std::string& dir, uint64_t seed) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) class_dirs.push_back(e.path().string());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.size() < 2) throw DataError("need at least 2 class subdirectories in " + dir);

  Dataset d;
  d.classes = static_cast<int64_t>(class_dirs.size());
  d.height = 0;
  for (size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(class_dirs[c]))
      if (e.is_regular_file()) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("class directory has no images: " + class_dirs[c]);
    for (const auto& f : files) {
      int64_t w = 0, h = 0;
      auto raw = read_praw(f, w, h);
      if (w != h) throw DataError("image must be square: " + f);
      if (d.height == 0) d.height = h;
      if (h != d.height) throw DataError("image size mismatch (" + std::to_string(h) + " vs " +
                                         std::to_string(d.height) + "): " + f);
      // file layout is [h][w][3]; dataset layout is [3][h][w]
      for (int64_t ch = 0; ch < 3; ++ch)
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x)
            d.images.push_back(detail_data::normalize_pixel(raw[static_cast<size_t>((y * w + x) * 3 + ch)]));
      d.labels.push_back(static_cast<int64_t>(c));
      ++d.count;
    }
  }
  if (d.count < 20) throw DataError("too few images in " + dir);
  detail_data::assign_splits(d, seed);
  return d;
}

// `synthetic:seed=7,k=10,n=2000,H=32` or a directory path
inline Dataset load_dataset(const std::string& source, uint64_t split_seed = 7) {
  if (source.rfind("synthetic", 0) == 0) {
    uint64_t seed = 7;
    int64_t k = 10, n = 2000, h = 32;
    const auto colon = source.find(':');
    if (colon != std::string::npos) {
      std::stringstream ss(source.substr(colon + 1));
      std::string kv;
      while (std::getline(ss, kv, ',')) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("bad synthetic spec: " + source);
        const std::string key = kv.substr(0, eq);
        const int64_t value = std::stoll(kv.substr(eq + 1));
        if (key == "seed") seed = static_cast<uint64_t>(value);
        else if (key == "k") k = value;
        else if (key == "n") n = value;
        else if (key == "H") h = value;
        else throw ConfigError("unknown synthetic field '" + key + "' in " + source);
      }
    }
    return synthetic_dataset(seed, k, n, h);
  }
  return directory_dataset(source, split_seed);
}

}  // namespace slimnas
