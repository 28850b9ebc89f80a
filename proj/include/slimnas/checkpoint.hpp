// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
//
// Named-tensor archive: a text manifest (name, dtype, shape, byte offset)
// followed by raw little-endian buffers. The builder's configuration text is
// embedded so a model can be reconstructed from the file alone. Round trips
// are bit exact.

#pragma once

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "slimnas/config.hpp"
#include "slimnas/optim.hpp"

namespace slimnas {

namespace detail_ckpt {

constexpr const char* kMagic = "SLIMNAS-CKPT v1";

template <typename T>
inline void write_le(std::ostream& out, const T* values, size_t n) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  using U = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
  std::vector<unsigned char> buf(n * sizeof(T));
  for (size_t i = 0; i < n; ++i) {
    U bits;
    std::memcpy(&bits, values + i, sizeof(T));
    for (size_t b = 0; b < sizeof(T); ++b) buf[i * sizeof(T) + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

template <typename T>
inline void read_le(std::istream& in, T* values, size_t n, const std::string& name) {
  using U = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
  std::vector<unsigned char> buf(n * sizeof(T));
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw FormatError("checkpoint: truncated data for tensor " + name);
  for (size_t i = 0; i < n; ++i) {
    U bits = 0;
    for (size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<U>(buf[i * sizeof(T) + b]) << (8 * b);
    std::memcpy(values + i, &bits, sizeof(T));
  }
}

struct ManifestEntry {
  std::string name;
  std::string dtype;
  Shape shape;
  uint64_t offset = 0;

  int64_t numel() const { return numel_of(shape); }
};

}  // namespace detail_ckpt

struct CheckpointInfo {
  std::string kind;  // "supernet" or "subnet"
  KVConfig meta;     // [space] (+ [subnet]) + [model] num_classes
};

// Collects (name, data pointer, shape) triples for a registry, optionally
// with the optimizer moment buffers and step counters.
template <typename T>
inline std::vector<std::tuple<std::string, std::vector<T>*, Shape>> checkpoint_slots(
    ParamRegistry<T>& reg, bool with_optimizer_state) {
  std::vector<std::tuple<std::string, std::vector<T>*, Shape>> slots;
  for (auto& p : reg.params()) {
    slots.emplace_back(p.name, &p.value.data(), p.value.shape());
    if (with_optimizer_state) {
      if (p.moment1.empty()) {
        p.moment1.assign(p.value.data().size(), T(0));
        p.moment2.assign(p.value.data().size(), T(0));
      }
      slots.emplace_back(p.name + ".adam_m", &p.moment1, p.value.shape());
      slots.emplace_back(p.name + ".adam_v", &p.moment2, p.value.shape());
    }
  }
  for (auto& [name, buf] : reg.buffers()) slots.emplace_back(name, &buf.data(), buf.shape());
  return slots;
}

template <typename T>
inline void save_checkpoint(const std::string& path, const std::string& kind, const KVConfig& meta,
                            ParamRegistry<T>& reg, bool with_optimizer_state = false) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  auto slots = checkpoint_slots(reg, with_optimizer_state);

  const std::string meta_text = meta.serialize();
  out << detail_ckpt::kMagic << "\n";
  out << "kind " << kind << "\n";
  out << "meta " << meta_text.size() << "\n" << meta_text;
  out << "tensors " << slots.size() << "\n";
  uint64_t offset = 0;
  const char* dtype = scalar_type_name(scalar_type_of<T>());
  for (const auto& [name, data, shape] : slots) {
    out << name << " " << dtype << " " << shape.size();
    for (int64_t d : shape) out << " " << d;
    out << " " << offset << "\n";
    offset += data->size() * sizeof(T);
  }
  if (with_optimizer_state) {
    out << "steps";
    for (const auto& p : reg.params()) out << " " << p.step_count;
    out << "\n";
  }
  out << "data " << offset << "\n";
  for (const auto& [name, data, shape] : slots) detail_ckpt::write_le(out, data->data(), data->size());
  if (!out) throw DataError("checkpoint: write failed for " + path);
}

inline CheckpointInfo peek_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line) || line != detail_ckpt::kMagic)
    throw FormatError("checkpoint: bad magic in " + path);
  CheckpointInfo info;
  std::string word;
  in >> word;
  if (word != "kind") throw FormatError("checkpoint: missing kind in " + path);
  in >> info.kind;
  size_t meta_len = 0;
  in >> word >> meta_len;
  if (word != "meta") throw FormatError("checkpoint: missing meta block in " + path);
  in.get();
  std::string meta_text(meta_len, '\0');
  if (!in.read(meta_text.data(), static_cast<std::streamsize>(meta_len)))
    throw FormatError("checkpoint: truncated meta block in " + path);
  info.meta = KVConfig::parse_string(meta_text, path + ":meta");
  return info;
}

// Loads buffers into an already-built registry; every manifest entry must
// match a slot by name, dtype, and shape.
template <typename T>
inline void load_checkpoint_into(const std::string& path, ParamRegistry<T>& reg,
                                 bool with_optimizer_state = false) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint: " + path);
  std::string line, word;
  std::getline(in, line);
  if (line != detail_ckpt::kMagic) throw FormatError("checkpoint: bad magic in " + path);
  in >> word;  // kind
  in >> word;
  size_t meta_len = 0;
  in >> word >> meta_len;
  in.get();
  in.ignore(static_cast<std::streamsize>(meta_len));

  size_t tensor_count = 0;
  in >> word >> tensor_count;
  if (word != "tensors") throw FormatError("checkpoint: missing tensor manifest in " + path);
  std::vector<detail_ckpt::ManifestEntry> manifest;
  for (size_t i = 0; i < tensor_count; ++i) {
    detail_ckpt::ManifestEntry e;
    size_t rank = 0;
    in >> e.name >> e.dtype >> rank;
    e.shape.resize(rank);
    for (auto& d : e.shape) in >> d;
    in >> e.offset;
    manifest.push_back(std::move(e));
  }
  std::vector<int64_t> steps;
  in >> word;
  if (word == "steps") {
    int64_t s;
    for (size_t i = 0; i < reg.params().size() && in >> s; ++i) steps.push_back(s);
    in >> word;
  }
  uint64_t total = 0;
  in >> total;
  if (word != "data") throw FormatError("checkpoint: missing data block in " + path);
  in.get();
  const std::streampos data_start = in.tellg();

  auto slots = checkpoint_slots(reg, with_optimizer_state);
  if (slots.size() != manifest.size())
    throw FormatError("checkpoint: expects " + std::to_string(slots.size()) + " tensors, file has " +
                      std::to_string(manifest.size()));
  const char* expect_dtype = scalar_type_name(scalar_type_of<T>());
  for (size_t i = 0; i < slots.size(); ++i) {
    auto& [name, data, shape] = slots[i];
    const auto& e = manifest[i];
    if (e.name != name) throw FormatError("checkpoint: tensor name mismatch, expected " + name + " got " + e.name);
    if (e.dtype != expect_dtype) throw FormatError("checkpoint: dtype mismatch for " + name);
    if (e.shape != shape)
      throw FormatError("checkpoint: shape mismatch for " + name + ", expected " + shape_str(shape) +
                        " got " + shape_str(e.shape));
    in.seekg(data_start + static_cast<std::streamoff>(e.offset));
    detail_ckpt::read_le(in, data->data(), data->size(), name);
  }
  if (with_optimizer_state && !steps.empty()) {
    size_t i = 0;
    for (auto& p : reg.params()) {
      if (i < steps.size()) p.step_count = steps[i];
      ++i;
    }
  }
}

}  // namespace slimnas
