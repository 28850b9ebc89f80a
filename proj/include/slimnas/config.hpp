// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
//
// Line-oriented `key = value` configuration files with [sections].
// Grammar: blank lines and lines starting with '#' are ignored; a section
// header is `[name]`; everything else must be `key = value` inside a
// section. Values are scalars or comma-separated integer lists.

#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "slimnas/supernet.hpp"

namespace slimnas {

namespace detail_cfg {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail_cfg

class KVConfig {
 public:
  using Section = std::pair<std::string, std::vector<std::pair<std::string, std::string>>>;

  static KVConfig parse_string(const std::string& text, const std::string& origin = "<string>") {
    KVConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    std::string section;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = detail_cfg::trim(line);
      if (t.empty() || t[0] == '#') continue;
      if (t.front() == '[') {
        if (t.back() != ']') throw FormatError(origin + ":" + std::to_string(lineno) + ": unterminated section");
        section = detail_cfg::trim(t.substr(1, t.size() - 2));
        if (section.empty()) throw FormatError(origin + ":" + std::to_string(lineno) + ": empty section name");
        cfg.sections_.push_back({section, {}});
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos || section.empty())
        throw FormatError(origin + ":" + std::to_string(lineno) + ": expected 'key = value' inside a section");
      cfg.sections_.back().second.push_back(
          {detail_cfg::trim(t.substr(0, eq)), detail_cfg::trim(t.substr(eq + 1))});
    }
    return cfg;
  }

  static KVConfig parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str(), path);
  }

  std::string serialize() const {
    std::ostringstream out;
    for (const auto& [name, kvs] : sections_) {
      out << "[" << name << "]\n";
      for (const auto& [k, v] : kvs) out << k << " = " << v << "\n";
      out << "\n";
    }
    return out.str();
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write config file: " + path);
    out << serialize();
  }

  bool has_section(const std::string& section) const {
    for (const auto& s : sections_)
      if (s.first == section) return true;
    return false;
  }

  bool has(const std::string& section, const std::string& key) const {
    for (const auto& s : sections_)
      if (s.first == section)
        for (const auto& kv : s.second)
          if (kv.first == key) return true;
    return false;
  }

  std::string get(const std::string& section, const std::string& key) const {
    for (const auto& s : sections_)
      if (s.first == section)
        for (const auto& kv : s.second)
          if (kv.first == key) return kv.second;
    throw ConfigError("config: missing [" + section + "] " + key);
  }

  std::string get_or(const std::string& section, const std::string& key, const std::string& dflt) const {
    return has(section, key) ? get(section, key) : dflt;
  }

  int64_t get_int(const std::string& section, const std::string& key) const {
    return parse_int(get(section, key), section, key);
  }

  int64_t get_int_or(const std::string& section, const std::string& key, int64_t dflt) const {
    return has(section, key) ? get_int(section, key) : dflt;
  }

  double get_double(const std::string& section, const std::string& key) const {
    try {
      size_t pos = 0;
      const double v = std::stod(get(section, key), &pos);
      if (pos != get(section, key).size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config: [" + section + "] " + key + " is not a number");
    }
  }

  double get_double_or(const std::string& section, const std::string& key, double dflt) const {
    return has(section, key) ? get_double(section, key) : dflt;
  }

  bool get_bool_or(const std::string& section, const std::string& key, bool dflt) const {
    if (!has(section, key)) return dflt;
    const std::string v = get(section, key);
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError("config: [" + section + "] " + key + " must be a boolean");
  }

  std::vector<int64_t> get_int_list(const std::string& section, const std::string& key) const {
    std::vector<int64_t> out;
    std::stringstream ss(get(section, key));
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(parse_int(detail_cfg::trim(cell), section, key));
    return out;
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    for (auto& s : sections_)
      if (s.first == section) {
        for (auto& kv : s.second)
          if (kv.first == key) {
            kv.second = value;
            return;
          }
        s.second.push_back({key, value});
        return;
      }
    sections_.push_back({section, {{key, value}}});
  }

  void set_int(const std::string& section, const std::string& key, int64_t v) {
    set(section, key, std::to_string(v));
  }

  void set_int_list(const std::string& section, const std::string& key, const std::vector<int64_t>& v) {
    std::ostringstream os;
    for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    set(section, key, os.str());
  }

 private:
  static int64_t parse_int(const std::string& v, const std::string& section, const std::string& key) {
    try {
      size_t pos = 0;
      const int64_t r = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("");
      return r;
    } catch (const std::exception&) {
      throw ConfigError("config: [" + section + "] " + key + " is not an integer");
    }
  }

  std::vector<Section> sections_;
};

// ---------------------------------------------------------------------------
// search space / subnet config serialization

inline void write_space(KVConfig& kv, const SearchSpace& space) {
  kv.set_int("space", "input_resolution", space.input_resolution);
  kv.set_int_list("space", "max_depths", space.max_depths);
  for (int j = 0; j < kStages; ++j)
    kv.set_int_list("space", "widths_stage" + std::to_string(j + 1), space.width_choices[j]);
  kv.set_int_list("space", "expansion_choices", space.expansion_choices);
  kv.set_int("space", "width_granularity", space.width_granularity);
  kv.set_int("space", "head_dim", space.head_dim);
  kv.set_int("space", "head_width_divisor", space.head_width_divisor);
  kv.set("space", "activation", activation_name(space.activation));
  kv.set("space", "dual_path_2to3", space.dual_path_2to3 ? "1" : "0");
}

inline SearchSpace read_space(const KVConfig& kv) {
  SearchSpace s;
  s.input_resolution = kv.get_int("space", "input_resolution");
  s.max_depths = kv.get_int_list("space", "max_depths");
  s.width_choices.clear();
  for (int j = 0; j < kStages; ++j)
    s.width_choices.push_back(kv.get_int_list("space", "widths_stage" + std::to_string(j + 1)));
  s.expansion_choices = kv.get_int_list("space", "expansion_choices");
  s.width_granularity = kv.get_int_or("space", "width_granularity", 8);
  s.head_dim = kv.get_int_or("space", "head_dim", 8);
  s.head_width_divisor = kv.get_int_or("space", "head_width_divisor", 32);
  s.activation = activation_from_string(kv.get_or("space", "activation", "gelu"));
  s.dual_path_2to3 = kv.get_bool_or("space", "dual_path_2to3", false);
  s.validate();
  return s;
}

inline void write_subnet(KVConfig& kv, const SubnetConfig& cfg) {
  kv.set_int_list("subnet", "depths", cfg.depths);
  kv.set_int_list("subnet", "widths", cfg.widths);
  for (int j = 0; j < kStages; ++j)
    kv.set_int_list("subnet", "expansions_stage" + std::to_string(j + 1), cfg.expansions[j]);
  for (int j = 2; j < kStages; ++j) {
    std::vector<int64_t> flags;
    for (bool f : cfg.mhsa_on[j]) flags.push_back(f ? 1 : 0);
    kv.set_int_list("subnet", "mhsa_stage" + std::to_string(j + 1), flags);
  }
}

inline SubnetConfig read_subnet(const KVConfig& kv, const SearchSpace& space) {
  SubnetConfig cfg;
  cfg.depths = kv.get_int_list("subnet", "depths");
  cfg.widths = kv.get_int_list("subnet", "widths");
  cfg.expansions.resize(kStages);
  cfg.mhsa_on.resize(kStages);
  for (int j = 0; j < kStages; ++j)
    cfg.expansions[j] = kv.get_int_list("subnet", "expansions_stage" + std::to_string(j + 1));
  for (int j = 2; j < kStages; ++j)
    for (int64_t f : kv.get_int_list("subnet", "mhsa_stage" + std::to_string(j + 1)))
      cfg.mhsa_on[j].push_back(f != 0);
  validate_config(space, cfg);
  return cfg;
}

}  // namespace slimnas
