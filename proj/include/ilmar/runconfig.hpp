#pragma once

// INI-style run configuration: sections of key = value pairs flattened to
// "section.key" strings, typed getters with defaults, and a serializer that
// echoes the fully resolved configuration so any run can be reproduced from
// its own echo alone.

#include "ilmar/dataset.hpp"
#include "ilmar/train.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ilmar {

struct RunConfig {
  std::map<std::string, std::string> kv;  // "section.key" -> raw value text

  bool has(const std::string& key) const { return kv.count(key) > 0; }
  void set(const std::string& key, const std::string& value) {
    kv[key] = value;
  }
  void set_num(const std::string& key, double v);
  void set_num(const std::string& key, int v);
  void set_num(const std::string& key, std::uint64_t v);

  // Typed getters fall back to the default when the key is absent and throw
  // (citing the key) when the stored text does not parse.
  std::string get_str(const std::string& key, const std::string& def) const;
  double get_double(const std::string& key, double def) const;
  int get_int(const std::string& key, int def) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t def) const;
  bool get_bool(const std::string& key, bool def) const;
  std::vector<int> get_int_list(const std::string& key,
                                const std::vector<int>& def) const;
  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& def) const;
};

// Parses "[section]" headers and "key = value" lines; '#' and ';' start
// comments; errors cite the 1-based line.
RunConfig parse_config(const std::string& text);
RunConfig load_config_file(const std::string& path);

// Sections sorted, keys sorted within; parse(serialize(c)) == c.
std::string serialize_config(const RunConfig& c);

// ---- typed views ---------------------------------------------------------------

// Reads the [train] section into a TrainConfig (defaults where absent).
TrainConfig train_config_from(const RunConfig& c);
// Writes every TrainConfig field back, making the echo self-contained.
void train_config_into(RunConfig& c, const TrainConfig& tc);

// [data] section <-> mixture parameters.
MixtureSpec mixture_from(const RunConfig& c);
void mixture_into(RunConfig& c, const MixtureSpec& m);

// "grid" | "pointmass".
EnvSpec env_from_task(const std::string& task);
std::string task_name(const EnvSpec& e);

}  // namespace ilmar
