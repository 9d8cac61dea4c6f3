#include "ilmar/runconfig.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ilmar {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& raw,
                            const char* want) {
  throw std::invalid_argument("config key '" + key + "': cannot parse '" +
                              raw + "' as " + want);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

void RunConfig::set_num(const std::string& key, double v) {
  kv[key] = fmt_num(v);
}
void RunConfig::set_num(const std::string& key, int v) {
  kv[key] = std::to_string(v);
}
void RunConfig::set_num(const std::string& key, std::uint64_t v) {
  kv[key] = std::to_string(v);
}

std::string RunConfig::get_str(const std::string& key,
                               const std::string& def) const {
  const auto it = kv.find(key);
  return it == kv.end() ? def : it->second;
}

double RunConfig::get_double(const std::string& key, double def) const {
  const auto it = kv.find(key);
  if (it == kv.end()) return def;
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) bad_value(key, it->second, "a number");
    return v;
  } catch (const std::invalid_argument&) {
    bad_value(key, it->second, "a number");
  } catch (const std::out_of_range&) {
    bad_value(key, it->second, "a number");
  }
}

int RunConfig::get_int(const std::string& key, int def) const {
  const auto it = kv.find(key);
  if (it == kv.end()) return def;
  try {
    std::size_t pos = 0;
    const int v = std::stoi(it->second, &pos);
    if (pos != it->second.size()) bad_value(key, it->second, "an integer");
    return v;
  } catch (const std::invalid_argument&) {
    bad_value(key, it->second, "an integer");
  } catch (const std::out_of_range&) {
    bad_value(key, it->second, "an integer");
  }
}

std::uint64_t RunConfig::get_u64(const std::string& key,
                                 std::uint64_t def) const {
  const auto it = kv.find(key);
  if (it == kv.end()) return def;
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(it->second, &pos);
    if (pos != it->second.size())
      bad_value(key, it->second, "an unsigned integer");
    return v;
  } catch (const std::invalid_argument&) {
    bad_value(key, it->second, "an unsigned integer");
  } catch (const std::out_of_range&) {
    bad_value(key, it->second, "an unsigned integer");
  }
}

bool RunConfig::get_bool(const std::string& key, bool def) const {
  const auto it = kv.find(key);
  if (it == kv.end()) return def;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "a boolean");
}

std::vector<int> RunConfig::get_int_list(const std::string& key,
                                         const std::vector<int>& def) const {
  const auto it = kv.find(key);
  if (it == kv.end()) return def;
  std::vector<int> out;
  for (const std::string& tok : split_commas(it->second)) {
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      bad_value(key, it->second, "a comma-separated integer list");
    }
  }
  return out;
}

std::vector<double> RunConfig::get_double_list(
    const std::string& key, const std::vector<double>& def) const {
  const auto it = kv.find(key);
  if (it == kv.end()) return def;
  std::vector<double> out;
  for (const std::string& tok : split_commas(it->second)) {
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      bad_value(key, it->second, "a comma-separated number list");
    }
  }
  return out;
}

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::stringstream ss(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3)
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": empty key");
    c.kv[section.empty() ? key : section + "." + key] = value;
  }
  return c;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f)
    throw std::invalid_argument("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& c) {
  // std::map already sorts "section.key", so sections come out grouped.
  std::string out;
  std::string open_section;
  for (const auto& [key, value] : c.kv) {
    const auto dot = key.find('.');
    const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string bare = dot == std::string::npos ? key : key.substr(dot + 1);
    if (section != open_section) {
      if (!out.empty()) out += '\n';
      out += "[" + section + "]\n";
      open_section = section;
    }
    out += bare + " = " + value + "\n";
  }
  return out;
}

// ---- typed views ---------------------------------------------------------------------

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += fmt_num(v[i]);
  }
  return s;
}

}  // namespace

TrainConfig train_config_from(const RunConfig& c) {
  TrainConfig tc;
  tc.mode = train_mode_from_string(c.get_str("train.mode", to_string(tc.mode)));
  tc.mu = c.get_double("train.mu", tc.mu);
  tc.phi = c.get_double("train.phi", tc.phi);
  tc.alpha = c.get_double("train.alpha", tc.alpha);
  tc.beta = c.get_double("train.beta", tc.beta);
  tc.n1 = c.get_int("train.n1", tc.n1);
  tc.n2 = c.get_int("train.n2", tc.n2);
  tc.iterations = c.get_int("train.iterations", tc.iterations);
  tc.eval_interval = c.get_int("train.eval_interval", tc.eval_interval);
  tc.eval_episodes = c.get_int("train.eval_episodes", tc.eval_episodes);
  tc.diag_interval = c.get_int("train.diag_interval", tc.diag_interval);
  tc.checkpoint_interval =
      c.get_int("train.checkpoint_interval", tc.checkpoint_interval);
  tc.seed = c.get_u64("train.seed", tc.seed);
  tc.gp_coef = c.get_double("train.gp_coef", tc.gp_coef);
  const std::string ri = c.get_str("train.ranker_input", "expectation");
  if (ri == "expectation")
    tc.ranker_input = RankerInputMode::expectation;
  else if (ri == "sample")
    tc.ranker_input = RankerInputMode::sample;
  else
    throw std::invalid_argument(
        "config key 'train.ranker_input': expected expectation or sample");
  tc.optimizer = c.get_str("train.optimizer", tc.optimizer);
  tc.standardize_inputs =
      c.get_bool("train.standardize_inputs", tc.standardize_inputs);
  tc.policy_hidden = c.get_int_list("train.policy_hidden", tc.policy_hidden);
  tc.ranker_state_hidden =
      c.get_int_list("train.ranker_state_hidden", tc.ranker_state_hidden);
  tc.ranker_action_hidden =
      c.get_int_list("train.ranker_action_hidden", tc.ranker_action_hidden);
  tc.ranker_head_hidden =
      c.get_int_list("train.ranker_head_hidden", tc.ranker_head_hidden);
  tc.activation = c.get_str("train.activation", tc.activation);
  tc.clip_eps = c.get_double("train.clip_eps", tc.clip_eps);
  tc.resume = c.get_bool("train.resume", tc.resume);
  tc.validate();
  return tc;
}

void train_config_into(RunConfig& c, const TrainConfig& tc) {
  c.set("train.mode", to_string(tc.mode));
  c.set_num("train.mu", tc.mu);
  c.set_num("train.phi", tc.phi);
  c.set_num("train.alpha", tc.alpha);
  c.set_num("train.beta", tc.beta);
  c.set_num("train.n1", tc.n1);
  c.set_num("train.n2", tc.n2);
  c.set_num("train.iterations", tc.iterations);
  c.set_num("train.eval_interval", tc.eval_interval);
  c.set_num("train.eval_episodes", tc.eval_episodes);
  c.set_num("train.diag_interval", tc.diag_interval);
  c.set_num("train.checkpoint_interval", tc.checkpoint_interval);
  c.set_num("train.seed", tc.seed);
  c.set_num("train.gp_coef", tc.gp_coef);
  c.set("train.ranker_input",
        tc.ranker_input == RankerInputMode::expectation ? "expectation"
                                                        : "sample");
  c.set("train.optimizer", tc.optimizer);
  c.set("train.standardize_inputs", tc.standardize_inputs ? "true" : "false");
  c.set("train.policy_hidden", join_ints(tc.policy_hidden));
  c.set("train.ranker_state_hidden", join_ints(tc.ranker_state_hidden));
  c.set("train.ranker_action_hidden", join_ints(tc.ranker_action_hidden));
  c.set("train.ranker_head_hidden", join_ints(tc.ranker_head_hidden));
  c.set("train.activation", tc.activation);
  c.set_num("train.clip_eps", tc.clip_eps);
  c.set("train.resume", tc.resume ? "true" : "false");
}

MixtureSpec mixture_from(const RunConfig& c) {
  MixtureSpec m;
  m.n_expert_in_DE = c.get_int("data.n_expert_demo", m.n_expert_in_DE);
  m.n_expert_in_DS = c.get_int("data.n_expert_supplementary", m.n_expert_in_DS);
  m.suboptimal_ratio = c.get_double("data.suboptimal_ratio", m.suboptimal_ratio);
  m.tier_fractions =
      c.get_double_list("data.tier_fractions", m.tier_fractions);
  m.seed = static_cast<unsigned>(c.get_u64("data.seed", m.seed));
  return m;
}

void mixture_into(RunConfig& c, const MixtureSpec& m) {
  c.set_num("data.n_expert_demo", m.n_expert_in_DE);
  c.set_num("data.n_expert_supplementary", m.n_expert_in_DS);
  c.set_num("data.suboptimal_ratio", m.suboptimal_ratio);
  c.set("data.tier_fractions", join_doubles(m.tier_fractions));
  c.set_num("data.seed", static_cast<std::uint64_t>(m.seed));
}

EnvSpec env_from_task(const std::string& task) {
  if (task == "grid") return GridWorldSpec{};
  if (task == "pointmass") return LinPointMassSpec::make_default();
  throw std::invalid_argument("unknown task '" + task +
                              "' (expected grid or pointmass)");
}

std::string task_name(const EnvSpec& e) {
  return std::holds_alternative<GridWorldSpec>(e) ? "grid" : "pointmass";
}

}  // namespace ilmar
