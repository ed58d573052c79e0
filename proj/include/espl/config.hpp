#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "espl/errors.hpp"
#include "espl/genetic.hpp"
#include "espl/policy.hpp"
#include "espl/population.hpp"
#include "espl/rating.hpp"
#include "espl/reflect.hpp"

// Every hyperparameter of the training loop in one place, with the defaults
// the loop was designed around, plus a flat `key = value` file format and a
// stable hash so checkpoints can detect config drift.

namespace espl {

struct EsplConfig {
  std::uint64_t seed = 0;
  int iterations = 300;
  std::string env = "synthetic"; // synthetic | http
  std::string problems_path = "assets/problems.jsonl";
  std::string fixture_path = "assets/fixture.json";
  std::string root_prompt =
      "You are a careful problem solver. Read the task, then follow the "
      "numbered principles below.\n\n"
      "1. Work through the problem step by step before answering.";

  int batch_problems = 10; // B
  int window_k = 10;       // K
  bool rl_enabled = true;
  bool evolution_enabled = true;
  int checkpoint_interval = 0; // iterations between checkpoints; 0 = final only
  int max_iteration_retries = 2;
  int early_stop_patience = 0; // 0 disables the plateau check
  double early_stop_min_delta = 1e-3;

  SelectionPolicy selection;  // M, lambda, temperature, mode
  RatingConfig rating;
  GeneticConfig genetic;
  RlConfig rl;                // alpha, kl_beta, N
  ReflectorConfig reflect;

  void validate() const {
    if (iterations < 0) throw ConfigError("config: iterations must be >= 0");
    if (batch_problems < 1) throw ConfigError("config: B must be >= 1");
    if (window_k < 1) throw ConfigError("config: K must be >= 1");
    if (env != "synthetic" && env != "http")
      throw ConfigError("config: env must be 'synthetic' or 'http'");
    if (max_iteration_retries < 0)
      throw ConfigError("config: max_iteration_retries must be >= 0");
    if (root_prompt.empty()) throw ConfigError("config: root prompt is empty");
    if (selection.m < 2)
      throw ConfigError("config: M must be >= 2 so tournaments can rank");
    selection.validate();
    rating.validate();
    genetic.validate();
    rl.validate();
    reflect.validate();
    if (genetic.k_ops != reflect.k_ops)
      throw ConfigError("config: genetic and reflect k_ops diverged");
  }
};

namespace detail {

inline std::string escape_newlines(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\n') out += "\\n";
    else if (c == '\\') out += "\\\\";
    else out += c;
  }
  return out;
}

inline std::string unescape_newlines(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      if (s[i + 1] == 'n') { out += '\n'; ++i; continue; }
      if (s[i + 1] == '\\') { out += '\\'; ++i; continue; }
    }
    out += s[i];
  }
  return out;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  std::size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

} // namespace detail

// Canonical serialization: fixed key order, one `key = value` pair per line.
inline std::vector<std::pair<std::string, std::string>>
config_to_kv(const EsplConfig& c) {
  using detail::fmt_double;
  std::vector<std::pair<std::string, std::string>> kv;
  kv.emplace_back("seed", std::to_string(c.seed));
  kv.emplace_back("iterations", std::to_string(c.iterations));
  kv.emplace_back("env", c.env);
  kv.emplace_back("problems", c.problems_path);
  kv.emplace_back("fixture", c.fixture_path);
  kv.emplace_back("root_prompt", detail::escape_newlines(c.root_prompt));
  kv.emplace_back("B", std::to_string(c.batch_problems));
  kv.emplace_back("K", std::to_string(c.window_k));
  kv.emplace_back("M", std::to_string(c.selection.m));
  kv.emplace_back("N", std::to_string(c.rl.group_size));
  kv.emplace_back("lambda", fmt_double(c.selection.lambda));
  kv.emplace_back("rl_enabled", c.rl_enabled ? "true" : "false");
  kv.emplace_back("evolution_enabled", c.evolution_enabled ? "true" : "false");
  kv.emplace_back("checkpoint_interval", std::to_string(c.checkpoint_interval));
  kv.emplace_back("max_iteration_retries", std::to_string(c.max_iteration_retries));
  kv.emplace_back("early_stop.patience", std::to_string(c.early_stop_patience));
  kv.emplace_back("early_stop.min_delta", fmt_double(c.early_stop_min_delta));
  kv.emplace_back("selection.mode",
                  c.selection.mode == SelectionPolicy::Mode::simplified
                      ? "simplified"
                      : "softmax");
  kv.emplace_back("selection.temperature", fmt_double(c.selection.temperature));
  kv.emplace_back("rating.mu0", fmt_double(c.rating.mu0));
  kv.emplace_back("rating.sigma0", fmt_double(c.rating.sigma0));
  kv.emplace_back("rating.perf_beta", fmt_double(c.rating.perf_beta));
  kv.emplace_back("rating.tau", fmt_double(c.rating.tau));
  kv.emplace_back("rating.p_draw", fmt_double(c.rating.p_draw));
  kv.emplace_back("rating.ep_max_sweeps", std::to_string(c.rating.ep_max_sweeps));
  kv.emplace_back("rating.ep_tolerance", fmt_double(c.rating.ep_tolerance));
  kv.emplace_back("genetic.delta_sigma", fmt_double(c.genetic.delta_sigma));
  kv.emplace_back("genetic.p_crossover", fmt_double(c.genetic.p_crossover));
  kv.emplace_back("k_ops", std::to_string(c.genetic.k_ops));
  kv.emplace_back("genetic.child_sigma_mode",
                  c.genetic.child_sigma_mode == ChildSigmaMode::variance_additive
                      ? "variance_additive"
                      : "additive");
  kv.emplace_back("rl.alpha", fmt_double(c.rl.alpha));
  kv.emplace_back("rl.kl_beta", fmt_double(c.rl.kl_beta));
  kv.emplace_back("reflect.backend",
                  c.reflect.backend == ReflectorConfig::Backend::mock ? "mock"
                                                                      : "http");
  kv.emplace_back("reflect.endpoint", c.reflect.endpoint);
  kv.emplace_back("reflect.model", c.reflect.model);
  kv.emplace_back("reflect.temperature", fmt_double(c.reflect.temperature));
  kv.emplace_back("reflect.max_retries", std::to_string(c.reflect.max_retries));
  kv.emplace_back("reflect.timeout_seconds", fmt_double(c.reflect.timeout_seconds));
  kv.emplace_back("reflect.backoff_initial_seconds",
                  fmt_double(c.reflect.backoff_initial_seconds));
  kv.emplace_back("reflect.max_in_flight", std::to_string(c.reflect.max_in_flight));
  kv.emplace_back("reflect.api_key_env", c.reflect.api_key_env);
  kv.emplace_back("reflect.max_principle_chars",
                  std::to_string(c.reflect.max_principle_chars));
  kv.emplace_back("reflect.templates_dir", c.reflect.templates_dir);
  return kv;
}

inline void config_apply_kv(EsplConfig& c, const std::string& key,
                            const std::string& value) {
  auto as_int = [&](const std::string& v) {
    try {
      return std::stoi(v);
    } catch (...) {
      throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
    }
  };
  auto as_u64 = [&](const std::string& v) {
    try {
      return static_cast<std::uint64_t>(std::stoull(v));
    } catch (...) {
      throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
    }
  };
  auto as_double = [&](const std::string& v) {
    try {
      return std::stod(v);
    } catch (...) {
      throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
    }
  };
  auto as_bool = [&](const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
  };

  if (key == "seed") c.seed = as_u64(value);
  else if (key == "iterations") c.iterations = as_int(value);
  else if (key == "env") c.env = value;
  else if (key == "problems") c.problems_path = value;
  else if (key == "fixture") c.fixture_path = value;
  else if (key == "root_prompt") c.root_prompt = detail::unescape_newlines(value);
  else if (key == "B") c.batch_problems = as_int(value);
  else if (key == "K") c.window_k = as_int(value);
  else if (key == "M") c.selection.m = as_int(value);
  else if (key == "N") c.rl.group_size = as_int(value);
  else if (key == "lambda") c.selection.lambda = as_double(value);
  else if (key == "rl_enabled") c.rl_enabled = as_bool(value);
  else if (key == "evolution_enabled") c.evolution_enabled = as_bool(value);
  else if (key == "checkpoint_interval") c.checkpoint_interval = as_int(value);
  else if (key == "max_iteration_retries") c.max_iteration_retries = as_int(value);
  else if (key == "early_stop.patience") c.early_stop_patience = as_int(value);
  else if (key == "early_stop.min_delta") c.early_stop_min_delta = as_double(value);
  else if (key == "selection.mode") {
    if (value == "simplified") c.selection.mode = SelectionPolicy::Mode::simplified;
    else if (value == "softmax") c.selection.mode = SelectionPolicy::Mode::softmax;
    else throw ConfigError("config: unknown selection mode '" + value + "'");
  } else if (key == "selection.temperature") c.selection.temperature = as_double(value);
  else if (key == "rating.mu0") c.rating.mu0 = as_double(value);
  else if (key == "rating.sigma0") c.rating.sigma0 = as_double(value);
  else if (key == "rating.perf_beta") c.rating.perf_beta = as_double(value);
  else if (key == "rating.tau") c.rating.tau = as_double(value);
  else if (key == "rating.p_draw") c.rating.p_draw = as_double(value);
  else if (key == "rating.ep_max_sweeps") c.rating.ep_max_sweeps = as_int(value);
  else if (key == "rating.ep_tolerance") c.rating.ep_tolerance = as_double(value);
  else if (key == "genetic.delta_sigma") c.genetic.delta_sigma = as_double(value);
  else if (key == "genetic.p_crossover") c.genetic.p_crossover = as_double(value);
  else if (key == "k_ops") c.genetic.k_ops = c.reflect.k_ops = as_int(value);
  else if (key == "genetic.child_sigma_mode") {
    if (value == "variance_additive")
      c.genetic.child_sigma_mode = ChildSigmaMode::variance_additive;
    else if (value == "additive")
      c.genetic.child_sigma_mode = ChildSigmaMode::additive;
    else throw ConfigError("config: unknown child sigma mode '" + value + "'");
  } else if (key == "rl.alpha") c.rl.alpha = as_double(value);
  else if (key == "rl.kl_beta") c.rl.kl_beta = as_double(value);
  else if (key == "reflect.backend") {
    if (value == "mock") c.reflect.backend = ReflectorConfig::Backend::mock;
    else if (value == "http") c.reflect.backend = ReflectorConfig::Backend::http;
    else throw ConfigError("config: unknown reflect backend '" + value + "'");
  } else if (key == "reflect.endpoint") c.reflect.endpoint = value;
  else if (key == "reflect.model") c.reflect.model = value;
  else if (key == "reflect.temperature") c.reflect.temperature = as_double(value);
  else if (key == "reflect.max_retries") c.reflect.max_retries = as_int(value);
  else if (key == "reflect.timeout_seconds")
    c.reflect.timeout_seconds = as_double(value);
  else if (key == "reflect.backoff_initial_seconds")
    c.reflect.backoff_initial_seconds = as_double(value);
  else if (key == "reflect.max_in_flight") c.reflect.max_in_flight = as_int(value);
  else if (key == "reflect.api_key_env") c.reflect.api_key_env = value;
  else if (key == "reflect.max_principle_chars")
    c.reflect.max_principle_chars = as_int(value);
  else if (key == "reflect.templates_dir") c.reflect.templates_dir = value;
  else throw ConfigError("config: unknown key '" + key + "'");
}

inline EsplConfig config_from_kv(
    const std::vector<std::pair<std::string, std::string>>& kv) {
  EsplConfig c;
  for (const auto& [key, value] : kv) config_apply_kv(c, key, value);
  return c;
}

inline EsplConfig load_config(std::istream& in) {
  EsplConfig c;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected 'key = value'");
    config_apply_kv(c, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  return c;
}

inline EsplConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  return load_config(in);
}

inline std::string config_to_text(const EsplConfig& c) {
  std::string out;
  for (const auto& [key, value] : config_to_kv(c)) {
    out += key;
    out += " = ";
    out += value;
    out += '\n';
  }
  return out;
}

inline std::string config_hash(const EsplConfig& c) {
  std::uint64_t h = fnv1a(config_to_text(c));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

} // namespace espl
