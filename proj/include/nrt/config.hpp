#pragma once

/**
 * Training configuration: flat `key = value` text, '#' comments, unknown keys
 * rejected. The config digest covers every semantic key except total_steps so
 * a checkpoint can be resumed with an extended step budget but never under a
 * silently different setup.
 */

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

#include "nrt/rewards.hpp"

namespace nrt {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class PolicyKind { Tabular, Neural };
enum class OptimizerKind { Sgd, Adam };

struct TrainingConfig {
  Scheme scheme = Scheme::GM;
  PolicyKind policy = PolicyKind::Neural;
  int tabular_order = 1;
  int embed_dim = 6;
  int hidden_dim = 24;
  int context_window = 6;

  int k_traces = 8;            // K, Table-4 default
  int batch_size = 4;          // B prompts per step
  int minibatch_size = 32;     // trace samples per inner update, rounded to prompt groups
  int passes_per_step = 2;     // mini-batch epochs over one rollout
  double learning_rate = -1.0; // <= 0: resolved per policy kind (1e-2 tabular, 1e-3 neural)
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lambda_format = 0.3;
  int max_trace_len = 6;
  double temperature = 1.0;
  double clip_lo = 0.2;
  double clip_hi = 0.28;
  int total_steps = 2000;
  std::uint64_t seed = 1;
  int sync_period = 1;         // pi_old sync, in steps
  int eval_period = 50;
  int eval_k = 4;              // traces per eval prompt
  int warmup_steps = 150;      // supervised answer warm-up, empty traces
  double warmup_lr = -1.0;     // <= 0: same resolution as learning_rate
  bool ratio_on_token_term = false;

  double resolved_lr() const {
    if (learning_rate >= 0.0) return learning_rate;
    return policy == PolicyKind::Tabular ? 1e-2 : 1e-3;
  }
  double resolved_warmup_lr() const { return warmup_lr >= 0.0 ? warmup_lr : resolved_lr(); }

  void validate() const {
    if (k_traces < 2) throw ConfigError("config: k_traces must be >= 2");
    if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    if (minibatch_size < 1 || minibatch_size > batch_size * k_traces)
      throw ConfigError("config: minibatch_size must be in [1, batch_size*k_traces]");
    if (passes_per_step < 1) throw ConfigError("config: passes_per_step must be >= 1");
    if (learning_rate < 0.0 && learning_rate != -1.0)
      throw ConfigError("config: learning_rate must be >= 0 (or unset)");
    if (max_trace_len < 1) throw ConfigError("config: max_trace_len must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("config: temperature must be > 0");
    if (clip_lo < 0.0 || clip_hi < 0.0) throw ConfigError("config: clip ratios must be >= 0");
    if (total_steps < 0) throw ConfigError("config: total_steps must be >= 0");
    if (sync_period < 1 || eval_period < 1)
      throw ConfigError("config: periods must be >= 1");
    if (eval_k < 1) throw ConfigError("config: eval_k must be >= 1");
    if (warmup_steps < 0) throw ConfigError("config: warmup_steps must be >= 0");
    if (tabular_order < 0) throw ConfigError("config: tabular_order must be >= 0");
    if (embed_dim < 1 || hidden_dim < 1 || context_window < 1)
      throw ConfigError("config: neural dimensions must be >= 1");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return d;
  } catch (...) {
    throw ConfigError("config: bad numeric value for " + key + ": '" + v + "'");
  }
}

inline long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return i;
  } catch (...) {
    throw ConfigError("config: bad integer value for " + key + ": '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config: bad boolean value for " + key + ": '" + v + "'");
}

}  // namespace detail

inline void apply_config_entry(TrainingConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_int;
  if (key == "scheme") {
    auto s = parse_scheme(value);
    if (!s) throw ConfigError("config: unknown scheme '" + value + "'");
    c.scheme = *s;
  } else if (key == "policy") {
    if (value == "tabular") c.policy = PolicyKind::Tabular;
    else if (value == "neural") c.policy = PolicyKind::Neural;
    else throw ConfigError("config: unknown policy kind '" + value + "'");
  } else if (key == "optimizer") {
    if (value == "sgd") c.optimizer = OptimizerKind::Sgd;
    else if (value == "adam") c.optimizer = OptimizerKind::Adam;
    else throw ConfigError("config: unknown optimizer '" + value + "'");
  } else if (key == "tabular_order") c.tabular_order = static_cast<int>(parse_int(key, value));
  else if (key == "embed_dim") c.embed_dim = static_cast<int>(parse_int(key, value));
  else if (key == "hidden_dim") c.hidden_dim = static_cast<int>(parse_int(key, value));
  else if (key == "context_window") c.context_window = static_cast<int>(parse_int(key, value));
  else if (key == "k_traces") c.k_traces = static_cast<int>(parse_int(key, value));
  else if (key == "batch_size") c.batch_size = static_cast<int>(parse_int(key, value));
  else if (key == "minibatch_size") c.minibatch_size = static_cast<int>(parse_int(key, value));
  else if (key == "passes_per_step") c.passes_per_step = static_cast<int>(parse_int(key, value));
  else if (key == "learning_rate") c.learning_rate = parse_double(key, value);
  else if (key == "lambda_format") c.lambda_format = parse_double(key, value);
  else if (key == "max_trace_len") c.max_trace_len = static_cast<int>(parse_int(key, value));
  else if (key == "temperature") c.temperature = parse_double(key, value);
  else if (key == "clip_lo") c.clip_lo = parse_double(key, value);
  else if (key == "clip_hi") c.clip_hi = parse_double(key, value);
  else if (key == "total_steps") c.total_steps = static_cast<int>(parse_int(key, value));
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(key, value));
  else if (key == "sync_period") c.sync_period = static_cast<int>(parse_int(key, value));
  else if (key == "eval_period") c.eval_period = static_cast<int>(parse_int(key, value));
  else if (key == "eval_k") c.eval_k = static_cast<int>(parse_int(key, value));
  else if (key == "warmup_steps") c.warmup_steps = static_cast<int>(parse_int(key, value));
  else if (key == "warmup_lr") c.warmup_lr = parse_double(key, value);
  else if (key == "ratio_on_token_term") c.ratio_on_token_term = parse_bool(key, value);
  else throw ConfigError("config: unknown key '" + key + "'");
}

inline TrainingConfig parse_config_text(std::istream& in) {
  TrainingConfig c;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = detail::trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(stripped).substr(0, eq));
    const std::string value = detail::trim(std::string_view(stripped).substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    apply_config_entry(c, key, value);
  }
  return c;
}

inline TrainingConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  return parse_config_text(in);
}

namespace detail {
inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace detail

// Canonical serialization; `with_step_budget` controls whether total_steps is
// included (off for digests, on for files).
inline std::string config_to_text(const TrainingConfig& c, bool with_step_budget = true) {
  std::ostringstream out;
  out << "batch_size = " << c.batch_size << "\n";
  out << "clip_hi = " << detail::fmt_double(c.clip_hi) << "\n";
  out << "clip_lo = " << detail::fmt_double(c.clip_lo) << "\n";
  out << "context_window = " << c.context_window << "\n";
  out << "embed_dim = " << c.embed_dim << "\n";
  out << "eval_k = " << c.eval_k << "\n";
  out << "eval_period = " << c.eval_period << "\n";
  out << "hidden_dim = " << c.hidden_dim << "\n";
  out << "k_traces = " << c.k_traces << "\n";
  out << "lambda_format = " << detail::fmt_double(c.lambda_format) << "\n";
  out << "learning_rate = " << detail::fmt_double(c.learning_rate) << "\n";
  out << "max_trace_len = " << c.max_trace_len << "\n";
  out << "minibatch_size = " << c.minibatch_size << "\n";
  out << "optimizer = " << (c.optimizer == OptimizerKind::Sgd ? "sgd" : "adam") << "\n";
  out << "passes_per_step = " << c.passes_per_step << "\n";
  out << "policy = " << (c.policy == PolicyKind::Tabular ? "tabular" : "neural") << "\n";
  out << "ratio_on_token_term = " << (c.ratio_on_token_term ? "true" : "false") << "\n";
  out << "scheme = " << scheme_name(c.scheme) << "\n";
  out << "seed = " << c.seed << "\n";
  out << "sync_period = " << c.sync_period << "\n";
  out << "tabular_order = " << c.tabular_order << "\n";
  out << "temperature = " << detail::fmt_double(c.temperature) << "\n";
  if (with_step_budget) out << "total_steps = " << c.total_steps << "\n";
  out << "warmup_lr = " << detail::fmt_double(c.warmup_lr) << "\n";
  out << "warmup_steps = " << c.warmup_steps << "\n";
  return out.str();
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_digest(const TrainingConfig& c) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(config_to_text(c, false))));
  return buf;
}

}  // namespace nrt
