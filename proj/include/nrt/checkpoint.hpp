#pragma once

/**
 * Checkpoint files.
 *
 * Policy checkpoints are text: one architecture descriptor line, then theta
 * entries one per line printed with 17 significant digits so the decimal
 * round trip is bit-exact. Trainer checkpoints embed the policy, the pi_old
 * snapshot, the reference (warm-up) policy, optimizer moments, and the
 * digests needed to refuse a resume under a different configuration.
 */

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nrt/config.hpp"
#include "nrt/neural_policy.hpp"
#include "nrt/policy.hpp"
#include "nrt/tabular_policy.hpp"

namespace nrt {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::map<std::string, int> parse_arch_fields(const std::string& line, std::string& kind) {
  std::istringstream in(line);
  in >> kind;
  std::map<std::string, int> fields;
  std::string tok;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw CheckpointError("bad architecture descriptor: " + line);
    fields[tok.substr(0, eq)] = std::stoi(tok.substr(eq + 1));
  }
  return fields;
}

inline double parse_checkpoint_double(const std::string& line) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(line, &pos);
    if (pos != line.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw CheckpointError("bad parameter value: '" + line + "'");
  }
}

}  // namespace detail

inline std::unique_ptr<Policy> make_policy_from_descriptor(const std::string& descriptor) {
  std::string kind;
  const auto f = detail::parse_arch_fields(descriptor, kind);
  const auto need = [&](const char* key) {
    const auto it = f.find(key);
    if (it == f.end()) throw CheckpointError(std::string("architecture missing field ") + key);
    return it->second;
  };
  if (kind == "tabular")
    return std::make_unique<TabularPolicy>(build_vocabulary(need("alphabet")), need("order"));
  if (kind == "neural")
    return std::make_unique<NeuralPolicy>(build_vocabulary(need("alphabet")), need("embed"),
                                          need("hidden"), need("window"));
  throw CheckpointError("unknown policy kind: " + kind);
}

inline void write_policy(std::ostream& out, const Policy& policy) {
  out << policy.arch_descriptor() << "\n";
  char buf[64];
  for (double v : policy.params()) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << buf << "\n";
  }
}

inline std::unique_ptr<Policy> read_policy(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError("checkpoint truncated: missing descriptor");
  auto policy = make_policy_from_descriptor(line);
  auto theta = policy->params();
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (!std::getline(in, line))
      throw CheckpointError("checkpoint truncated at parameter " + std::to_string(i));
    theta[i] = detail::parse_checkpoint_double(line);
  }
  return policy;
}

inline void save_policy_checkpoint(const Policy& policy, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot open for writing: " + path);
  write_policy(out, policy);
  if (!out) throw CheckpointError("write failed: " + path);
}

inline std::unique_ptr<Policy> load_policy_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open for reading: " + path);
  return read_policy(in);
}

// ---------------------------------------------------------------------------
// Trainer checkpoints
// ---------------------------------------------------------------------------

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Adam;
  long long step_count = 0;  // inner updates taken
  std::vector<double> m;     // first moment (adam)
  std::vector<double> v;     // second moment (adam)

  void init(OptimizerKind k, std::size_t dim) {
    kind = k;
    step_count = 0;
    if (kind == OptimizerKind::Adam) {
      m.assign(dim, 0.0);
      v.assign(dim, 0.0);
    } else {
      m.clear();
      v.clear();
    }
  }
};

struct CheckpointRecord {
  std::string config_digest;
  int step = 0;  // completed training steps
  long long snapshot_version = 0;
  std::string rng_digest;
  double last_eval = std::numeric_limits<double>::quiet_NaN();  // carried eval metric
  std::unique_ptr<Policy> policy;
  std::unique_ptr<Policy> old_policy;
  std::unique_ptr<Policy> reference_policy;  // post-warm-up baseline for analysis
  OptimizerState optimizer;
};

inline std::string rng_digest_for(std::uint64_t seed, int step) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "seed=%" PRIu64 " step=%d", seed, step);
  char out[32];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(fnv1a64(buf)));
  return out;
}

inline void save_checkpoint(const CheckpointRecord& rec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot open for writing: " + path);
  out << "nrt-checkpoint v1\n";
  out << "config_digest " << rec.config_digest << "\n";
  out << "step " << rec.step << "\n";
  out << "snapshot_version " << rec.snapshot_version << "\n";
  out << "rng_digest " << rec.rng_digest << "\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", rec.last_eval);
  out << "last_eval " << buf << "\n";
  out << "optimizer " << (rec.optimizer.kind == OptimizerKind::Sgd ? "sgd" : "adam") << "\n";
  out << "optimizer_steps " << rec.optimizer.step_count << "\n";
  const auto dump_vec = [&](const char* tag, const std::vector<double>& v) {
    out << "[" << tag << "] " << v.size() << "\n";
    for (double x : v) {
      std::snprintf(buf, sizeof(buf), "%.17g", x);
      out << buf << "\n";
    }
  };
  out << "[policy]\n";
  write_policy(out, *rec.policy);
  out << "[old_policy]\n";
  write_policy(out, *rec.old_policy);
  out << "[reference_policy]\n";
  write_policy(out, *rec.reference_policy);
  if (rec.optimizer.kind == OptimizerKind::Adam) {
    dump_vec("adam_m", rec.optimizer.m);
    dump_vec("adam_v", rec.optimizer.v);
  }
  out << "[end]\n";
  if (!out) throw CheckpointError("write failed: " + path);
}

inline CheckpointRecord load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "nrt-checkpoint v1")
    throw CheckpointError("not a trainer checkpoint: " + path);

  CheckpointRecord rec;
  const auto expect_kv = [&](const char* key) {
    if (!std::getline(in, line)) throw CheckpointError("checkpoint truncated");
    std::istringstream ls(line);
    std::string k, v;
    ls >> k >> v;
    if (k != key) throw CheckpointError("expected key '" + std::string(key) + "', got '" + k + "'");
    return v;
  };
  rec.config_digest = expect_kv("config_digest");
  rec.step = std::stoi(expect_kv("step"));
  rec.snapshot_version = std::stoll(expect_kv("snapshot_version"));
  rec.rng_digest = expect_kv("rng_digest");
  rec.last_eval = detail::parse_checkpoint_double(expect_kv("last_eval"));
  const std::string opt = expect_kv("optimizer");
  rec.optimizer.kind = (opt == "sgd") ? OptimizerKind::Sgd : OptimizerKind::Adam;
  rec.optimizer.step_count = std::stoll(expect_kv("optimizer_steps"));

  const auto expect_tag = [&](const std::string& tag) {
    if (!std::getline(in, line)) throw CheckpointError("checkpoint truncated before " + tag);
    if (line.rfind("[" + tag + "]", 0) != 0)
      throw CheckpointError("expected section [" + tag + "], got '" + line + "'");
    return line;
  };
  expect_tag("policy");
  rec.policy = read_policy(in);
  expect_tag("old_policy");
  rec.old_policy = read_policy(in);
  expect_tag("reference_policy");
  rec.reference_policy = read_policy(in);
  if (rec.optimizer.kind == OptimizerKind::Adam) {
    const auto read_vec = [&](const std::string& tag, std::vector<double>& v) {
      const std::string header = expect_tag(tag);
      std::istringstream hs(header.substr(tag.size() + 2));
      std::size_t n = 0;
      hs >> n;
      v.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        if (!std::getline(in, line)) throw CheckpointError("checkpoint truncated in " + tag);
        v[i] = detail::parse_checkpoint_double(line);
      }
    };
    read_vec("adam_m", rec.optimizer.m);
    read_vec("adam_v", rec.optimizer.v);
  }
  expect_tag("end");
  return rec;
}

}  // namespace nrt
