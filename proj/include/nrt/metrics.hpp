#pragma once

/**
 * Training diagnostics.
 *
 * Per-step rows track trace diversity (entropy), trace length, reward and
 * advantage health, answer likelihood, and the format loss. Trace entropy is
 * the mean full-vocabulary predictive entropy at every sampled trace decision
 * (including the natural END decision, so an immediate-END policy has a
 * defined, collapsing entropy; forced terminations contribute no END
 * decision). The token-probability analysis buckets ground-truth answer
 * tokens by their baseline (reference-policy, empty-trace) entropy and
 * reports the mean trained/baseline probability ratio per bucket.
 */

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nrt/config.hpp"
#include "nrt/corpus.hpp"
#include "nrt/policy.hpp"
#include "nrt/rewards.hpp"

namespace nrt {

struct MetricsRow {
  int step = 0;
  double mean_trace_len = 0.0;
  double median_trace_len = 0.0;
  double mean_trace_entropy = 0.0;
  double mean_reward = 0.0;
  double mean_clipped_reward = 0.0;
  double degenerate_frac = 0.0;
  double forced_end_frac = 0.0;
  double mean_answer_logprob = 0.0;
  double format_loss = 0.0;
  double eval_answer_logprob = 0.0;
};

inline const char* kMetricsCsvHeader =
    "step,mean_trace_len,median_trace_len,mean_trace_entropy,mean_reward,mean_clipped_reward,"
    "degenerate_frac,forced_end_frac,mean_answer_logprob,format_loss,eval_answer_logprob";

inline std::string metrics_row_to_csv(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g",
                r.step, r.mean_trace_len, r.median_trace_len, r.mean_trace_entropy, r.mean_reward,
                r.mean_clipped_reward, r.degenerate_frac, r.forced_end_frac, r.mean_answer_logprob,
                r.format_loss, r.eval_answer_logprob);
  return buf;
}

struct MetricsIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Streaming writer, flushed per row so an interrupted run leaves a parseable
// prefix.
class MetricsCsvWriter {
 public:
  explicit MetricsCsvWriter(const std::string& path) : path_(path), out_(path) {
    if (!out_) throw MetricsIoError("cannot open metrics file: " + path);
    out_ << kMetricsCsvHeader << "\n";
    out_.flush();
  }
  void write(const MetricsRow& row) {
    out_ << metrics_row_to_csv(row) << "\n";
    out_.flush();
    if (!out_) throw MetricsIoError("metrics write failed: " + path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
};

inline void emit_metrics(std::span<const MetricsRow> rows, const std::string& path) {
  MetricsCsvWriter w(path);
  for (const auto& r : rows) w.write(r);
}

// Mean predictive entropy over a sampled trace's decisions, under the policy
// that generated it.
inline double trace_decision_entropy(const Policy& policy, std::span<const TokenId> question,
                                     const TraceSample& sample) {
  std::vector<TokenId> ctx = trace_prefix(question);
  double total = 0.0;
  std::size_t decisions = 0;
  for (TokenId t : sample.tokens) {
    total += policy.entropy(ctx);
    ++decisions;
    ctx.push_back(t);
  }
  if (!sample.end_forced) {
    total += policy.entropy(ctx);
    ++decisions;
  }
  return decisions ? total / static_cast<double>(decisions) : 0.0;
}

// ---------------------------------------------------------------------------
// Ground-truth token probability analysis
// ---------------------------------------------------------------------------

struct TokenProbRow {
  TokenId token_id = 0;
  int position = 0;  // answer position i
  double baseline_entropy = 0.0;
  int bucket = 0;
  double prob_ratio = 0.0;  // mean trained prob / baseline prob (unclamped)
};

struct TokenProbAnalysis {
  std::vector<double> bucket_edges;  // ascending; bucket b covers (edge[b-1], edge[b]]
  std::vector<TokenProbRow> rows;
  std::vector<double> bucket_mean_ratio;
  std::vector<std::size_t> bucket_count;
  double median_baseline_entropy = 0.0;
};

namespace detail {

inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

}  // namespace detail

// Default bucket edges: the fixed 0.125 low-entropy split plus the empirical
// quartiles of the baseline entropy distribution.
inline std::vector<double> default_bucket_edges(std::vector<double> baseline_entropies) {
  std::sort(baseline_entropies.begin(), baseline_entropies.end());
  std::vector<double> edges = {0.125, detail::quantile_sorted(baseline_entropies, 0.25),
                               detail::quantile_sorted(baseline_entropies, 0.5),
                               detail::quantile_sorted(baseline_entropies, 0.75)};
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

inline int bucket_of(double h, std::span<const double> edges) {
  int b = 0;
  for (double e : edges)
    if (h > e) ++b;
  return b;
}

/**
 * For each eval answer token: baseline entropy and probability from the
 * reference policy with an empty trace, and the mean trace-conditioned
 * probability under the trained policy over k_eval sampled traces
 * (k_eval = 0 evaluates the trained policy with empty traces too).
 */
inline TokenProbAnalysis token_prob_analysis(const Policy& trained, const Policy& reference,
                                             const Dataset& data, int k_eval, int max_trace_len,
                                             std::uint64_t seed) {
  if (data.eval_count() == 0) throw std::invalid_argument("token_prob_analysis: empty eval set");

  TokenProbAnalysis a;
  std::vector<double> entropies;
  TokenDistribution dist;

  for (std::size_t e = 0; e < data.eval_count(); ++e) {
    const QAPair& pair = data.eval_pair(e);
    const std::span<const TokenId> q{pair.question};

    // Baseline pass: reference policy, empty trace.
    std::vector<double> h_base(pair.answer.size());
    std::vector<double> p_base(pair.answer.size());
    {
      std::vector<TokenId> ctx = answer_prefix(q, {});
      for (std::size_t i = 0; i < pair.answer.size(); ++i) {
        reference.forward_into(ctx, dist);
        double h = 0.0;
        for (double p : dist.prob)
          if (p > 0.0) h -= p * std::log(p);
        h_base[i] = h;
        p_base[i] = dist.prob[static_cast<std::size_t>(pair.answer[i])];
        ctx.push_back(pair.answer[i]);
      }
    }

    // Trained pass: mean probability over sampled traces (or empty trace).
    std::vector<double> p_mean(pair.answer.size(), 0.0);
    const int draws = std::max(k_eval, 1);
    for (int k = 0; k < draws; ++k) {
      std::vector<TokenId> trace;
      if (k_eval > 0) {
        trace = sample_trace(trained, q, max_trace_len, 1.0,
                             RngStream::derive(seed, RngPurpose::Analysis,
                                               {e, static_cast<std::uint64_t>(k)}))
                    .tokens;
      }
      const std::vector<double> c = conditional_probs(trained, q, trace, pair.answer);
      for (std::size_t i = 0; i < c.size(); ++i) p_mean[i] += c[i] / static_cast<double>(draws);
    }

    for (std::size_t i = 0; i < pair.answer.size(); ++i) {
      TokenProbRow row;
      row.token_id = pair.answer[i];
      row.position = static_cast<int>(i);
      row.baseline_entropy = h_base[i];
      row.prob_ratio = p_mean[i] / std::max(p_base[i], 1e-300);
      a.rows.push_back(row);
      entropies.push_back(h_base[i]);
    }
  }

  a.bucket_edges = default_bucket_edges(entropies);
  const std::size_t buckets = a.bucket_edges.size() + 1;
  a.bucket_mean_ratio.assign(buckets, 0.0);
  a.bucket_count.assign(buckets, 0);
  for (auto& row : a.rows) {
    row.bucket = bucket_of(row.baseline_entropy, a.bucket_edges);
    a.bucket_mean_ratio[static_cast<std::size_t>(row.bucket)] += row.prob_ratio;
    a.bucket_count[static_cast<std::size_t>(row.bucket)] += 1;
  }
  for (std::size_t b = 0; b < buckets; ++b)
    if (a.bucket_count[b]) a.bucket_mean_ratio[b] /= static_cast<double>(a.bucket_count[b]);

  std::sort(entropies.begin(), entropies.end());
  a.median_baseline_entropy = detail::quantile_sorted(entropies, 0.5);
  return a;
}

inline void write_analysis_csv(const TokenProbAnalysis& a, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw MetricsIoError("cannot open analysis file: " + path);
  char buf[256];
  out << "# bucket_edges";
  for (double e : a.bucket_edges) {
    std::snprintf(buf, sizeof(buf), " %.10g", e);
    out << buf;
  }
  out << "\n";
  std::snprintf(buf, sizeof(buf), "# median_baseline_entropy %.10g\n", a.median_baseline_entropy);
  out << buf;
  out << "token_id,position,baseline_entropy,bucket,prob_ratio\n";
  for (const auto& r : a.rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.10g,%d,%.10g\n", r.token_id, r.position,
                  r.baseline_entropy, r.bucket, r.prob_ratio);
    out << buf;
  }
  if (!out) throw MetricsIoError("analysis write failed: " + path);
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

struct RunManifest {
  std::string config_digest;
  std::string code_version = "nrt 0.1.0";
  std::uint64_t seed = 0;
  std::string start_timestamp;
  std::string end_timestamp;
};

inline std::string utc_timestamp(std::time_t t) {
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

inline void write_manifest(const RunManifest& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw MetricsIoError("cannot open manifest file: " + path);
  out << "config_digest " << m.config_digest << "\n";
  out << "code_version " << m.code_version << "\n";
  out << "seed " << m.seed << "\n";
  out << "start " << m.start_timestamp << "\n";
  out << "end " << m.end_timestamp << "\n";
  out << "metric trace_entropy = mean full-vocabulary predictive entropy (nats) over sampled "
         "trace decisions, natural END decision included, forced terminations excluded\n";
  out << "metric trace_length = trace tokens between the delimiters\n";
  out << "metric eval_answer_logprob = held-out mean log-likelihood of the reference answer "
         "given sampled traces; carried forward between eval periods\n";
  out << "metric analysis_buckets = baseline-entropy buckets with edges {0.125} + empirical "
         "quartiles; baseline = reference checkpoint (post warm-up) with empty traces\n";
  if (!out) throw MetricsIoError("manifest write failed: " + path);
}

}  // namespace nrt
