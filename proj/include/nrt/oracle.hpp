#pragma once

/**
 * Ground-truth machinery.
 *
 * The trace event space for max length L is finite: every stop event (trace
 * of length < L followed by a sampled END) plus every forced event (length
 * exactly L, END appended deterministically). Enumerating it gives
 *   J(theta) = sum_z pi(z|x) R(z, theta)
 * exactly, finite differences of J give the exact gradient, and a Welford
 * accumulator over single-trace estimates gives per-coordinate z-scores for
 * the Monte Carlo estimator. Three independent routes to the same vector:
 * finite differences, the enumerated analytic expectation, and sampling.
 *
 * For weighted-sum schemes the baseline policy is held fixed while theta is
 * perturbed, matching the estimator's frozen-baseline regime.
 */

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nrt/estimator.hpp"
#include "nrt/policy.hpp"
#include "nrt/rewards.hpp"

namespace nrt {

constexpr std::uint64_t kEnumerationBound = 1'000'000;

struct KahanSum {
  double sum = 0.0;
  double carry = 0.0;
  void add(double v) {
    const double y = v - carry;
    const double t = sum + y;
    carry = (t - sum) - y;
    sum = t;
  }
  double value() const { return sum; }
};

struct EnumerationSpec {
  int max_len = 2;
  std::vector<TokenId> trace_alphabet;  // defaults to all task symbols
  QAPair pair;
  Scheme scheme = Scheme::GM;
  bool dump_contributions = false;
};

inline std::uint64_t enumeration_event_count(std::size_t alphabet, int max_len) {
  std::uint64_t total = 0;
  std::uint64_t pow = 1;
  for (int len = 0; len < max_len; ++len) {
    total += pow;  // stop events of this length
    pow *= alphabet;
    if (total + pow > (std::uint64_t{1} << 62)) return ~std::uint64_t{0};
  }
  return total + pow;  // plus forced events of length max_len
}

struct TraceContribution {
  std::vector<TokenId> trace;
  bool forced = false;
  double prob = 0.0;
  double reward = 0.0;
};

struct ExactObjectiveReport {
  double objective = 0.0;
  double mass = 0.0;
  std::vector<TraceContribution> contributions;
  std::vector<double> gradient;  // filled by exact_gradient
  double wall_seconds = 0.0;
};

namespace detail {

inline std::vector<TokenId> resolve_alphabet(const EnumerationSpec& spec, const Vocabulary& vocab) {
  std::vector<TokenId> a = spec.trace_alphabet.empty() ? vocab.symbol_ids() : spec.trace_alphabet;
  for (TokenId t : a)
    if (!vocab.is_valid(t) || vocab.is_reserved(t))
      throw std::invalid_argument("enumeration: trace alphabet must be task symbols");
  if (a.empty()) throw std::invalid_argument("enumeration: empty trace alphabet");
  const std::uint64_t events = enumeration_event_count(a.size(), spec.max_len);
  if (events > kEnumerationBound)
    throw std::invalid_argument("enumeration: event count " + std::to_string(events) +
                                " exceeds bound " + std::to_string(kEnumerationBound));
  return a;
}

// Depth-first walk over the event tree sharing context prefixes. The visitor
// receives (trace, forced, log_prob_of_event).
template <typename Visitor>
void walk_rec(const Policy& policy, const std::vector<TokenId>& support,
              std::span<const TokenId> alphabet, int max_len, std::vector<TokenId>& ctx,
              std::vector<TokenId>& trace, double logp, Visitor& visit) {
  if (static_cast<int>(trace.size()) == max_len) {
    visit(trace, true, logp);
    return;
  }
  TokenDistribution d;
  policy.masked_forward_into(ctx, support, 1.0, d);
  visit(trace, false, logp + d.logprob[static_cast<std::size_t>(Vocabulary::kEndThink)]);
  for (TokenId t : alphabet) {
    const double child_logp = logp + d.logprob[static_cast<std::size_t>(t)];
    trace.push_back(t);
    ctx.push_back(t);
    walk_rec(policy, support, alphabet, max_len, ctx, trace, child_logp, visit);
    trace.pop_back();
    ctx.pop_back();
  }
}

template <typename Visitor>
void walk_events(const Policy& policy, std::span<const TokenId> question,
                 std::span<const TokenId> alphabet, int max_len, Visitor&& visit) {
  const std::vector<TokenId> support = trace_support(policy.vocab());
  std::vector<TokenId> ctx = trace_prefix(question);
  std::vector<TokenId> trace;
  walk_rec(policy, support, alphabet, max_len, ctx, trace, 0.0, visit);
}

}  // namespace detail

/**
 * Sums pi(z|x) * R(z, theta) over the complete stop/forced partition.
 * `baseline_policy` supplies WS baseline probabilities (defaults to `policy`).
 */
inline ExactObjectiveReport enumerate_objective(const EnumerationSpec& spec, const Policy& policy,
                                                const Policy* baseline_policy = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<TokenId> alphabet = detail::resolve_alphabet(spec, policy.vocab());
  const Policy& base_policy = baseline_policy ? *baseline_policy : policy;

  std::vector<double> c_base;
  if (scheme_needs_baseline(spec.scheme))
    c_base = baseline_probs(base_policy, spec.pair.question, spec.pair.answer);

  ExactObjectiveReport report;
  KahanSum j_sum, mass_sum;
  detail::walk_events(policy, spec.pair.question, alphabet, spec.max_len,
                      [&](const std::vector<TokenId>& trace, bool forced, double logp) {
                        const double prob = std::exp(logp);
                        const std::vector<double> c =
                            conditional_probs(policy, spec.pair.question, trace, spec.pair.answer);
                        const RewardBreakdown rb = aggregate(spec.scheme, c, c_base);
                        j_sum.add(prob * rb.reward);
                        mass_sum.add(prob);
                        if (spec.dump_contributions)
                          report.contributions.push_back({trace, forced, prob, rb.reward});
                      });
  report.objective = j_sum.value();
  report.mass = mass_sum.value();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

/**
 * Central finite differences of J per parameter coordinate. The baseline
 * policy (WS schemes) is frozen at the unperturbed parameters.
 */
inline std::vector<double> exact_gradient(const EnumerationSpec& spec, const Policy& policy,
                                          double h = 1e-5) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw std::invalid_argument("exact_gradient: h out of [1e-7, 1e-3]");
  const std::unique_ptr<Policy> frozen_base = policy.clone();
  const std::unique_ptr<Policy> work = policy.clone();
  std::span<double> theta = work->params();
  std::vector<double> grad(theta.size());
  for (std::size_t j = 0; j < theta.size(); ++j) {
    const double saved = theta[j];
    theta[j] = saved + h;
    const double j_hi = enumerate_objective(spec, *work, frozen_base.get()).objective;
    theta[j] = saved - h;
    const double j_lo = enumerate_objective(spec, *work, frozen_base.get()).objective;
    theta[j] = saved;
    if (!std::isfinite(j_hi) || !std::isfinite(j_lo))
      throw NumericAbortError("exact_gradient: non-finite objective");
    grad[j] = (j_hi - j_lo) / (2.0 * h);
  }
  return grad;
}

// Complete report: objective, mass, optional contribution dump, and the
// finite-difference gradient, under one wall clock.
inline ExactObjectiveReport enumerate_with_gradient(const EnumerationSpec& spec,
                                                    const Policy& policy, double h = 1e-5) {
  const auto t0 = std::chrono::steady_clock::now();
  ExactObjectiveReport report = enumerate_objective(spec, policy);
  report.gradient = exact_gradient(spec, policy, h);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

/**
 * The enumerated analytic expectation of the estimator's two terms:
 *   sum_z pi(z|x) [ R(z) grad log pi(z|x) + sum_i S_i grad log c_i ].
 * Independent cross-check route against exact_gradient.
 */
inline std::vector<double> analytic_expected_gradient(const EnumerationSpec& spec,
                                                      const Policy& policy,
                                                      const Policy* baseline_policy = nullptr) {
  const std::vector<TokenId> alphabet = detail::resolve_alphabet(spec, policy.vocab());
  const Policy& base_policy = baseline_policy ? *baseline_policy : policy;
  std::vector<double> c_base;
  if (scheme_needs_baseline(spec.scheme))
    c_base = baseline_probs(base_policy, spec.pair.question, spec.pair.answer);

  GradientAccumulator acc(policy.param_count());
  std::vector<double> weights;
  detail::walk_events(policy, spec.pair.question, alphabet, spec.max_len,
                      [&](const std::vector<TokenId>& trace, bool forced, double logp) {
                        const double prob = std::exp(logp);
                        const std::vector<double> c =
                            conditional_probs(policy, spec.pair.question, trace, spec.pair.answer);
                        const RewardBreakdown rb = aggregate(spec.scheme, c, c_base);
                        TraceSample event;
                        event.tokens = trace;
                        event.end_forced = forced;
                        grad_trace_event_log_prob(policy, spec.pair.question, event,
                                                  prob * rb.reward, acc);
                        weights.resize(rb.token_signal.size());
                        for (std::size_t i = 0; i < weights.size(); ++i)
                          weights[i] = prob * rb.token_signal[i];
                        const std::vector<TokenId> ctx =
                            answer_prefix(spec.pair.question, trace);
                        grad_log_prob(policy, ctx, spec.pair.answer, weights, acc);
                      });
  return acc.grad;
}

struct EstimatorComparison {
  std::size_t samples = 0;
  std::vector<double> estimator_mean;
  std::vector<double> standard_error;
  std::vector<double> z_score;
  double max_abs_z = 0.0;
  bool judged = false;  // comparisons below kMinJudgedSamples are reported only
};

constexpr std::size_t kMinJudgedSamples = 1000;

/**
 * Draws N independent single-trace estimates through the production estimator
 * path (unclipped, raw reward, on-policy: the regime where the estimator is
 * exactly unbiased) and reports per-coordinate z-scores against the
 * finite-difference exact gradient.
 */
inline EstimatorComparison compare_estimator(const EnumerationSpec& spec, const Policy& policy,
                                             std::size_t n_samples, std::uint64_t seed) {
  const std::vector<TokenId> alphabet = detail::resolve_alphabet(spec, policy.vocab());
  if (alphabet.size() != policy.vocab().symbol_ids().size())
    throw std::invalid_argument(
        "compare_estimator: trace alphabet must match the sampling support (all task symbols)");

  const std::vector<double> exact = exact_gradient(spec, policy);

  std::vector<double> c_base;
  if (scheme_needs_baseline(spec.scheme))
    c_base = baseline_probs(policy, spec.pair.question, spec.pair.answer);

  EstimatorSettings settings;
  settings.use_advantage = false;
  settings.clip_enabled = false;

  const std::size_t dim = policy.param_count();
  std::vector<double> mean(dim, 0.0), m2(dim, 0.0);
  GradientAccumulator sample_grad(dim);

  BatchItem item;
  item.pair = &spec.pair;
  item.traces.resize(1);
  item.cond_probs.resize(1);
  item.breakdowns.resize(1);
  item.ratios.assign(1, 1.0);  // on-policy by construction

  for (std::size_t n = 0; n < n_samples; ++n) {
    item.traces[0] = sample_trace(policy, spec.pair.question, spec.max_len, 1.0,
                                  RngStream::derive(seed, RngPurpose::Test, {n}));
    item.cond_probs[0] =
        conditional_probs(policy, spec.pair.question, item.traces[0].tokens, spec.pair.answer);
    item.breakdowns[0] = aggregate(spec.scheme, item.cond_probs[0], c_base);
    sample_grad.reset();
    nrt_gradient(item, policy, settings, sample_grad);
    // Estimator accumulates the loss gradient; the objective estimate is its negation.
    const double count = static_cast<double>(n + 1);
    for (std::size_t j = 0; j < dim; ++j) {
      const double x = -sample_grad.grad[j];
      const double delta = x - mean[j];
      mean[j] += delta / count;
      m2[j] += delta * (x - mean[j]);
    }
  }

  EstimatorComparison cmp;
  cmp.samples = n_samples;
  cmp.estimator_mean = mean;
  cmp.standard_error.resize(dim);
  cmp.z_score.resize(dim);
  for (std::size_t j = 0; j < dim; ++j) {
    const double var = (n_samples > 1) ? m2[j] / static_cast<double>(n_samples - 1) : 0.0;
    const double se = std::sqrt(var / static_cast<double>(n_samples));
    cmp.standard_error[j] = se;
    const double diff = mean[j] - exact[j];
    if (se > 0.0)
      cmp.z_score[j] = diff / se;
    else
      cmp.z_score[j] = (std::abs(diff) <= 1e-9) ? 0.0 : std::numeric_limits<double>::infinity();
    cmp.max_abs_z = std::max(cmp.max_abs_z, std::abs(cmp.z_score[j]));
  }
  cmp.judged = n_samples >= kMinJudgedSamples;
  return cmp;
}

// Fixed-field-order text dump for fixture diffing.
inline std::string format_report(const ExactObjectiveReport& r) {
  char buf[128];
  std::string out;
  std::snprintf(buf, sizeof(buf), "objective %.17g\n", r.objective);
  out += buf;
  std::snprintf(buf, sizeof(buf), "mass %.17g\n", r.mass);
  out += buf;
  std::snprintf(buf, sizeof(buf), "events %zu\n", r.contributions.size());
  out += buf;
  for (const auto& c : r.contributions) {
    out += c.forced ? "forced" : "stop";
    out += " [";
    for (std::size_t i = 0; i < c.trace.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(c.trace[i]);
    }
    std::snprintf(buf, sizeof(buf), "] p=%.12g r=%.12g\n", c.prob, c.reward);
    out += buf;
  }
  return out;
}

}  // namespace nrt
