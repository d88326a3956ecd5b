#pragma once

/**
 * The NRT loss gradient.
 *
 * For each trace z_k of a prompt the update combines two signals:
 *   trace term:  surrogate(r_k) * A_k * grad log pi(z_k | x)
 *   token term:  sum_i S_{i,k} * grad log pi(y*_i | x, z_k, y*_<i)
 * plus lambda_format times the format-supervision loss on the two delimiter
 * tokens. Everything here accumulates LOSS gradients (descent direction);
 * the trace/token terms enter negated.
 *
 * The trace term carries a pessimistic clipped surrogate over the importance
 * ratio r_k = pi(z_k|x) / pi_old(z_k|x); the token and format terms are
 * unclipped supervised gradients. Token signals are treated as fixed
 * coefficients: their theta-dependence is already routed into the explicit
 * terms by the estimator's derivation, so they are not differentiated again.
 */

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "nrt/advantage.hpp"
#include "nrt/policy.hpp"
#include "nrt/rewards.hpp"

namespace nrt {

struct NumericAbortError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EstimatorSettings {
  bool use_advantage = true;      // false: raw trace reward in the trace term
  bool clip_enabled = true;
  double clip_lo = 0.2;           // ratio clipped to [1 - clip_lo, 1 + clip_hi]
  double clip_hi = 0.28;
  bool ratio_on_token_term = false;  // study switch: raw ratio on the token term
};

struct BatchItem {
  const QAPair* pair = nullptr;
  std::vector<TraceSample> traces;
  std::vector<std::vector<double>> cond_probs;  // c_i per trace, current theta
  std::vector<RewardBreakdown> breakdowns;
  AdvantageGroup advantages;                    // empty advantages => raw-reward mode only
  std::vector<double> ratios;                   // r_k, positive and finite

  std::size_t k_count() const { return traces.size(); }
};

struct LossReport {
  double trace_term = 0.0;
  double token_term = 0.0;
  double format_loss = 0.0;
  double total = 0.0;
  double lambda_format = 0.0;
  double clip_fraction = 0.0;

  bool finite() const {
    return std::isfinite(trace_term) && std::isfinite(token_term) && std::isfinite(format_loss) &&
           std::isfinite(total);
  }
};

/**
 * r = pi_theta(z|x) / pi_old(z|x), computed in log space over the trace event
 * (masked token factors plus the natural END factor).
 */
inline double importance_ratio(const Policy& policy, const Policy& old_policy,
                               std::span<const TokenId> question, const TraceSample& sample) {
  return std::exp(trace_event_log_prob(policy, question, sample) -
                  trace_event_log_prob(old_policy, question, sample));
}

// Variant using the sample's stored pi_old log-prob (identical within a step,
// where pi_old is the sampling snapshot).
inline double importance_ratio_from_sample(const Policy& policy, std::span<const TokenId> question,
                                           const TraceSample& sample) {
  return std::exp(trace_event_log_prob(policy, question, sample) - sample.total_logprob);
}

// L_format = -log pi(START | x) - log pi(END | x, START, z).
inline double format_loss_value(const Policy& policy, std::span<const TokenId> question,
                                std::span<const TokenId> trace) {
  TokenDistribution d;
  policy.forward_into(question, d);
  double loss = -d.logprob[static_cast<std::size_t>(Vocabulary::kStartThink)];
  std::vector<TokenId> ctx = trace_prefix(question);
  ctx.insert(ctx.end(), trace.begin(), trace.end());
  policy.forward_into(ctx, d);
  loss -= d.logprob[static_cast<std::size_t>(Vocabulary::kEndThink)];
  return loss;
}

// Accumulates scale * grad L_format into `out`.
inline void format_loss_gradient(const Policy& policy, std::span<const TokenId> question,
                                 std::span<const TokenId> trace, double scale,
                                 GradientAccumulator& out) {
  if (scale == 0.0) return;
  policy.accumulate_grad_log_prob(question, Vocabulary::kStartThink, -scale, {}, out);
  std::vector<TokenId> ctx = trace_prefix(question);
  ctx.insert(ctx.end(), trace.begin(), trace.end());
  policy.accumulate_grad_log_prob(ctx, Vocabulary::kEndThink, -scale, {}, out);
}

namespace detail {

struct TraceSurrogate {
  double grad_coeff = 0.0;  // scalar on grad log pi(z|x)
  double value = 0.0;       // surrogate objective value (for reporting)
  bool clipped = false;
};

inline TraceSurrogate trace_surrogate(double ratio, double base, const EstimatorSettings& s) {
  TraceSurrogate out;
  if (!s.clip_enabled) {
    out.value = ratio * base;
    out.grad_coeff = ratio * base;
    return out;
  }
  const double clipped_ratio = std::clamp(ratio, 1.0 - s.clip_lo, 1.0 + s.clip_hi);
  const double unclipped = ratio * base;
  const double clipped = clipped_ratio * base;
  // Pessimistic min; the clipped branch has zero gradient when saturated.
  if (unclipped <= clipped) {
    out.value = unclipped;
    out.grad_coeff = unclipped;
  } else {
    out.value = clipped;
    out.grad_coeff = 0.0;
    out.clipped = true;
  }
  return out;
}

}  // namespace detail

/**
 * Accumulates one prompt's NRT loss gradient, averaged over its K traces and
 * scaled by `extra_scale` (1/B when called across a batch). Advantages (or
 * raw rewards) and token signals must be precomputed on `item`.
 */
inline LossReport nrt_gradient(const BatchItem& item, const Policy& policy,
                               const EstimatorSettings& settings, GradientAccumulator& out,
                               double extra_scale = 1.0) {
  const std::size_t k_count = item.k_count();
  if (k_count == 0) throw std::invalid_argument("nrt_gradient: empty item");
  if (item.breakdowns.size() != k_count || item.ratios.size() != k_count ||
      item.cond_probs.size() != k_count)
    throw std::invalid_argument("nrt_gradient: per-trace structure sizes disagree");
  if (settings.use_advantage && item.advantages.advantages.size() != k_count)
    throw std::invalid_argument("nrt_gradient: advantages missing");

  const std::span<const TokenId> question{item.pair->question};
  const std::span<const TokenId> answer{item.pair->answer};
  const double scale = extra_scale / static_cast<double>(k_count);

  LossReport report;
  std::size_t clipped_count = 0;
  std::vector<double> token_weights;
  for (std::size_t k = 0; k < k_count; ++k) {
    const double ratio = item.ratios[k];
    if (!(ratio > 0.0) || !std::isfinite(ratio))
      throw NumericAbortError("nrt_gradient: non-finite importance ratio");
    const double base =
        settings.use_advantage ? item.advantages.advantages[k] : item.breakdowns[k].reward;

    const auto surr = detail::trace_surrogate(ratio, base, settings);
    if (surr.clipped) ++clipped_count;
    report.trace_term -= surr.value / static_cast<double>(k_count);
    // Loss gradient: minus the surrogate coefficient on the trace score.
    grad_trace_event_log_prob(policy, question, item.traces[k], -scale * surr.grad_coeff, out);

    // Token prediction term: weighted supervised gradient on answer tokens.
    const auto& signals = item.breakdowns[k].token_signal;
    const auto& c = item.cond_probs[k];
    if (signals.size() != answer.size() || c.size() != answer.size())
      throw std::invalid_argument("nrt_gradient: token signal length mismatch");
    const double token_ratio = settings.ratio_on_token_term ? ratio : 1.0;
    token_weights.resize(signals.size());
    double token_loss = 0.0;
    for (std::size_t i = 0; i < signals.size(); ++i) {
      token_weights[i] = -scale * token_ratio * signals[i];
      token_loss -= token_ratio * signals[i] * std::log(std::max(c[i], 1e-300));
    }
    report.token_term += token_loss / static_cast<double>(k_count);
    const std::vector<TokenId> ctx = answer_prefix(question, item.traces[k].tokens);
    grad_log_prob(policy, ctx, answer, token_weights, out);
  }
  report.clip_fraction = static_cast<double>(clipped_count) / static_cast<double>(k_count);
  return report;
}

/**
 * Full step composition: mean over batch items of the NRT gradient plus
 * lambda_format times the mean format-loss gradient. Throws NumericAbortError
 * if any accumulated gradient entry is non-finite.
 */
inline LossReport total_step_gradient(std::span<const BatchItem> batch, const Policy& policy,
                                      const EstimatorSettings& settings, double lambda_format,
                                      GradientAccumulator& out) {
  if (batch.empty()) throw std::invalid_argument("total_step_gradient: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  LossReport report;
  report.lambda_format = lambda_format;
  double clip_acc = 0.0;
  for (const BatchItem& item : batch) {
    const LossReport r = nrt_gradient(item, policy, settings, out, inv_b);
    report.trace_term += inv_b * r.trace_term;
    report.token_term += inv_b * r.token_term;
    clip_acc += inv_b * r.clip_fraction;

    const std::span<const TokenId> question{item.pair->question};
    const double k_scale = inv_b / static_cast<double>(item.k_count());
    for (const TraceSample& s : item.traces) {
      report.format_loss += k_scale * format_loss_value(policy, question, s.tokens);
      format_loss_gradient(policy, question, s.tokens, lambda_format * k_scale, out);
    }
  }
  report.clip_fraction = clip_acc;
  report.total = report.trace_term + report.token_term + lambda_format * report.format_loss;
  if (!report.finite() || !out.finite())
    throw NumericAbortError("total_step_gradient: non-finite loss or gradient");
  return report;
}

}  // namespace nrt
