#pragma once

/**
 * Trace rewards from answer-token conditional probabilities.
 *
 * Given the per-token probabilities c_i of the reference answer under a
 * policy and trace, an aggregation scheme produces the scalar trace reward
 * R = f(c) and the token reward signals S_i = (df/dc_i) * c_i that weight
 * each answer token's prediction gradient.
 *
 * Closed forms:
 *   logp       R = sum log c_j            S_i = 1
 *   p          R = prod c_j               S_i = R
 *   gm         R = (prod c_j)^(1/T)       S_i = R / T
 *   am         R = mean c_j               S_i = c_i / T
 *   ws_inv     R = sum c_j / b_j          S_i = c_i / b_i
 *   ws_neglog  R = -sum c_j log b_j       S_i = -c_i log b_i
 * where b = baseline probabilities (empty trace, snapshot policy) clamped
 * below at 1e-6. Products run in log space so long answers cannot underflow.
 */

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "nrt/policy.hpp"

namespace nrt {

enum class Scheme { LogP, P, GM, AM, WsInv, WsNegLog };

inline const char* scheme_name(Scheme s) {
  switch (s) {
    case Scheme::LogP: return "logp";
    case Scheme::P: return "p";
    case Scheme::GM: return "gm";
    case Scheme::AM: return "am";
    case Scheme::WsInv: return "ws_inv";
    case Scheme::WsNegLog: return "ws_neglog";
  }
  return "?";
}

inline std::optional<Scheme> parse_scheme(std::string_view s) {
  if (s == "logp") return Scheme::LogP;
  if (s == "p") return Scheme::P;
  if (s == "gm") return Scheme::GM;
  if (s == "am") return Scheme::AM;
  if (s == "ws_inv") return Scheme::WsInv;
  if (s == "ws_neglog") return Scheme::WsNegLog;
  return std::nullopt;
}

inline bool scheme_needs_baseline(Scheme s) {
  return s == Scheme::WsInv || s == Scheme::WsNegLog;
}

constexpr double kBaselineFloor = 1e-6;
// Stand-in for -inf when a zero probability hits the log-prob scheme; large
// negative but finite so group statistics stay well-defined downstream.
constexpr double kLogpSentinel = -1e9;

/**
 * c_i = pi(y*_i | question, START, trace, END, y*_<i), exact full-vocabulary
 * probabilities of the reference answer tokens.
 */
inline std::vector<double> conditional_probs(const Policy& policy,
                                             std::span<const TokenId> question,
                                             std::span<const TokenId> trace,
                                             std::span<const TokenId> answer) {
  std::vector<TokenId> ctx = answer_prefix(question, trace);
  std::vector<double> c;
  c.reserve(answer.size());
  TokenDistribution d;
  for (TokenId t : answer) {
    policy.forward_into(ctx, d);
    c.push_back(d.prob[static_cast<std::size_t>(t)]);
    ctx.push_back(t);
  }
  return c;
}

/**
 * Empty-trace probabilities under the snapshot policy, clamped below at
 * kBaselineFloor. These define both the clipping baseline and WS weights.
 */
inline std::vector<double> baseline_probs(const Policy& snapshot_policy,
                                          std::span<const TokenId> question,
                                          std::span<const TokenId> answer) {
  std::vector<double> b = conditional_probs(snapshot_policy, question, {}, answer);
  for (double& v : b) v = std::max(v, kBaselineFloor);
  return b;
}

struct RewardBreakdown {
  Scheme scheme = Scheme::GM;
  double reward = 0.0;
  std::vector<double> token_signal;  // S_i, length T
  std::vector<double> weights;       // WS schemes only
  bool sentinel = false;             // logp hit a zero probability
};

// Generic weighted sum f(c) = sum w_j c_j; the arithmetic mean is w_j = 1/T.
inline RewardBreakdown aggregate_weighted(std::span<const double> c,
                                          std::span<const double> weights) {
  if (c.size() != weights.size())
    throw std::invalid_argument("aggregate_weighted: weight length mismatch");
  RewardBreakdown r;
  r.scheme = Scheme::WsInv;  // caller overrides; closed form is the same
  r.weights.assign(weights.begin(), weights.end());
  r.token_signal.resize(c.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    sum += weights[i] * c[i];
    r.token_signal[i] = weights[i] * c[i];
  }
  r.reward = sum;
  return r;
}

inline RewardBreakdown aggregate(Scheme scheme, std::span<const double> c,
                                 std::span<const double> c_base = {}) {
  if (c.empty()) throw std::invalid_argument("aggregate: empty probability vector");
  if (scheme_needs_baseline(scheme) && c_base.size() != c.size())
    throw std::invalid_argument("aggregate: weighted schemes require baseline probabilities");

  const std::size_t t_len = c.size();
  const double t = static_cast<double>(t_len);
  RewardBreakdown r;
  r.scheme = scheme;
  r.token_signal.resize(t_len);

  switch (scheme) {
    case Scheme::LogP: {
      double sum = 0.0;
      for (double ci : c) {
        if (ci <= 0.0) {
          r.sentinel = true;
          break;
        }
        sum += std::log(ci);
      }
      r.reward = r.sentinel ? kLogpSentinel : sum;
      for (auto& s : r.token_signal) s = 1.0;
      break;
    }
    case Scheme::P: {
      double log_sum = 0.0;
      bool zero = false;
      for (double ci : c) {
        if (ci <= 0.0) zero = true;
        else log_sum += std::log(ci);
      }
      r.reward = zero ? 0.0 : std::exp(log_sum);
      for (auto& s : r.token_signal) s = r.reward;
      break;
    }
    case Scheme::GM: {
      double log_sum = 0.0;
      bool zero = false;
      for (double ci : c) {
        if (ci <= 0.0) zero = true;
        else log_sum += std::log(ci);
      }
      r.reward = zero ? 0.0 : std::exp(log_sum / t);
      for (auto& s : r.token_signal) s = r.reward / t;
      break;
    }
    case Scheme::AM: {
      double sum = 0.0;
      for (double ci : c) sum += ci;
      r.reward = sum / t;
      for (std::size_t i = 0; i < t_len; ++i) r.token_signal[i] = c[i] / t;
      break;
    }
    case Scheme::WsInv: {
      std::vector<double> w(t_len);
      for (std::size_t i = 0; i < t_len; ++i) w[i] = 1.0 / c_base[i];
      r = aggregate_weighted(c, w);
      r.scheme = scheme;
      break;
    }
    case Scheme::WsNegLog: {
      std::vector<double> w(t_len);
      for (std::size_t i = 0; i < t_len; ++i) w[i] = -std::log(c_base[i]);
      r = aggregate_weighted(c, w);
      r.scheme = scheme;
      break;
    }
  }
  return r;
}

// Scalar f(c) alone, for finite-difference checks.
inline double aggregate_value(Scheme scheme, std::span<const double> c,
                              std::span<const double> c_base = {}) {
  return aggregate(scheme, c, c_base).reward;
}

/**
 * Compares the analytic token signals S_i against c_i times a central finite
 * difference of f at c_i. Returns the max absolute error over i.
 */
inline double numeric_signal_check(Scheme scheme, std::span<const double> c,
                                   std::span<const double> c_base = {}, double h = 1e-6) {
  const RewardBreakdown analytic = aggregate(scheme, c, c_base);
  std::vector<double> probe(c.begin(), c.end());
  double max_err = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double f_hi = aggregate_value(scheme, probe, c_base);
    probe[i] = saved - h;
    const double f_lo = aggregate_value(scheme, probe, c_base);
    probe[i] = saved;
    const double numeric = saved * (f_hi - f_lo) / (2.0 * h);
    max_err = std::max(max_err, std::abs(numeric - analytic.token_signal[i]));
  }
  return max_err;
}

}  // namespace nrt
