#pragma once

/**
 * Autoregressive token policies.
 *
 * A Policy maps a context (token sequence) to logits over the vocabulary and
 * can accumulate the analytic gradient of a token's log-probability into a
 * flat parameter-space accumulator. Two implementations share this contract:
 * an exact tabular order-n model (the oracle substrate) and a tiny windowed
 * neural model with hand-derived backprop.
 *
 * Trace generation is masked: between the start and end delimiters the
 * sampling distribution is the policy's softmax renormalized over
 * {task symbols} ∪ {END_THINK}. Recorded log-probabilities, trace event
 * probabilities, and trace-side gradients all use that masked distribution,
 * so the stop/forced event space is a complete probability partition for any
 * parameter values. Answer-side probabilities are plain full-vocabulary
 * softmax values.
 *
 * Sampling records log-probabilities at temperature 1 regardless of the
 * sampling temperature, so importance ratios always refer to the policy
 * itself rather than the tempered sampler.
 */

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nrt/corpus.hpp"
#include "nrt/rng.hpp"

namespace nrt {

struct TokenDistribution {
  std::vector<double> prob;
  std::vector<double> logprob;

  void resize(std::size_t n) {
    prob.assign(n, 0.0);
    logprob.assign(n, -std::numeric_limits<double>::infinity());
  }
};

struct GradientAccumulator {
  std::vector<double> grad;
  std::size_t samples = 0;

  GradientAccumulator() = default;
  explicit GradientAccumulator(std::size_t dim) : grad(dim, 0.0) {}

  std::size_t dim() const { return grad.size(); }
  void reset() {
    std::fill(grad.begin(), grad.end(), 0.0);
    samples = 0;
  }
  void scale(double s) {
    for (auto& g : grad) g *= s;
  }
  // out += s * other
  void axpy(double s, const GradientAccumulator& other) {
    if (other.grad.size() != grad.size())
      throw std::invalid_argument("GradientAccumulator::axpy: dimension mismatch");
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += s * other.grad[i];
  }
  bool finite() const {
    for (double g : grad)
      if (!std::isfinite(g)) return false;
    return true;
  }
};

struct TraceSample {
  std::vector<TokenId> tokens;       // z, delimiters excluded
  std::vector<double> step_logprob;  // one entry per sampled decision, temperature 1;
                                     // includes the END decision unless end_forced
  double total_logprob = 0.0;        // sum of step_logprob = log pi_old(z|x)
  bool end_forced = false;           // END_THINK appended at max length
  std::uint64_t stream_state = 0;    // sampling stream id, for reproducibility reports

  std::size_t decision_count() const { return step_logprob.size(); }
};

class Policy {
 public:
  virtual ~Policy() = default;

  const Vocabulary& vocab() const { return vocab_; }
  std::size_t param_count() const { return theta_.size(); }
  std::span<double> params() { return theta_; }
  std::span<const double> params() const { return theta_; }

  virtual std::string arch_descriptor() const = 0;
  virtual std::unique_ptr<Policy> clone() const = 0;

  // Raw logits for the next token given a context.
  virtual void forward_logits(std::span<const TokenId> context, std::span<double> out) const = 0;

  // Accumulates weight * d(log p(target | context)) / d(theta) into `out.grad`.
  // With a non-empty `allowed` set the log-probability is the masked,
  // renormalized one; `target` must then be in the set.
  virtual void accumulate_grad_log_prob(std::span<const TokenId> context, TokenId target,
                                        double weight, std::span<const TokenId> allowed,
                                        GradientAccumulator& out) const = 0;

  void init_uniform(RngStream rng, double half_range = 0.1) {
    for (auto& v : theta_) v = rng.next_uniform(-half_range, half_range);
  }

  // Full-vocabulary softmax distribution.
  void forward_into(std::span<const TokenId> context, TokenDistribution& out) const {
    const std::size_t n = static_cast<std::size_t>(vocab_.size());
    out.prob.resize(n);
    out.logprob.resize(n);
    forward_logits(context, out.logprob);  // reuse as logit buffer
    softmax_inplace(out.logprob, out.prob);
  }

  TokenDistribution forward(std::span<const TokenId> context) const {
    TokenDistribution d;
    forward_into(context, d);
    return d;
  }

  // Softmax renormalized over `allowed`; entries outside the set get
  // probability 0 / log-probability -inf. Temperature scales the logits.
  void masked_forward_into(std::span<const TokenId> context, std::span<const TokenId> allowed,
                           double temperature, TokenDistribution& out) const {
    const std::size_t n = static_cast<std::size_t>(vocab_.size());
    std::vector<double> logits(n);
    forward_logits(context, logits);
    out.resize(n);
    double max_logit = -std::numeric_limits<double>::infinity();
    for (TokenId t : allowed) {
      check_token(t);
      max_logit = std::max(max_logit, logits[static_cast<std::size_t>(t)] / temperature);
    }
    double z = 0.0;
    for (TokenId t : allowed) z += std::exp(logits[static_cast<std::size_t>(t)] / temperature - max_logit);
    const double log_z = max_logit + std::log(z);
    for (TokenId t : allowed) {
      const auto i = static_cast<std::size_t>(t);
      out.logprob[i] = logits[i] / temperature - log_z;
      out.prob[i] = std::exp(out.logprob[i]);
    }
  }

  double entropy(std::span<const TokenId> context) const {
    TokenDistribution d;
    forward_into(context, d);
    double h = 0.0;
    for (double p : d.prob)
      if (p > 0.0) h -= p * std::log(p);
    return h;
  }

 protected:
  Policy(Vocabulary vocab, std::size_t dim) : vocab_(vocab), theta_(dim, 0.0) {}
  Policy(const Policy&) = default;

  void check_token(TokenId t) const {
    if (!vocab_.is_valid(t)) throw std::invalid_argument("token id out of range for vocabulary");
  }
  void check_context(std::span<const TokenId> ctx) const {
    for (TokenId t : ctx) check_token(t);
  }

  static void softmax_inplace(std::vector<double>& logits_to_logprob, std::vector<double>& prob) {
    double max_logit = -std::numeric_limits<double>::infinity();
    for (double v : logits_to_logprob) max_logit = std::max(max_logit, v);
    double z = 0.0;
    for (double v : logits_to_logprob) z += std::exp(v - max_logit);
    const double log_z = max_logit + std::log(z);
    for (std::size_t i = 0; i < logits_to_logprob.size(); ++i) {
      logits_to_logprob[i] -= log_z;
      prob[i] = std::exp(logits_to_logprob[i]);
    }
  }

  Vocabulary vocab_;
  std::vector<double> theta_;
};

// Deep immutable copy for pi_old.
inline std::unique_ptr<Policy> snapshot(const Policy& p) { return p.clone(); }

// ---------------------------------------------------------------------------
// Context construction. The canonical sequence layout is
//   question .. START_THINK .. trace .. END_THINK .. answer
// ---------------------------------------------------------------------------

inline std::vector<TokenId> trace_prefix(std::span<const TokenId> question) {
  std::vector<TokenId> ctx(question.begin(), question.end());
  ctx.push_back(Vocabulary::kStartThink);
  return ctx;
}

inline std::vector<TokenId> answer_prefix(std::span<const TokenId> question,
                                          std::span<const TokenId> trace) {
  std::vector<TokenId> ctx(question.begin(), question.end());
  ctx.push_back(Vocabulary::kStartThink);
  ctx.insert(ctx.end(), trace.begin(), trace.end());
  ctx.push_back(Vocabulary::kEndThink);
  return ctx;
}

struct SequenceLogProb {
  double total = 0.0;
  std::vector<double> per_token;
};

// Full-vocabulary log-probability of `body` given a growing context starting
// at `prefix`.
inline SequenceLogProb sequence_log_prob(const Policy& policy, std::span<const TokenId> prefix,
                                         std::span<const TokenId> body) {
  SequenceLogProb r;
  r.per_token.reserve(body.size());
  std::vector<TokenId> ctx(prefix.begin(), prefix.end());
  TokenDistribution d;
  for (TokenId t : body) {
    policy.forward_into(ctx, d);
    const double lp = d.logprob[static_cast<std::size_t>(t)];
    r.per_token.push_back(lp);
    r.total += lp;
    ctx.push_back(t);
  }
  return r;
}

// Allowed set during trace generation: every task symbol plus END_THINK.
inline std::vector<TokenId> trace_support(const Vocabulary& vocab) {
  std::vector<TokenId> ids = vocab.symbol_ids();
  ids.push_back(Vocabulary::kEndThink);
  return ids;
}

/**
 * Samples one reasoning trace. Generation starts from `question` + START and
 * stops when END_THINK is drawn or `max_len` trace tokens were emitted, in
 * which case END_THINK is appended and end_forced set. Temperature shapes the
 * sampling distribution only; recorded log-probs are temperature-1.
 */
inline TraceSample sample_trace(const Policy& policy, std::span<const TokenId> question,
                                int max_len, double temperature, RngStream rng) {
  if (max_len < 1) throw std::invalid_argument("sample_trace: max_len must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("sample_trace: temperature must be > 0");

  TraceSample s;
  s.stream_state = rng.state();
  std::vector<TokenId> ctx = trace_prefix(question);
  const std::vector<TokenId> allowed = trace_support(policy.vocab());
  TokenDistribution sampling_dist;
  TokenDistribution ref_dist;
  for (int pos = 0; pos < max_len; ++pos) {
    policy.masked_forward_into(ctx, allowed, temperature, sampling_dist);
    const TokenDistribution* record = &sampling_dist;
    if (temperature != 1.0) {
      policy.masked_forward_into(ctx, allowed, 1.0, ref_dist);
      record = &ref_dist;
    }
    const double u = rng.next_double();
    double acc = 0.0;
    TokenId tok = allowed.back();
    for (TokenId t : allowed) {
      acc += sampling_dist.prob[static_cast<std::size_t>(t)];
      if (u < acc) {
        tok = t;
        break;
      }
    }
    if (tok == Vocabulary::kEndThink) {
      s.step_logprob.push_back(record->logprob[static_cast<std::size_t>(tok)]);
      s.end_forced = false;
      break;
    }
    s.tokens.push_back(tok);
    s.step_logprob.push_back(record->logprob[static_cast<std::size_t>(tok)]);
    ctx.push_back(tok);
    if (static_cast<int>(s.tokens.size()) == max_len) {
      s.end_forced = true;
      break;
    }
  }
  s.total_logprob = 0.0;
  for (double lp : s.step_logprob) s.total_logprob += lp;
  return s;
}

/**
 * Log-probability of a trace event under `policy`: the masked log-probs of
 * every trace token, plus the END_THINK factor when the trace stopped
 * naturally. This is the quantity importance ratios compare across policies.
 */
inline double trace_event_log_prob(const Policy& policy, std::span<const TokenId> question,
                                   const TraceSample& sample) {
  std::vector<TokenId> ctx = trace_prefix(question);
  const std::vector<TokenId> allowed = trace_support(policy.vocab());
  TokenDistribution d;
  double total = 0.0;
  for (TokenId t : sample.tokens) {
    policy.masked_forward_into(ctx, allowed, 1.0, d);
    total += d.logprob[static_cast<std::size_t>(t)];
    ctx.push_back(t);
  }
  if (!sample.end_forced) {
    policy.masked_forward_into(ctx, allowed, 1.0, d);
    total += d.logprob[static_cast<std::size_t>(Vocabulary::kEndThink)];
  }
  return total;
}

/**
 * Accumulates sum_i weight_i * grad log p(body_i | prefix, body_<i) into
 * `out`. Full-vocabulary log-probabilities; weight vector length must match.
 */
inline void grad_log_prob(const Policy& policy, std::span<const TokenId> prefix,
                          std::span<const TokenId> body, std::span<const double> weights,
                          GradientAccumulator& out) {
  if (body.size() != weights.size())
    throw std::invalid_argument("grad_log_prob: weight vector length mismatch");
  std::vector<TokenId> ctx(prefix.begin(), prefix.end());
  for (std::size_t i = 0; i < body.size(); ++i) {
    if (weights[i] != 0.0) policy.accumulate_grad_log_prob(ctx, body[i], weights[i], {}, out);
    ctx.push_back(body[i]);
  }
}

// Trace-event analog: `scale` multiplies the gradient of log of the event
// probability (masked tokens plus the natural END factor).
inline void grad_trace_event_log_prob(const Policy& policy, std::span<const TokenId> question,
                                      const TraceSample& sample, double scale,
                                      GradientAccumulator& out) {
  if (scale == 0.0) return;
  std::vector<TokenId> ctx = trace_prefix(question);
  const std::vector<TokenId> allowed = trace_support(policy.vocab());
  for (TokenId t : sample.tokens) {
    policy.accumulate_grad_log_prob(ctx, t, scale, allowed, out);
    ctx.push_back(t);
  }
  if (!sample.end_forced)
    policy.accumulate_grad_log_prob(ctx, Vocabulary::kEndThink, scale, allowed, out);
}

}  // namespace nrt
