#pragma once

/**
 * The training loop.
 *
 * Per step: draw a minibatch of prompts, sample K traces per prompt from the
 * frozen pi_old (END appended at the length cap), compute empty-trace
 * baselines under pi_old and trace rewards under current theta, clip and
 * group-normalize advantages, run mini-batch gradient passes through the
 * estimator, update parameters, and sync pi_old on its period. Baselines are
 * cached per (snapshot version, pair); the cache is invalidated on sync.
 *
 * An optional supervised warm-up (answer maximum likelihood with empty
 * traces) runs before RL; the post-warm-up snapshot is the reference policy
 * for token-probability analysis.
 *
 * Every random draw derives from (seed, purpose, step, slot, k), so a run is
 * a pure function of (config, seed, dataset) and a checkpoint resume is
 * bit-exact.
 */

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "nrt/advantage.hpp"
#include "nrt/checkpoint.hpp"
#include "nrt/config.hpp"
#include "nrt/corpus.hpp"
#include "nrt/estimator.hpp"
#include "nrt/metrics.hpp"
#include "nrt/neural_policy.hpp"
#include "nrt/policy.hpp"
#include "nrt/rewards.hpp"
#include "nrt/rng.hpp"
#include "nrt/tabular_policy.hpp"

namespace nrt {

// SGD or bias-corrected Adam (betas 0.9/0.999, eps 1e-8).
inline void optimizer_step(OptimizerState& state, std::span<double> theta,
                           const GradientAccumulator& grad, double lr) {
  if (grad.dim() != theta.size())
    throw std::invalid_argument("optimizer_step: dimension mismatch");
  if (!grad.finite()) throw NumericAbortError("optimizer_step: non-finite gradient");
  ++state.step_count;
  if (state.kind == OptimizerKind::Sgd) {
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * grad.grad[i];
    return;
  }
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = grad.grad[i];
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
    theta[i] -= lr * (state.m[i] / bc1) / (std::sqrt(state.v[i] / bc2) + eps);
  }
}

// log pi(y* | x, trace) summed over answer tokens.
inline double answer_logprob(const Policy& policy, const QAPair& pair,
                             std::span<const TokenId> trace) {
  const std::vector<TokenId> ctx = answer_prefix(pair.question, trace);
  return sequence_log_prob(policy, ctx, pair.answer).total;
}

// Held-out mean log pi(y*|x,z) over k_eval sampled traces per eval pair.
inline double eval_answer_logprob(const Policy& policy, const Dataset& data, int k_eval,
                                  int max_trace_len, std::uint64_t seed, std::uint64_t salt) {
  if (data.eval_count() == 0) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (std::size_t e = 0; e < data.eval_count(); ++e) {
    const QAPair& pair = data.eval_pair(e);
    double pair_total = 0.0;
    for (int k = 0; k < k_eval; ++k) {
      const TraceSample s =
          sample_trace(policy, pair.question, max_trace_len, 1.0,
                       RngStream::derive(seed, RngPurpose::Eval, {salt, e, static_cast<std::uint64_t>(k)}));
      pair_total += answer_logprob(policy, pair, s.tokens);
    }
    total += pair_total / static_cast<double>(k_eval);
  }
  return total / static_cast<double>(data.eval_count());
}

// Same quantity with the empty trace: the no-reasoning baseline.
inline double eval_answer_logprob_empty(const Policy& policy, const Dataset& data) {
  if (data.eval_count() == 0) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (std::size_t e = 0; e < data.eval_count(); ++e)
    total += answer_logprob(policy, data.eval_pair(e), {});
  return total / static_cast<double>(data.eval_count());
}

inline std::unique_ptr<Policy> make_policy(const TrainingConfig& cfg, const Vocabulary& vocab) {
  std::unique_ptr<Policy> p;
  if (cfg.policy == PolicyKind::Tabular)
    p = std::make_unique<TabularPolicy>(vocab, cfg.tabular_order);
  else
    p = std::make_unique<NeuralPolicy>(vocab, cfg.embed_dim, cfg.hidden_dim, cfg.context_window);
  p->init_uniform(RngStream::derive(cfg.seed, RngPurpose::ParamInit));
  return p;
}

class Trainer {
 public:
  using RowCallback = std::function<void(const MetricsRow&)>;

  Trainer(TrainingConfig cfg, Dataset data, std::unique_ptr<Policy> policy_init)
      : cfg_(std::move(cfg)), data_(std::move(data)), policy_(std::move(policy_init)) {
    cfg_.validate();
    if (data_.pairs.empty()) throw std::invalid_argument("trainer: dataset is empty");
    if (data_.train_count == 0) throw std::invalid_argument("trainer: train split is empty");
    if (!policy_) policy_ = make_policy(cfg_, data_.vocab);
    run_warmup();
    reference_ = snapshot(*policy_);
    old_policy_ = snapshot(*policy_);
    optimizer_.init(cfg_.optimizer, policy_->param_count());
    settings_.use_advantage = true;
    settings_.clip_enabled = true;
    settings_.clip_lo = cfg_.clip_lo;
    settings_.clip_hi = cfg_.clip_hi;
    settings_.ratio_on_token_term = cfg_.ratio_on_token_term;
  }

  // Resume from a checkpoint. Refuses a record whose config digest disagrees
  // (total_steps is outside the digest, so the budget may be extended).
  Trainer(TrainingConfig cfg, Dataset data, CheckpointRecord record)
      : cfg_(std::move(cfg)), data_(std::move(data)) {
    cfg_.validate();
    if (record.config_digest != config_digest(cfg_))
      throw CheckpointError("resume refused: config digest mismatch (checkpoint " +
                            record.config_digest + ", config " + config_digest(cfg_) + ")");
    if (record.rng_digest != rng_digest_for(cfg_.seed, record.step))
      throw CheckpointError("resume refused: RNG digest mismatch");
    policy_ = std::move(record.policy);
    old_policy_ = std::move(record.old_policy);
    reference_ = std::move(record.reference_policy);
    optimizer_ = std::move(record.optimizer);
    completed_steps_ = record.step;
    snapshot_version_ = record.snapshot_version;
    last_eval_ = record.last_eval;
    settings_.use_advantage = true;
    settings_.clip_enabled = true;
    settings_.clip_lo = cfg_.clip_lo;
    settings_.clip_hi = cfg_.clip_hi;
    settings_.ratio_on_token_term = cfg_.ratio_on_token_term;
  }

  const TrainingConfig& config() const { return cfg_; }
  const Dataset& dataset() const { return data_; }
  const Policy& policy() const { return *policy_; }
  const Policy& old_policy() const { return *old_policy_; }
  const Policy& reference_policy() const { return *reference_; }
  int completed_steps() const { return completed_steps_; }
  long long snapshot_version() const { return snapshot_version_; }

  void run(const RowCallback& on_row = {}) {
    while (completed_steps_ < cfg_.total_steps) {
      const MetricsRow row = run_step(completed_steps_ + 1);
      ++completed_steps_;
      if (on_row) on_row(row);
    }
  }

  void sync_old_policy() {
    old_policy_ = snapshot(*policy_);
    baseline_cache_.clear();
    ++snapshot_version_;
  }

  CheckpointRecord make_checkpoint() const {
    CheckpointRecord rec;
    rec.config_digest = config_digest(cfg_);
    rec.step = completed_steps_;
    rec.snapshot_version = snapshot_version_;
    rec.rng_digest = rng_digest_for(cfg_.seed, completed_steps_);
    rec.last_eval = last_eval_;
    rec.policy = snapshot(*policy_);
    rec.old_policy = snapshot(*old_policy_);
    rec.reference_policy = snapshot(*reference_);
    rec.optimizer = optimizer_;
    return rec;
  }

 private:
  void run_warmup() {
    if (cfg_.warmup_steps == 0) return;
    OptimizerState warm_opt;
    warm_opt.init(cfg_.optimizer, policy_->param_count());
    const double lr = cfg_.resolved_warmup_lr();
    GradientAccumulator grad(policy_->param_count());
    std::vector<double> weights;
    for (int w = 1; w <= cfg_.warmup_steps; ++w) {
      auto rng = RngStream::derive(cfg_.seed, RngPurpose::Warmup, {static_cast<std::uint64_t>(w)});
      grad.reset();
      for (int j = 0; j < cfg_.batch_size; ++j) {
        const QAPair& pair = data_.pairs[rng.next_below(data_.train_count)];
        const std::vector<TokenId> ctx = answer_prefix(pair.question, {});
        // Per-token mean cross-entropy on the answer, empty trace.
        weights.assign(pair.answer.size(),
                       -1.0 / (static_cast<double>(cfg_.batch_size) *
                               static_cast<double>(pair.answer.size())));
        grad_log_prob(*policy_, ctx, pair.answer, weights, grad);
      }
      optimizer_step(warm_opt, policy_->params(), grad, lr);
    }
  }

  std::size_t train_index_for(int step, int j) {
    const std::uint64_t n = data_.train_count;
    const std::uint64_t pos =
        static_cast<std::uint64_t>(step - 1) * static_cast<std::uint64_t>(cfg_.batch_size) +
        static_cast<std::uint64_t>(j);
    const std::uint64_t epoch = pos / n;
    if (!perm_valid_ || perm_epoch_ != epoch) {
      perm_.resize(n);
      for (std::uint64_t i = 0; i < n; ++i) perm_[i] = i;
      auto rng = RngStream::derive(cfg_.seed, RngPurpose::Shuffle, {epoch});
      for (std::uint64_t i = n; i > 1; --i) std::swap(perm_[i - 1], perm_[rng.next_below(i)]);
      perm_epoch_ = epoch;
      perm_valid_ = true;
    }
    return perm_[pos % n];
  }

  const std::vector<double>& baseline_for(std::size_t pair_index) {
    auto it = baseline_cache_.find(pair_index);
    if (it != baseline_cache_.end()) return it->second;
    const QAPair& pair = data_.pairs[pair_index];
    return baseline_cache_.emplace(pair_index, baseline_probs(*old_policy_, pair.question, pair.answer))
        .first->second;
  }

  MetricsRow run_step(int step) {
    const int b = cfg_.batch_size;
    const int k = cfg_.k_traces;

    std::vector<std::size_t> batch(static_cast<std::size_t>(b));
    for (int j = 0; j < b; ++j) batch[static_cast<std::size_t>(j)] = train_index_for(step, j);

    // Rollouts from pi_old; entropy measured now, against the sampling policy.
    std::vector<std::vector<TraceSample>> rollouts(static_cast<std::size_t>(b));
    double entropy_sum = 0.0, len_sum = 0.0;
    std::size_t forced = 0;
    std::vector<double> lengths;
    lengths.reserve(static_cast<std::size_t>(b * k));
    for (int j = 0; j < b; ++j) {
      const QAPair& pair = data_.pairs[batch[static_cast<std::size_t>(j)]];
      auto& traces = rollouts[static_cast<std::size_t>(j)];
      traces.reserve(static_cast<std::size_t>(k));
      for (int kk = 0; kk < k; ++kk) {
        traces.push_back(sample_trace(
            *old_policy_, pair.question, cfg_.max_trace_len, cfg_.temperature,
            RngStream::derive(cfg_.seed, RngPurpose::Trace,
                              {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(j),
                               static_cast<std::uint64_t>(kk)})));
        const TraceSample& s = traces.back();
        entropy_sum += trace_decision_entropy(*old_policy_, pair.question, s);
        len_sum += static_cast<double>(s.tokens.size());
        lengths.push_back(static_cast<double>(s.tokens.size()));
        if (s.end_forced) ++forced;
      }
    }

    // Mini-batch passes. Chunks are whole prompt groups so advantage
    // normalization always sees its full K-group.
    const int prompts_per_update = std::min(b, std::max(1, cfg_.minibatch_size / k));
    MetricsRow row;
    row.step = step;
    GradientAccumulator grad(policy_->param_count());
    for (int pass = 0; pass < cfg_.passes_per_step; ++pass) {
      for (int chunk_start = 0; chunk_start < b; chunk_start += prompts_per_update) {
        const int chunk_end = std::min(b, chunk_start + prompts_per_update);
        std::vector<BatchItem> items;
        items.reserve(static_cast<std::size_t>(chunk_end - chunk_start));
        for (int j = chunk_start; j < chunk_end; ++j) {
          const std::size_t pair_index = batch[static_cast<std::size_t>(j)];
          const QAPair& pair = data_.pairs[pair_index];
          const std::vector<double>& c_base = baseline_for(pair_index);
          const double baseline_reward = aggregate(cfg_.scheme, c_base, c_base).reward;

          BatchItem item;
          item.pair = &pair;
          item.traces = rollouts[static_cast<std::size_t>(j)];
          item.cond_probs.resize(item.traces.size());
          item.breakdowns.resize(item.traces.size());
          item.ratios.resize(item.traces.size());
          RewardGroup group;
          group.prompt_id = pair_index;
          group.baseline_reward = baseline_reward;
          group.rewards.resize(item.traces.size());
          for (std::size_t kk = 0; kk < item.traces.size(); ++kk) {
            item.cond_probs[kk] =
                conditional_probs(*policy_, pair.question, item.traces[kk].tokens, pair.answer);
            item.breakdowns[kk] = aggregate(cfg_.scheme, item.cond_probs[kk], c_base);
            group.rewards[kk] = item.breakdowns[kk].reward;
            item.ratios[kk] =
                importance_ratio_from_sample(*policy_, pair.question, item.traces[kk]);
          }
          item.advantages = compute_advantages(group);

          if (pass == 0) {
            const double inv_bk = 1.0 / static_cast<double>(b * k);
            for (std::size_t kk = 0; kk < item.traces.size(); ++kk) {
              row.mean_reward += item.breakdowns[kk].reward * inv_bk;
              row.mean_clipped_reward += item.advantages.clipped[kk] * inv_bk;
              double lp = 0.0;
              for (double ci : item.cond_probs[kk]) lp += std::log(std::max(ci, 1e-300));
              row.mean_answer_logprob += lp * inv_bk;
            }
            if (item.advantages.degenerate) row.degenerate_frac += 1.0 / static_cast<double>(b);
          }
          items.push_back(std::move(item));
        }

        grad.reset();
        const LossReport report =
            total_step_gradient(items, *policy_, settings_, cfg_.lambda_format, grad);
        if (pass == 0) {
          const double share = static_cast<double>(chunk_end - chunk_start) / static_cast<double>(b);
          row.format_loss += share * report.format_loss;
        }
        optimizer_step(optimizer_, policy_->params(), grad, cfg_.resolved_lr());
        for (double v : policy_->params())
          if (!std::isfinite(v)) throw NumericAbortError("trainer: non-finite parameter after update");
      }
    }

    if (step % cfg_.sync_period == 0) sync_old_policy();

    row.mean_trace_len = len_sum / static_cast<double>(b * k);
    std::sort(lengths.begin(), lengths.end());
    const std::size_t mid = lengths.size() / 2;
    row.median_trace_len =
        (lengths.size() % 2) ? lengths[mid] : 0.5 * (lengths[mid - 1] + lengths[mid]);
    row.mean_trace_entropy = entropy_sum / static_cast<double>(b * k);
    row.forced_end_frac = static_cast<double>(forced) / static_cast<double>(b * k);

    if (step == 1 || step % cfg_.eval_period == 0) {
      last_eval_ = eval_answer_logprob(*policy_, data_, cfg_.eval_k, cfg_.max_trace_len, cfg_.seed,
                                       static_cast<std::uint64_t>(step));
    }
    row.eval_answer_logprob = last_eval_;
    return row;
  }

  TrainingConfig cfg_;
  Dataset data_;
  std::unique_ptr<Policy> policy_;
  std::unique_ptr<Policy> old_policy_;
  std::unique_ptr<Policy> reference_;
  OptimizerState optimizer_;
  EstimatorSettings settings_;
  int completed_steps_ = 0;
  long long snapshot_version_ = 0;
  double last_eval_ = std::numeric_limits<double>::quiet_NaN();
  std::unordered_map<std::size_t, std::vector<double>> baseline_cache_;
  std::vector<std::size_t> perm_;
  std::uint64_t perm_epoch_ = 0;
  bool perm_valid_ = false;
};

}  // namespace nrt
