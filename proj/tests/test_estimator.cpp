#include <doctest.h>

#include <cmath>

#include "nrt/estimator.hpp"
#include "nrt/tabular_policy.hpp"

using namespace nrt;

namespace {

// Builds a one-prompt BatchItem under `policy` (acting as both theta and
// pi_old) with everything the estimator needs precomputed.
BatchItem make_item(const Policy& policy, const QAPair& pair, Scheme scheme, int k, int max_len,
                    std::uint64_t seed) {
  BatchItem item;
  item.pair = &pair;
  const std::vector<double> c_base = baseline_probs(policy, pair.question, pair.answer);
  RewardGroup group;
  group.baseline_reward = aggregate(scheme, c_base, c_base).reward;
  for (int kk = 0; kk < k; ++kk) {
    item.traces.push_back(sample_trace(policy, pair.question, max_len, 1.0,
                                       RngStream::derive(seed, RngPurpose::Trace,
                                                         {static_cast<std::uint64_t>(kk)})));
    item.cond_probs.push_back(
        conditional_probs(policy, pair.question, item.traces.back().tokens, pair.answer));
    item.breakdowns.push_back(aggregate(scheme, item.cond_probs.back(), c_base));
    group.rewards.push_back(item.breakdowns.back().reward);
    item.ratios.push_back(importance_ratio_from_sample(policy, pair.question, item.traces.back()));
  }
  if (k >= 2) item.advantages = compute_advantages(group);
  return item;
}

// Test-only tabular oracle: the weighted cross-entropy gradient assembled
// directly from softmax rows, independent of the estimator path.
std::vector<double> weighted_ce_gradient(const TabularPolicy& p, const QAPair& pair,
                                         std::span<const TokenId> trace,
                                         std::span<const double> signals) {
  std::vector<double> grad(p.param_count(), 0.0);
  const std::size_t v = static_cast<std::size_t>(p.vocab().size());
  std::vector<TokenId> ctx = answer_prefix(pair.question, trace);
  for (std::size_t i = 0; i < pair.answer.size(); ++i) {
    const TokenId last = ctx.empty() ? Vocabulary::kEos : ctx.back();
    const std::size_t row = static_cast<std::size_t>(last) * v;
    double max_logit = p.params()[row];
    for (std::size_t c = 1; c < v; ++c) max_logit = std::max(max_logit, p.params()[row + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += std::exp(p.params()[row + c] - max_logit);
    for (std::size_t c = 0; c < v; ++c)
      grad[row + c] -= signals[i] * std::exp(p.params()[row + c] - max_logit) / z;
    grad[row + static_cast<std::size_t>(pair.answer[i])] += signals[i];
    ctx.push_back(pair.answer[i]);
  }
  return grad;
}

}  // namespace

TEST_CASE("importance ratio is exactly 1 on-policy") {
  const Vocabulary vocab = build_vocabulary(3);
  TabularPolicy p(vocab, 1);
  p.init_uniform(RngStream::derive(1, RngPurpose::ParamInit), 1.0);
  const auto old = snapshot(p);
  const std::vector<TokenId> q = {vocab.symbol(0), vocab.symbol(2)};
  for (int n = 0; n < 20; ++n) {
    const TraceSample s = sample_trace(p, q, 5, 1.0,
                                       RngStream::derive(2, RngPurpose::Trace, {static_cast<std::uint64_t>(n)}));
    CHECK(importance_ratio(p, *old, q, s) == 1.0);
    CHECK(importance_ratio_from_sample(p, q, s) == 1.0);
  }
}

TEST_CASE("log-space ratios survive traces of length 64") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 0);
  p.params()[Vocabulary::kEndThink] = -2000.0;  // never stop naturally
  const auto old = snapshot(p);
  const std::vector<TokenId> q = {vocab.symbol(0)};
  const TraceSample s = sample_trace(p, q, 64, 1.0, RngStream::derive(3, RngPurpose::Trace, {1}));
  REQUIRE(s.tokens.size() == 64);
  REQUIRE(s.end_forced);
  const double r = importance_ratio(p, *old, q, s);
  CHECK(std::isfinite(r));
  CHECK(r == 1.0);
}

TEST_CASE("doubling a logit moves the ratio exactly as direct recomputation") {
  const Vocabulary vocab = build_vocabulary(3);
  TabularPolicy p(vocab, 0);
  auto theta = p.params();
  theta[static_cast<std::size_t>(vocab.symbol(0))] = 0.7;
  theta[static_cast<std::size_t>(vocab.symbol(1))] = -0.3;
  const auto old = snapshot(p);
  const std::vector<TokenId> q = {vocab.symbol(1)};
  const TraceSample s = sample_trace(p, q, 4, 1.0, RngStream::derive(4, RngPurpose::Trace, {9}));

  theta[static_cast<std::size_t>(vocab.symbol(0))] *= 2.0;
  const double ratio = importance_ratio(p, *old, q, s);

  // Direct recomputation: product of masked softmax probabilities, written
  // out longhand against both parameter vectors.
  const auto event_prob = [&](const Policy& pol) {
    const std::vector<TokenId> support = trace_support(vocab);
    double prob = 1.0;
    std::vector<TokenId> ctx = trace_prefix(q);
    auto step_prob = [&](TokenId target) {
      std::vector<double> logits(static_cast<std::size_t>(vocab.size()));
      pol.forward_logits(ctx, logits);
      double z = 0.0;
      for (TokenId t : support) z += std::exp(logits[static_cast<std::size_t>(t)]);
      return std::exp(logits[static_cast<std::size_t>(target)]) / z;
    };
    for (TokenId t : s.tokens) {
      prob *= step_prob(t);
      ctx.push_back(t);
    }
    if (!s.end_forced) prob *= step_prob(Vocabulary::kEndThink);
    return prob;
  };
  CHECK(ratio == doctest::Approx(event_prob(p) / event_prob(*old)).epsilon(1e-9));
}

TEST_CASE("format loss vanishes when the delimiters are certain") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy ctx_policy(vocab, 1);
  auto theta = ctx_policy.params();
  const std::size_t v = static_cast<std::size_t>(vocab.size());
  // After EOS-ish empty context (last token = question symbol), favor START.
  for (std::size_t row = 0; row < theta.size() / v; ++row) {
    theta[row * v + Vocabulary::kStartThink] = 2000.0;  // START after anything
  }
  // After START, favor END (row keyed by START).
  theta[static_cast<std::size_t>(Vocabulary::kStartThink) * v + Vocabulary::kStartThink] = 0.0;
  theta[static_cast<std::size_t>(Vocabulary::kStartThink) * v + Vocabulary::kEndThink] = 4000.0;
  const std::vector<TokenId> q = {vocab.symbol(0)};
  CHECK(format_loss_value(ctx_policy, q, {}) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("format loss of the uniform policy is 2 ln 6") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 1);  // uniform over 6
  const std::vector<TokenId> q = {vocab.symbol(0)};
  const std::vector<TokenId> z = {vocab.symbol(1)};
  CHECK(format_loss_value(p, q, z) == doctest::Approx(2.0 * std::log(6.0)).epsilon(1e-12));
}

TEST_CASE("format gradient matches finite differences") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 1);
  p.init_uniform(RngStream::derive(5, RngPurpose::ParamInit), 1.0);
  const std::vector<TokenId> q = {vocab.symbol(1)};
  const std::vector<TokenId> z = {vocab.symbol(0), vocab.symbol(0)};
  GradientAccumulator analytic(p.param_count());
  format_loss_gradient(p, q, z, 1.0, analytic);
  auto theta = p.params();
  const double h = 1e-6;
  for (std::size_t j = 0; j < p.param_count(); ++j) {
    const double saved = theta[j];
    theta[j] = saved + h;
    const double hi = format_loss_value(p, q, z);
    theta[j] = saved - h;
    const double lo = format_loss_value(p, q, z);
    theta[j] = saved;
    CHECK(analytic.grad[j] == doctest::Approx((hi - lo) / (2 * h)).epsilon(1e-4));
  }
}

TEST_CASE("zero advantages and zero signals leave the accumulator unchanged") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 1);
  p.init_uniform(RngStream::derive(6, RngPurpose::ParamInit), 0.5);
  QAPair pair;
  pair.question = {vocab.symbol(0)};
  pair.answer = {vocab.symbol(1)};
  BatchItem item = make_item(p, pair, Scheme::AM, 3, 3, 11);
  item.advantages.degenerate = true;
  for (auto& a : item.advantages.advantages) a = 0.0;
  for (auto& b : item.breakdowns)
    for (auto& s : b.token_signal) s = 0.0;
  GradientAccumulator grad(p.param_count());
  EstimatorSettings settings;
  nrt_gradient(item, p, settings, grad);
  for (double g : grad.grad) CHECK(g == 0.0);
}

TEST_CASE("clipping is inactive on-policy") {
  const Vocabulary vocab = build_vocabulary(3);
  TabularPolicy p(vocab, 1);
  p.init_uniform(RngStream::derive(7, RngPurpose::ParamInit), 1.0);
  QAPair pair;
  pair.question = {vocab.symbol(0), vocab.symbol(1)};
  pair.answer = {vocab.symbol(2), vocab.symbol(0)};
  const BatchItem item = make_item(p, pair, Scheme::GM, 4, 3, 12);

  EstimatorSettings clipped;
  clipped.clip_lo = 1e-9;  // arbitrarily tight range still inactive at r = 1
  clipped.clip_hi = 1e-9;
  EstimatorSettings unclipped;
  unclipped.clip_enabled = false;

  GradientAccumulator g1(p.param_count()), g2(p.param_count());
  const LossReport r1 = nrt_gradient(item, p, clipped, g1);
  const LossReport r2 = nrt_gradient(item, p, unclipped, g2);
  CHECK(r1.clip_fraction == 0.0);
  CHECK(r1.trace_term == r2.trace_term);
  for (std::size_t j = 0; j < g1.dim(); ++j) CHECK(g1.grad[j] == g2.grad[j]);
}

TEST_CASE("token term equals the weighted cross-entropy oracle") {
  const Vocabulary vocab = build_vocabulary(3);
  TabularPolicy p(vocab, 1);
  p.init_uniform(RngStream::derive(8, RngPurpose::ParamInit), 1.2);
  QAPair pair;
  pair.question = {vocab.symbol(2)};
  pair.answer = {vocab.symbol(0), vocab.symbol(1), vocab.symbol(0)};
  BatchItem item = make_item(p, pair, Scheme::WsNegLog, 2, 3, 13);
  // Silence the trace term: zero advantages, keep token signals.
  item.advantages.degenerate = true;
  for (auto& a : item.advantages.advantages) a = 0.0;

  GradientAccumulator grad(p.param_count());
  EstimatorSettings settings;
  nrt_gradient(item, p, settings, grad);

  std::vector<double> expect(p.param_count(), 0.0);
  for (std::size_t k = 0; k < item.traces.size(); ++k) {
    const std::vector<double> ce = weighted_ce_gradient(p, pair, item.traces[k].tokens,
                                                        item.breakdowns[k].token_signal);
    // Loss gradient: minus the ascent CE gradient, averaged over K.
    for (std::size_t j = 0; j < expect.size(); ++j)
      expect[j] -= ce[j] / static_cast<double>(item.traces.size());
  }
  for (std::size_t j = 0; j < expect.size(); ++j)
    CHECK(grad.grad[j] == doctest::Approx(expect[j]).epsilon(1e-9));
}

TEST_CASE("logp token term reduces to the plain maximum-likelihood gradient") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 1);
  p.init_uniform(RngStream::derive(9, RngPurpose::ParamInit), 0.8);
  QAPair pair;
  pair.question = {vocab.symbol(1)};
  pair.answer = {vocab.symbol(0), vocab.symbol(1)};
  BatchItem item = make_item(p, pair, Scheme::LogP, 2, 2, 14);
  item.advantages.degenerate = true;
  for (auto& a : item.advantages.advantages) a = 0.0;
  for (const auto& b : item.breakdowns)
    for (double s : b.token_signal) CHECK(s == 1.0);

  GradientAccumulator grad(p.param_count());
  EstimatorSettings settings;
  nrt_gradient(item, p, settings, grad);

  std::vector<double> expect(p.param_count(), 0.0);
  const std::vector<double> ones(pair.answer.size(), 1.0);
  for (std::size_t k = 0; k < item.traces.size(); ++k) {
    const std::vector<double> mle = weighted_ce_gradient(p, pair, item.traces[k].tokens, ones);
    for (std::size_t j = 0; j < expect.size(); ++j)
      expect[j] -= mle[j] / static_cast<double>(item.traces.size());
  }
  for (std::size_t j = 0; j < expect.size(); ++j)
    CHECK(grad.grad[j] == doctest::Approx(expect[j]).epsilon(1e-9));
}

TEST_CASE("clip monotonicity: wider ranges never admit less per trace") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 1);
  p.init_uniform(RngStream::derive(10, RngPurpose::ParamInit), 1.0);
  QAPair pair;
  pair.question = {vocab.symbol(0)};
  pair.answer = {vocab.symbol(1)};
  BatchItem item = make_item(p, pair, Scheme::GM, 4, 3, 15);
  // Force a spread of off-policy ratios and signed advantages.
  item.ratios = {0.5, 0.9, 1.2, 2.0};
  item.advantages.degenerate = false;
  item.advantages.advantages = {1.0, -1.0, 1.0, -1.0};

  const auto admitted = [&](double lo, double hi) {
    EstimatorSettings s;
    s.clip_lo = lo;
    s.clip_hi = hi;
    double total = 0.0;
    for (std::size_t k = 0; k < item.ratios.size(); ++k) {
      const auto surr = detail::trace_surrogate(item.ratios[k], item.advantages.advantages[k], s);
      total += std::abs(surr.grad_coeff);
    }
    return total;
  };
  const double narrow = admitted(0.05, 0.05);
  const double mid = admitted(0.2, 0.28);
  const double wide = admitted(0.6, 1.2);
  CHECK(narrow <= mid + 1e-12);
  CHECK(mid <= wide + 1e-12);
}

TEST_CASE("total_step_gradient with lambda 0 equals the NRT term alone") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 1);
  p.init_uniform(RngStream::derive(11, RngPurpose::ParamInit), 0.7);
  QAPair pair;
  pair.question = {vocab.symbol(0)};
  pair.answer = {vocab.symbol(1)};
  const BatchItem item = make_item(p, pair, Scheme::AM, 3, 2, 16);
  const std::vector<BatchItem> batch = {item};

  GradientAccumulator with_format(p.param_count()), without(p.param_count()), nrt_only(p.param_count());
  EstimatorSettings settings;
  const LossReport r0 = total_step_gradient(batch, p, settings, 0.0, without);
  nrt_gradient(item, p, settings, nrt_only);
  for (std::size_t j = 0; j < without.dim(); ++j)
    CHECK(without.grad[j] == doctest::Approx(nrt_only.grad[j]).epsilon(1e-15));
  CHECK(r0.total == doctest::Approx(r0.trace_term + r0.token_term).epsilon(1e-12));

  const LossReport r1 = total_step_gradient(batch, p, settings, 0.3, with_format);
  CHECK(r1.total == doctest::Approx(r1.trace_term + r1.token_term + 0.3 * r1.format_loss).epsilon(1e-12));
}

TEST_CASE("single-trace degenerate item: trace term zero, token and format terms alive") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 1);
  p.init_uniform(RngStream::derive(12, RngPurpose::ParamInit), 0.6);
  QAPair pair;
  pair.question = {vocab.symbol(1)};
  pair.answer = {vocab.symbol(0)};
  BatchItem item = make_item(p, pair, Scheme::GM, 1, 2, 17);
  item.advantages.clipped = {0.0};
  item.advantages.advantages = {0.0};
  item.advantages.degenerate = true;

  GradientAccumulator grad(p.param_count());
  EstimatorSettings settings;
  const std::vector<BatchItem> batch = {item};
  const LossReport r = total_step_gradient(batch, p, settings, 0.3, grad);
  CHECK(r.trace_term == 0.0);
  CHECK(r.token_term != 0.0);
  CHECK(r.format_loss > 0.0);
  bool any = false;
  for (double g : grad.grad) any = any || g != 0.0;
  CHECK(any);
}

TEST_CASE("ratio_on_token_term scales the token gradient by the raw ratio") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 1);
  p.init_uniform(RngStream::derive(13, RngPurpose::ParamInit), 0.9);
  QAPair pair;
  pair.question = {vocab.symbol(0)};
  pair.answer = {vocab.symbol(1), vocab.symbol(0)};
  BatchItem item = make_item(p, pair, Scheme::GM, 2, 2, 19);
  item.ratios = {1.7, 0.4};  // off-policy
  item.advantages.degenerate = true;  // isolate the token term
  for (auto& a : item.advantages.advantages) a = 0.0;

  EstimatorSettings plain;
  EstimatorSettings scaled;
  scaled.ratio_on_token_term = true;
  GradientAccumulator g_plain(p.param_count());
  nrt_gradient(item, p, plain, g_plain);

  // Reference: scale each trace's signals by its ratio, then run plain.
  BatchItem manual = item;
  for (std::size_t k = 0; k < manual.breakdowns.size(); ++k)
    for (auto& s : manual.breakdowns[k].token_signal) s *= item.ratios[k];
  GradientAccumulator g_manual(p.param_count()), g_scaled(p.param_count());
  nrt_gradient(manual, p, plain, g_manual);
  nrt_gradient(item, p, scaled, g_scaled);
  bool differs_from_plain = false;
  for (std::size_t j = 0; j < g_scaled.dim(); ++j) {
    CHECK(g_scaled.grad[j] == doctest::Approx(g_manual.grad[j]).epsilon(1e-12));
    if (g_scaled.grad[j] != g_plain.grad[j]) differs_from_plain = true;
  }
  CHECK(differs_from_plain);
}

TEST_CASE("non-finite ratios abort") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 1);
  QAPair pair;
  pair.question = {vocab.symbol(0)};
  pair.answer = {vocab.symbol(1)};
  BatchItem item = make_item(p, pair, Scheme::AM, 2, 2, 18);
  item.ratios[0] = std::numeric_limits<double>::quiet_NaN();
  GradientAccumulator grad(p.param_count());
  EstimatorSettings settings;
  CHECK_THROWS_AS(nrt_gradient(item, p, settings, grad), NumericAbortError);
}
