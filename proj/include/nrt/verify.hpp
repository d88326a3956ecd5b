#pragma once

/**
 * The release-gate property suite.
 *
 * Each property draws its own seeded random fixtures and returns pass/fail
 * with a one-line detail. The CLI `verify` command prints one line per
 * property; the unit tests assert the same functions.
 */

#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "nrt/advantage.hpp"
#include "nrt/estimator.hpp"
#include "nrt/neural_policy.hpp"
#include "nrt/oracle.hpp"
#include "nrt/policy.hpp"
#include "nrt/rewards.hpp"
#include "nrt/tabular_policy.hpp"

namespace nrt {

struct PropertyResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace verify_detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

inline std::vector<TokenId> random_context(RngStream& rng, const Vocabulary& vocab,
                                           std::size_t max_len) {
  std::vector<TokenId> ctx(rng.next_below(max_len + 1));
  for (auto& t : ctx) t = static_cast<TokenId>(rng.next_below(static_cast<std::uint64_t>(vocab.size())));
  return ctx;
}

inline std::vector<double> random_probs(RngStream& rng, std::size_t n, double lo, double hi) {
  std::vector<double> c(n);
  for (auto& v : c) v = rng.next_uniform(lo, hi);
  return c;
}

// Central-difference check of grad_log_prob for one policy over random
// contexts/targets. Returns the max relative error.
inline double grad_check(const Policy& policy, RngStream& rng, int cases, double h) {
  const std::unique_ptr<Policy> work = policy.clone();
  double worst = 0.0;
  for (int n = 0; n < cases; ++n) {
    const std::vector<TokenId> prefix = random_context(rng, work->vocab(), 6);
    std::vector<TokenId> body(1 + rng.next_below(3));
    for (auto& t : body)
      t = static_cast<TokenId>(rng.next_below(static_cast<std::uint64_t>(work->vocab().size())));
    std::vector<double> weights(body.size());
    for (auto& w : weights) w = rng.next_uniform(-2.0, 2.0);

    GradientAccumulator analytic(work->param_count());
    grad_log_prob(*work, prefix, body, weights, analytic);

    // Probe a handful of coordinates per case; full dimension is covered
    // across cases by random draws.
    for (int probe = 0; probe < 6; ++probe) {
      const std::size_t j = rng.next_below(work->param_count());
      auto theta = work->params();
      const double saved = theta[j];
      const auto weighted_logprob = [&]() {
        double total = 0.0;
        std::vector<TokenId> ctx(prefix);
        TokenDistribution d;
        for (std::size_t i = 0; i < body.size(); ++i) {
          work->forward_into(ctx, d);
          total += weights[i] * d.logprob[static_cast<std::size_t>(body[i])];
          ctx.push_back(body[i]);
        }
        return total;
      };
      theta[j] = saved + h;
      const double hi = weighted_logprob();
      theta[j] = saved - h;
      const double lo = weighted_logprob();
      theta[j] = saved;
      const double numeric = (hi - lo) / (2.0 * h);
      const double denom = std::max({std::abs(numeric), std::abs(analytic.grad[j]), 1e-4});
      worst = std::max(worst, std::abs(numeric - analytic.grad[j]) / denom);
    }
  }
  return worst;
}

}  // namespace verify_detail

inline PropertyResult check_forward_normalization(std::uint64_t seed, int cases = 1000) {
  auto rng = RngStream::derive(seed, RngPurpose::Test, {1});
  const Vocabulary vocab = build_vocabulary(3);
  TabularPolicy tab(vocab, 1);
  NeuralPolicy net(vocab, 4, 8, 4);
  double worst = 0.0;
  for (int n = 0; n < cases; ++n) {
    tab.init_uniform(rng, 2.0);
    net.init_uniform(rng, 1.0);
    const std::vector<TokenId> ctx = verify_detail::random_context(rng, vocab, 8);
    for (const Policy* p : {static_cast<const Policy*>(&tab), static_cast<const Policy*>(&net)}) {
      const TokenDistribution d = p->forward(ctx);
      double sum = 0.0;
      double log_consistency = 0.0;
      for (std::size_t i = 0; i < d.prob.size(); ++i) {
        sum += d.prob[i];
        log_consistency = std::max(log_consistency, std::abs(d.prob[i] - std::exp(d.logprob[i])));
      }
      worst = std::max({worst, std::abs(sum - 1.0), log_consistency});
    }
  }
  return {"forward_normalization", worst <= 1e-9,
          "max |sum p - 1| and p/logp mismatch = " + verify_detail::fmt(worst)};
}

inline PropertyResult check_gradient_tabular(std::uint64_t seed, int cases = 50) {
  auto rng = RngStream::derive(seed, RngPurpose::Test, {2});
  TabularPolicy p(build_vocabulary(3), 1);
  p.init_uniform(rng, 1.0);
  const double worst = verify_detail::grad_check(p, rng, cases, 1e-5);
  return {"gradient_check_tabular", worst <= 1e-4,
          "max rel err = " + verify_detail::fmt(worst)};
}

inline PropertyResult check_gradient_neural(std::uint64_t seed, int cases = 50) {
  auto rng = RngStream::derive(seed, RngPurpose::Test, {3});
  NeuralPolicy p(build_vocabulary(3), 4, 8, 4);
  p.init_uniform(rng, 0.1);
  const double worst = verify_detail::grad_check(p, rng, cases, 1e-5);
  return {"gradient_check_neural", worst <= 1e-4,
          "max rel err = " + verify_detail::fmt(worst)};
}

// Trace-side gradients differentiate the masked, renormalized distribution;
// checked against finite differences of the trace event log-probability.
inline PropertyResult check_masked_gradient(std::uint64_t seed, int cases = 30) {
  auto rng = RngStream::derive(seed, RngPurpose::Test, {12});
  const Vocabulary vocab = build_vocabulary(3);
  double worst = 0.0;
  for (int n = 0; n < cases; ++n) {
    std::unique_ptr<Policy> p;
    if (n % 2 == 0) {
      auto tab = std::make_unique<TabularPolicy>(vocab, 1);
      tab->init_uniform(rng, 1.0);
      p = std::move(tab);
    } else {
      auto net = std::make_unique<NeuralPolicy>(vocab, 4, 8, 4);
      net->init_uniform(rng, 0.3);
      p = std::move(net);
    }
    const std::vector<TokenId> q = {vocab.symbol(static_cast<int>(rng.next_below(3)))};
    const TraceSample s = sample_trace(*p, q, 3, 1.0,
                                       RngStream::derive(seed, RngPurpose::Test,
                                                         {13, static_cast<std::uint64_t>(n)}));
    GradientAccumulator analytic(p->param_count());
    grad_trace_event_log_prob(*p, q, s, 1.0, analytic);
    auto theta = p->params();
    const double h = 1e-5;
    for (int probe = 0; probe < 8; ++probe) {
      const std::size_t j = rng.next_below(p->param_count());
      const double saved = theta[j];
      theta[j] = saved + h;
      const double hi = trace_event_log_prob(*p, q, s);
      theta[j] = saved - h;
      const double lo = trace_event_log_prob(*p, q, s);
      theta[j] = saved;
      const double numeric = (hi - lo) / (2.0 * h);
      const double denom = std::max({std::abs(numeric), std::abs(analytic.grad[j]), 1e-4});
      worst = std::max(worst, std::abs(numeric - analytic.grad[j]) / denom);
    }
  }
  return {"masked_trace_gradient", worst <= 1e-4, "max rel err = " + verify_detail::fmt(worst)};
}

inline PropertyResult check_token_signals(std::uint64_t seed, int cases_per_scheme = 100) {
  auto rng = RngStream::derive(seed, RngPurpose::Test, {4});
  double worst = 0.0;
  for (Scheme s : {Scheme::LogP, Scheme::P, Scheme::GM, Scheme::AM, Scheme::WsInv, Scheme::WsNegLog}) {
    for (int n = 0; n < cases_per_scheme; ++n) {
      const std::size_t t_len = 1 + rng.next_below(8);
      const std::vector<double> c = verify_detail::random_probs(rng, t_len, 1e-3, 1.0 - 1e-3);
      const std::vector<double> base = verify_detail::random_probs(rng, t_len, 1e-3, 1.0 - 1e-3);
      worst = std::max(worst, numeric_signal_check(s, c, base));
    }
  }
  return {"token_signal_vs_finite_difference", worst < 1e-6,
          "max abs err = " + verify_detail::fmt(worst)};
}

inline PropertyResult check_am_gm_inequality(std::uint64_t seed, int cases = 2000) {
  auto rng = RngStream::derive(seed, RngPurpose::Test, {5});
  bool ok = true;
  double margin = 1.0;
  for (int n = 0; n < cases && ok; ++n) {
    const std::size_t t_len = 1 + rng.next_below(8);
    std::vector<double> c = verify_detail::random_probs(rng, t_len, 1e-6, 1.0);
    const double gm = aggregate_value(Scheme::GM, c);
    const double am = aggregate_value(Scheme::AM, c);
    ok = gm <= am + 1e-12;
    margin = std::min(margin, am - gm);
    // Equality iff all entries equal.
    std::fill(c.begin(), c.end(), c[0]);
    ok = ok && std::abs(aggregate_value(Scheme::GM, c) - aggregate_value(Scheme::AM, c)) <= 1e-12;
  }
  return {"am_gm_inequality", ok, "min(AM - GM) = " + verify_detail::fmt(margin)};
}

inline PropertyResult check_gm_p_identity(std::uint64_t seed, int cases = 2000) {
  auto rng = RngStream::derive(seed, RngPurpose::Test, {6});
  double worst = 0.0;
  for (int n = 0; n < cases; ++n) {
    const std::size_t t_len = 1 + rng.next_below(12);
    const std::vector<double> c = verify_detail::random_probs(rng, t_len, 1e-6, 1.0);
    const double gm = aggregate_value(Scheme::GM, c);
    const double p = aggregate_value(Scheme::P, c);
    worst = std::max(worst,
                     std::abs(std::log(gm) - std::log(p) / static_cast<double>(t_len)));
  }
  return {"gm_equals_p_pow_1_over_t", worst <= 1e-12,
          "max log-domain err = " + verify_detail::fmt(worst)};
}

inline PropertyResult check_advantage_contract(std::uint64_t seed, int groups = 10000) {
  auto rng = RngStream::derive(seed, RngPurpose::Test, {7});
  bool ok = true;
  std::string fail;
  for (int n = 0; n < groups && ok; ++n) {
    RewardGroup g;
    g.rewards.resize(2 + rng.next_below(7));
    const bool tie = rng.next_below(5) == 0;
    const double v = rng.next_uniform(-1.0, 1.0);
    for (auto& r : g.rewards) r = tie ? v : rng.next_uniform(-1.0, 1.0);
    g.baseline_reward = rng.next_uniform(-1.0, 1.0);
    const AdvantageGroup a = compute_advantages(g);
    for (double c : a.clipped) ok = ok && c >= 0.0;
    if (!ok) { fail = "negative clipped reward"; break; }
    if (a.degenerate) {
      for (double adv : a.advantages) ok = ok && adv == 0.0;
      if (!ok) { fail = "degenerate group with nonzero advantage"; break; }
      continue;
    }
    double mean = 0.0, var = 0.0;
    for (double adv : a.advantages) mean += adv;
    mean /= static_cast<double>(a.advantages.size());
    for (double adv : a.advantages) var += (adv - mean) * (adv - mean);
    var /= static_cast<double>(a.advantages.size());
    ok = std::abs(mean) <= 1e-9 && std::abs(std::sqrt(var) - 1.0) <= 1e-6;
    if (!ok) { fail = "mean/std off"; break; }
    // Ordering preserved.
    for (std::size_t i = 0; i < a.clipped.size() && ok; ++i)
      for (std::size_t j = i + 1; j < a.clipped.size() && ok; ++j)
        if (a.clipped[i] < a.clipped[j]) ok = a.advantages[i] < a.advantages[j];
        else if (a.clipped[i] > a.clipped[j]) ok = a.advantages[i] > a.advantages[j];
    if (!ok) fail = "ordering not preserved";
  }
  return {"advantage_contract", ok, ok ? "mean 0, std 1, ordering kept" : fail};
}

inline PropertyResult check_trace_event_mass(std::uint64_t seed, int cases = 20) {
  auto rng = RngStream::derive(seed, RngPurpose::Test, {8});
  const Vocabulary vocab = build_vocabulary(3);
  double worst = 0.0;
  for (int n = 0; n < cases; ++n) {
    TabularPolicy p(vocab, 1);
    p.init_uniform(rng, 2.0);
    EnumerationSpec spec;
    spec.max_len = 3;
    spec.pair.question = {vocab.symbol(0), vocab.symbol(1)};
    spec.pair.answer = {vocab.symbol(2)};
    spec.scheme = Scheme::AM;
    const auto report = enumerate_objective(spec, p);
    worst = std::max(worst, std::abs(report.mass - 1.0));
  }
  return {"trace_event_space_mass", worst <= 1e-8, "max |mass - 1| = " + verify_detail::fmt(worst)};
}

inline PropertyResult check_importance_ratio_identity(std::uint64_t seed, int cases = 50) {
  auto rng = RngStream::derive(seed, RngPurpose::Test, {9});
  const Vocabulary vocab = build_vocabulary(3);
  TabularPolicy p(vocab, 1);
  p.init_uniform(rng, 1.0);
  const auto old = snapshot(p);
  bool ok = true;
  for (int n = 0; n < cases && ok; ++n) {
    const std::vector<TokenId> q = {vocab.symbol(static_cast<int>(rng.next_below(3)))};
    const TraceSample s =
        sample_trace(p, q, 4, 1.0, RngStream::derive(seed, RngPurpose::Test, {10, static_cast<std::uint64_t>(n)}));
    ok = importance_ratio(p, *old, q, s) == 1.0;
  }
  return {"importance_ratio_identity", ok, "theta == theta_old gives ratio exactly 1"};
}

inline std::vector<PropertyResult> run_property_suite(std::uint64_t seed) {
  return {
      check_forward_normalization(seed), check_gradient_tabular(seed),
      check_gradient_neural(seed),       check_masked_gradient(seed),
      check_token_signals(seed),         check_am_gm_inequality(seed),
      check_gm_p_identity(seed),         check_advantage_contract(seed),
      check_trace_event_mass(seed),      check_importance_ratio_identity(seed),
  };
}

}  // namespace nrt
