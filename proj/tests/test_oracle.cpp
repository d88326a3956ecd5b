#include <doctest.h>

#include <cmath>

#include "nrt/oracle.hpp"
#include "nrt/tabular_policy.hpp"

using namespace nrt;

namespace {

EnumerationSpec small_spec(const Vocabulary& vocab, Scheme scheme, int max_len) {
  EnumerationSpec spec;
  spec.max_len = max_len;
  spec.scheme = scheme;
  spec.pair.question = {vocab.symbol(0), vocab.symbol(1)};
  spec.pair.answer = {vocab.symbol(1), vocab.symbol(0)};
  return spec;
}

}  // namespace

TEST_CASE("event counting matches the closed form") {
  CHECK(enumeration_event_count(2, 2) == 1 + 2 + 4);
  CHECK(enumeration_event_count(3, 2) == 1 + 3 + 9);
  CHECK(enumeration_event_count(3, 0) == 1);
  CHECK(enumeration_event_count(4, 10) > kEnumerationBound);
}

TEST_CASE("enumeration bound is enforced") {
  const Vocabulary vocab = build_vocabulary(4);
  TabularPolicy p(vocab, 1);
  EnumerationSpec spec = small_spec(vocab, Scheme::AM, 20);
  CHECK_THROWS_AS(enumerate_objective(spec, p), std::invalid_argument);
}

TEST_CASE("probability mass sums to one for random policies") {
  const Vocabulary vocab = build_vocabulary(2);
  auto rng = RngStream::derive(31, RngPurpose::Test);
  for (int n = 0; n < 10; ++n) {
    TabularPolicy p(vocab, 1);
    p.init_uniform(rng, 2.5);
    const auto report = enumerate_objective(small_spec(vocab, Scheme::AM, 2), p);
    CHECK(std::abs(report.mass - 1.0) <= 1e-12);
  }
}

TEST_CASE("always-END policy collapses the objective to the empty-trace reward") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 0);
  p.params()[Vocabulary::kEndThink] = 200.0;
  p.params()[static_cast<std::size_t>(vocab.symbol(0))] = 0.4;  // asymmetric answer head
  const EnumerationSpec spec = small_spec(vocab, Scheme::GM, 3);
  const auto report = enumerate_objective(spec, p);
  const std::vector<double> c = conditional_probs(p, spec.pair.question, {}, spec.pair.answer);
  CHECK(report.objective == doctest::Approx(aggregate(Scheme::GM, c).reward).epsilon(1e-9));
}

TEST_CASE("trace-independent answer head makes J the empty-trace AM reward") {
  const Vocabulary vocab = build_vocabulary(3);
  auto rng = RngStream::derive(32, RngPurpose::Test);
  for (int n = 0; n < 10; ++n) {
    TabularPolicy p(vocab, 0);  // order 0: one shared row, reward constant in z
    p.init_uniform(rng, 1.5);
    const EnumerationSpec spec = small_spec(vocab, Scheme::AM, 2);
    const auto report = enumerate_objective(spec, p);
    const std::vector<double> c = conditional_probs(p, spec.pair.question, {}, spec.pair.answer);
    CHECK(report.objective == doctest::Approx(aggregate(Scheme::AM, c).reward).epsilon(1e-10));
  }
}

TEST_CASE("enumeration order does not change the objective") {
  const Vocabulary vocab = build_vocabulary(3);
  TabularPolicy p(vocab, 1);
  p.init_uniform(RngStream::derive(33, RngPurpose::ParamInit), 1.0);
  EnumerationSpec spec = small_spec(vocab, Scheme::GM, 3);
  const auto report = enumerate_objective(spec, p);

  // Independent route: lengths ascending, odometer order within a length.
  const std::vector<TokenId> alphabet = vocab.symbol_ids();
  double j_sum = 0.0, mass = 0.0;
  for (int len = 0; len <= spec.max_len; ++len) {
    std::vector<std::size_t> digits(static_cast<std::size_t>(len), 0);
    while (true) {
      std::vector<TokenId> trace(static_cast<std::size_t>(len));
      for (int i = 0; i < len; ++i) trace[static_cast<std::size_t>(i)] = alphabet[digits[static_cast<std::size_t>(i)]];
      TraceSample ev;
      ev.tokens = trace;
      ev.end_forced = (len == spec.max_len);
      const double prob = std::exp(trace_event_log_prob(p, spec.pair.question, ev));
      const std::vector<double> c = conditional_probs(p, spec.pair.question, trace, spec.pair.answer);
      j_sum += prob * aggregate(spec.scheme, c).reward;
      mass += prob;
      int pos = len - 1;
      while (pos >= 0 && ++digits[static_cast<std::size_t>(pos)] == alphabet.size()) {
        digits[static_cast<std::size_t>(pos)] = 0;
        --pos;
      }
      if (pos < 0) break;
    }
  }
  CHECK(report.objective == doctest::Approx(j_sum).epsilon(1e-12));
  CHECK(report.mass == doctest::Approx(mass).epsilon(1e-12));
}

TEST_CASE("constant-reward configuration has zero gradient") {
  // Order-0 answer head + WS_INV with an un-frozen baseline: every trace and
  // every parameter vector yields R = T exactly, so J is identically T.
  const Vocabulary vocab = build_vocabulary(3);
  TabularPolicy p(vocab, 0);
  p.init_uniform(RngStream::derive(34, RngPurpose::ParamInit), 0.5);
  EnumerationSpec spec = small_spec(vocab, Scheme::WsInv, 2);
  const auto work = p.clone();
  auto theta = work->params();
  const double h = 1e-4;
  for (std::size_t j = 0; j < theta.size(); ++j) {
    const double saved = theta[j];
    theta[j] = saved + h;
    const double hi = enumerate_objective(spec, *work).objective;
    theta[j] = saved - h;
    const double lo = enumerate_objective(spec, *work).objective;
    theta[j] = saved;
    CHECK(std::abs((hi - lo) / (2 * h)) <= 1e-6);
  }
}

TEST_CASE("halving h shrinks the finite-difference error like h^2") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 1);
  p.init_uniform(RngStream::derive(35, RngPurpose::ParamInit), 1.0);
  const EnumerationSpec spec = small_spec(vocab, Scheme::GM, 2);
  const std::vector<double> ref = exact_gradient(spec, p, 1e-6);
  const std::vector<double> g_coarse = exact_gradient(spec, p, 8e-4);
  const std::vector<double> g_fine = exact_gradient(spec, p, 4e-4);
  double err_coarse = 0.0, err_fine = 0.0;
  for (std::size_t j = 0; j < ref.size(); ++j) {
    err_coarse = std::max(err_coarse, std::abs(g_coarse[j] - ref[j]));
    err_fine = std::max(err_fine, std::abs(g_fine[j] - ref[j]));
  }
  REQUIRE(err_coarse > 0.0);
  // O(h^2): a 2x step cut should shrink the error ~4x; allow slack.
  CHECK(err_fine <= err_coarse / 2.5);
}

TEST_CASE("h outside the sane range is rejected") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 1);
  const EnumerationSpec spec = small_spec(vocab, Scheme::AM, 1);
  CHECK_THROWS_AS(exact_gradient(spec, p, 1e-9), std::invalid_argument);
  CHECK_THROWS_AS(exact_gradient(spec, p, 0.5), std::invalid_argument);
}

TEST_CASE("finite differences match the enumerated analytic expectation") {
  const Vocabulary vocab = build_vocabulary(2);
  auto rng = RngStream::derive(36, RngPurpose::Test);
  for (Scheme scheme : {Scheme::AM, Scheme::GM, Scheme::LogP, Scheme::WsNegLog}) {
    TabularPolicy p(vocab, 1);
    p.init_uniform(rng, 1.0);
    const EnumerationSpec spec = small_spec(vocab, scheme, 2);
    const std::vector<double> numeric = exact_gradient(spec, p, 1e-5);
    const std::vector<double> analytic = analytic_expected_gradient(spec, p);
    for (std::size_t j = 0; j < numeric.size(); ++j) {
      const double denom = std::max({std::abs(numeric[j]), std::abs(analytic[j]), 1e-3});
      CAPTURE(scheme_name(scheme));
      CHECK(std::abs(numeric[j] - analytic[j]) / denom <= 1e-4);
    }
  }
}

TEST_CASE("monte carlo estimator agrees with the exact gradient (small run)") {
  const Vocabulary vocab = build_vocabulary(2);
  for (Scheme scheme : {Scheme::AM, Scheme::GM}) {
    TabularPolicy p(vocab, 1);
    p.init_uniform(RngStream::derive(37, RngPurpose::ParamInit), 0.8);
    const EnumerationSpec spec = small_spec(vocab, scheme, 2);
    const EstimatorComparison cmp = compare_estimator(spec, p, 30000, 99);
    CAPTURE(scheme_name(scheme));
    CHECK(cmp.judged);
    CHECK(cmp.max_abs_z < 5.0);
  }
}

TEST_CASE("tiny sample counts are reported but not judged") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 1);
  const EnumerationSpec spec = small_spec(vocab, Scheme::AM, 1);
  const EstimatorComparison cmp = compare_estimator(spec, p, 10, 5);
  CHECK(cmp.samples == 10);
  CHECK_FALSE(cmp.judged);
}

TEST_CASE("the combined report carries objective, mass, and gradient") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 1);
  p.init_uniform(RngStream::derive(40, RngPurpose::ParamInit), 1.0);
  const EnumerationSpec spec = small_spec(vocab, Scheme::GM, 2);
  const ExactObjectiveReport r = enumerate_with_gradient(spec, p);
  CHECK(r.gradient.size() == p.param_count());
  CHECK(std::abs(r.mass - 1.0) <= 1e-10);
  const std::vector<double> direct = exact_gradient(spec, p);
  for (std::size_t j = 0; j < direct.size(); ++j) CHECK(r.gradient[j] == direct[j]);
  CHECK(r.wall_seconds >= 0.0);
}

TEST_CASE("report dump has fixed field order") {
  const Vocabulary vocab = build_vocabulary(2);
  TabularPolicy p(vocab, 1);
  EnumerationSpec spec = small_spec(vocab, Scheme::AM, 1);
  spec.dump_contributions = true;
  const auto report = enumerate_objective(spec, p);
  const std::string text = format_report(report);
  CHECK(text.find("objective ") == 0);
  CHECK(text.find("mass ") != std::string::npos);
  CHECK(text.find("events 3") != std::string::npos);  // empty stop + 2 forced
  CHECK(format_report(enumerate_objective(spec, p)) == text);
}
