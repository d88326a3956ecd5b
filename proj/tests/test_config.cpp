#include <doctest.h>

#include <sstream>

#include "nrt/checkpoint.hpp"
#include "nrt/config.hpp"

using namespace nrt;

TEST_CASE("config text round trips through the parser") {
  TrainingConfig c;
  c.scheme = Scheme::WsNegLog;
  c.policy = PolicyKind::Tabular;
  c.k_traces = 4;
  c.learning_rate = 0.05;
  c.seed = 1234;
  c.ratio_on_token_term = true;
  std::istringstream in(config_to_text(c));
  const TrainingConfig back = parse_config_text(in);
  CHECK(config_to_text(back) == config_to_text(c));
  CHECK(config_digest(back) == config_digest(c));
}

TEST_CASE("unknown keys are errors, never ignored") {
  std::istringstream in("scheme = gm\nfoo = 1\n");
  CHECK_THROWS_AS(parse_config_text(in), ConfigError);
}

TEST_CASE("malformed lines and values are rejected") {
  {
    std::istringstream in("scheme gm\n");
    CHECK_THROWS_AS(parse_config_text(in), ConfigError);
  }
  {
    std::istringstream in("k_traces = four\n");
    CHECK_THROWS_AS(parse_config_text(in), ConfigError);
  }
  {
    std::istringstream in("scheme = banana\n");
    CHECK_THROWS_AS(parse_config_text(in), ConfigError);
  }
}

TEST_CASE("comments and blank lines are fine") {
  std::istringstream in("# a comment\n\n  scheme = am \n");
  const TrainingConfig c = parse_config_text(in);
  CHECK(c.scheme == Scheme::AM);
}

TEST_CASE("validation enforces the stated invariants") {
  TrainingConfig c;
  c.k_traces = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainingConfig{};
  c.minibatch_size = c.batch_size * c.k_traces + 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainingConfig{};
  c.temperature = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainingConfig{};
  c.sync_period = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainingConfig{};
  c.learning_rate = -0.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainingConfig{};
  c.learning_rate = 0.0;  // allowed: freezes the parameters
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("digest ignores the step budget but nothing else") {
  TrainingConfig a;
  TrainingConfig b = a;
  b.total_steps = a.total_steps * 2;
  CHECK(config_digest(a) == config_digest(b));
  b = a;
  b.seed += 1;
  CHECK(config_digest(a) != config_digest(b));
  b = a;
  b.scheme = Scheme::AM;
  CHECK(config_digest(a) != config_digest(b));
  b = a;
  b.lambda_format += 0.1;
  CHECK(config_digest(a) != config_digest(b));
}

TEST_CASE("default learning rates resolve per policy kind") {
  TrainingConfig c;
  c.policy = PolicyKind::Tabular;
  CHECK(c.resolved_lr() == 1e-2);
  c.policy = PolicyKind::Neural;
  CHECK(c.resolved_lr() == 1e-3);
  c.learning_rate = 0.5;
  CHECK(c.resolved_lr() == 0.5);
}

TEST_CASE("policy checkpoints round trip bit-exactly") {
  const Vocabulary vocab = build_vocabulary(3);
  NeuralPolicy p(vocab, 4, 7, 5);
  p.init_uniform(RngStream::derive(50, RngPurpose::ParamInit), 0.3);
  const std::string path = "test_tmp_policy_ckpt.txt";
  save_policy_checkpoint(p, path);
  const auto back = load_policy_checkpoint(path);
  REQUIRE(back->param_count() == p.param_count());
  CHECK(back->arch_descriptor() == p.arch_descriptor());
  for (std::size_t i = 0; i < p.param_count(); ++i)
    CHECK(back->params()[i] == p.params()[i]);
  std::remove(path.c_str());
}

TEST_CASE("trainer checkpoints round trip including optimizer moments") {
  const Vocabulary vocab = build_vocabulary(2);
  CheckpointRecord rec;
  rec.config_digest = "abc123";
  rec.step = 17;
  rec.snapshot_version = 4;
  rec.rng_digest = rng_digest_for(9, 17);
  rec.last_eval = -1.2345678901234567;
  rec.policy = std::make_unique<TabularPolicy>(vocab, 1);
  rec.policy->init_uniform(RngStream::derive(51, RngPurpose::ParamInit), 1.0);
  rec.old_policy = rec.policy->clone();
  rec.reference_policy = rec.policy->clone();
  rec.optimizer.init(OptimizerKind::Adam, rec.policy->param_count());
  rec.optimizer.step_count = 99;
  for (std::size_t i = 0; i < rec.optimizer.m.size(); ++i) {
    rec.optimizer.m[i] = 0.001 * static_cast<double>(i);
    rec.optimizer.v[i] = 1e-7 * static_cast<double>(i);
  }
  const std::string path = "test_tmp_trainer_ckpt.txt";
  save_checkpoint(rec, path);
  const CheckpointRecord back = load_checkpoint(path);
  CHECK(back.config_digest == rec.config_digest);
  CHECK(back.step == rec.step);
  CHECK(back.snapshot_version == rec.snapshot_version);
  CHECK(back.rng_digest == rec.rng_digest);
  CHECK(back.last_eval == rec.last_eval);
  CHECK(back.optimizer.step_count == 99);
  for (std::size_t i = 0; i < rec.policy->param_count(); ++i) {
    CHECK(back.policy->params()[i] == rec.policy->params()[i]);
    CHECK(back.optimizer.m[i] == rec.optimizer.m[i]);
    CHECK(back.optimizer.v[i] == rec.optimizer.v[i]);
  }
  std::remove(path.c_str());
}
