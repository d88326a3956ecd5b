// Command-line front end: data generation, training, verification, oracle
// comparison, scheme sweeps, and token-probability analysis.
//
// Exit codes: 0 ok, 2 usage, 3 I/O, 4 numerical abort, 5 property failure.

#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "nrt/checkpoint.hpp"
#include "nrt/config.hpp"
#include "nrt/corpus.hpp"
#include "nrt/metrics.hpp"
#include "nrt/oracle.hpp"
#include "nrt/trainer.hpp"
#include "nrt/verify.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitProperty = 5;

int worker_threads() {
  if (const char* env = std::getenv("NRT_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

// Mean of the last 10% of a metrics column; the "final" value used by sweep
// summaries.
double final_window_mean(const std::vector<nrt::MetricsRow>& rows,
                         double nrt::MetricsRow::*field) {
  if (rows.empty()) return 0.0;
  const std::size_t window = std::max<std::size_t>(1, rows.size() / 10);
  double sum = 0.0;
  for (std::size_t i = rows.size() - window; i < rows.size(); ++i) sum += rows[i].*field;
  return sum / static_cast<double>(window);
}

struct TrainArtifacts {
  std::vector<nrt::MetricsRow> rows;
  std::string out_dir;
};

// Shared by `train` and `sweep`: run one full training job and write all
// artifacts under out_dir. Throws on failure; NumericAbortError still dumps a
// diagnostic checkpoint first.
TrainArtifacts run_training(const nrt::TrainingConfig& cfg, const nrt::Dataset& data,
                            const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  nrt::RunManifest manifest;
  manifest.config_digest = nrt::config_digest(cfg);
  manifest.seed = cfg.seed;
  manifest.start_timestamp = nrt::utc_timestamp(std::time(nullptr));

  {
    std::ofstream cfg_out(out_dir + "/config.txt");
    cfg_out << nrt::config_to_text(cfg);
  }

  nrt::Trainer trainer(cfg, data, nullptr);
  nrt::save_policy_checkpoint(trainer.reference_policy(), out_dir + "/reference_policy.txt");

  TrainArtifacts art;
  art.out_dir = out_dir;
  nrt::MetricsCsvWriter csv(out_dir + "/metrics.csv");
  try {
    trainer.run([&](const nrt::MetricsRow& row) {
      csv.write(row);
      art.rows.push_back(row);
    });
  } catch (const nrt::NumericAbortError&) {
    nrt::save_checkpoint(trainer.make_checkpoint(), out_dir + "/abort_checkpoint.txt");
    manifest.end_timestamp = nrt::utc_timestamp(std::time(nullptr));
    nrt::write_manifest(manifest, out_dir + "/manifest.txt");
    throw;
  }
  nrt::save_checkpoint(trainer.make_checkpoint(), out_dir + "/checkpoint_final.txt");
  manifest.end_timestamp = nrt::utc_timestamp(std::time(nullptr));
  nrt::write_manifest(manifest, out_dir + "/manifest.txt");
  return art;
}

int cmd_gen_data(const std::string& task, nrt::TaskSpec spec, std::size_t n,
                 const std::string& out) {
  const auto kind = nrt::parse_task(task);
  if (!kind) {
    std::cerr << "gen-data: unknown task '" << task << "'\n";
    return kExitUsage;
  }
  spec.kind = *kind;
  nrt::Dataset d;
  try {
    d = nrt::generate_dataset(spec, n);
  } catch (const std::invalid_argument& e) {
    std::cerr << "gen-data: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    nrt::serialize_dataset(d, out);
  } catch (const nrt::DatasetIoError& e) {
    std::cerr << "gen-data: " << e.what() << "\n";
    return kExitIo;
  }
  std::cout << d.pairs.size() << " pairs written to " << out << " (train " << d.train_count
            << ", eval " << d.eval_count() << ")\n";
  return kExitOk;
}

int cmd_verify(std::uint64_t seed) {
  bool all_pass = true;
  for (const nrt::PropertyResult& r : nrt::run_property_suite(seed)) {
    std::cout << (r.pass ? "PASS" : "FAIL") << "  " << r.name << "  (" << r.detail << ")\n";
    all_pass = all_pass && r.pass;
  }
  return all_pass ? kExitOk : kExitProperty;
}

int cmd_oracle_compare(std::size_t n, int alphabet, int max_len, int order,
                       const std::string& scheme_str, std::uint64_t seed) {
  const auto scheme = nrt::parse_scheme(scheme_str);
  if (!scheme) {
    std::cerr << "oracle-compare: unknown scheme '" << scheme_str << "'\n";
    return kExitUsage;
  }
  const nrt::Vocabulary vocab = nrt::build_vocabulary(alphabet);
  nrt::EnumerationSpec spec;
  spec.max_len = max_len;
  spec.scheme = *scheme;
  spec.pair.question = {vocab.symbol(0), vocab.symbol(1 % alphabet)};
  spec.pair.answer = {vocab.symbol(1 % alphabet), vocab.symbol(0)};

  const std::uint64_t events = nrt::enumeration_event_count(static_cast<std::size_t>(alphabet), max_len);
  if (events > nrt::kEnumerationBound) {
    std::cerr << "oracle-compare: " << events << " events exceed the enumeration bound "
              << nrt::kEnumerationBound << "\n";
    return kExitUsage;
  }

  nrt::TabularPolicy policy(vocab, order);
  policy.init_uniform(nrt::RngStream::derive(seed, nrt::RngPurpose::ParamInit), 1.0);
  const nrt::EstimatorComparison cmp = nrt::compare_estimator(spec, policy, n, seed);
  std::printf("samples %zu  coords %zu  max |z| = %.4f  (judged: %s)\n", cmp.samples,
              cmp.z_score.size(), cmp.max_abs_z, cmp.judged ? "yes" : "no");
  if (cmp.judged && cmp.max_abs_z >= 5.0) {
    std::cout << "FAIL  unbiasedness certificate (max |z| >= 5)\n";
    return kExitProperty;
  }
  std::cout << "PASS  unbiasedness certificate\n";
  return kExitOk;
}

int cmd_analyze(const std::string& checkpoint_path, const std::string& reference_path,
                const std::string& data_path, int eval_k, int max_len, std::uint64_t seed,
                const std::string& out) {
  nrt::Dataset data;
  try {
    data = nrt::load_dataset(data_path);
  } catch (const nrt::DatasetIoError& e) {
    std::cerr << "analyze: " << e.what() << "\n";
    return kExitIo;
  }
  std::unique_ptr<nrt::Policy> trained, reference;
  try {
    const nrt::CheckpointRecord rec = nrt::load_checkpoint(checkpoint_path);
    trained = rec.policy->clone();
    reference = reference_path.empty() ? rec.reference_policy->clone()
                                       : nrt::load_policy_checkpoint(reference_path);
  } catch (const nrt::CheckpointError& e) {
    std::cerr << "analyze: " << e.what() << "\n";
    return kExitIo;
  }
  const nrt::TokenProbAnalysis a =
      nrt::token_prob_analysis(*trained, *reference, data, eval_k, max_len, seed);
  nrt::write_analysis_csv(a, out);
  std::printf("tokens %zu  median baseline entropy %.4f\n", a.rows.size(),
              a.median_baseline_entropy);
  for (std::size_t b = 0; b < a.bucket_mean_ratio.size(); ++b)
    std::printf("bucket %zu: count %zu  mean P/P_base %.4f\n", b, a.bucket_count[b],
                a.bucket_mean_ratio[b]);
  return kExitOk;
}

struct SweepRun {
  nrt::Scheme scheme;
  std::uint64_t seed = 0;
  bool ok = false;
  double final_entropy = 0.0;
  double final_length = 0.0;
  double top_bucket_ratio = 0.0;
  double eval_logprob = 0.0;
};

int cmd_sweep(const std::string& schemes_csv, int seeds, const nrt::TrainingConfig& base,
              const nrt::Dataset& data, const std::string& out_dir) {
  std::vector<nrt::Scheme> schemes;
  std::stringstream ss(schemes_csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto s = nrt::parse_scheme(tok);
    if (!s) {
      std::cerr << "sweep: unknown scheme '" << tok << "'\n";
      return kExitUsage;
    }
    schemes.push_back(*s);
  }
  if (schemes.size() < 2) {
    std::cerr << "sweep: need at least 2 schemes\n";
    return kExitUsage;
  }
  if (seeds < 1) {
    std::cerr << "sweep: need at least 1 seed\n";
    return kExitUsage;
  }

  std::vector<SweepRun> runs;
  for (const nrt::Scheme s : schemes)
    for (int k = 0; k < seeds; ++k)
      runs.push_back({s, base.seed + static_cast<std::uint64_t>(k), false, 0, 0, 0, 0});

  const auto run_one = [&](SweepRun& r) {
    nrt::TrainingConfig cfg = base;
    cfg.scheme = r.scheme;
    cfg.seed = r.seed;
    const std::string dir =
        out_dir + "/" + nrt::scheme_name(r.scheme) + "_seed" + std::to_string(r.seed);
    try {
      const TrainArtifacts art = run_training(cfg, data, dir);
      r.final_entropy = final_window_mean(art.rows, &nrt::MetricsRow::mean_trace_entropy);
      r.final_length = final_window_mean(art.rows, &nrt::MetricsRow::mean_trace_len);
      r.eval_logprob = art.rows.empty() ? 0.0 : art.rows.back().eval_answer_logprob;
      const nrt::CheckpointRecord rec = nrt::load_checkpoint(dir + "/checkpoint_final.txt");
      const nrt::TokenProbAnalysis a = nrt::token_prob_analysis(
          *rec.policy, *rec.reference_policy, data, cfg.eval_k, cfg.max_trace_len, cfg.seed);
      r.top_bucket_ratio = a.bucket_mean_ratio.empty() ? 0.0 : a.bucket_mean_ratio.back();
      r.ok = true;
    } catch (const std::exception& e) {
      std::cerr << "sweep run " << nrt::scheme_name(r.scheme) << "/" << r.seed
                << " failed: " << e.what() << "\n";
      r.ok = false;
    }
  };

  // Runs are independent; fan out across workers, results land by index.
  const int threads = std::min<int>(worker_threads(), static_cast<int>(runs.size()));
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < runs.size(); i = next.fetch_add(1))
        run_one(runs[i]);
    });
  for (auto& th : pool) th.join();

  std::filesystem::create_directories(out_dir);
  std::ofstream summary(out_dir + "/summary.csv");
  if (!summary) {
    std::cerr << "sweep: cannot write summary\n";
    return kExitIo;
  }
  summary << "kind,scheme,seed,status,final_entropy,final_length,top_bucket_ratio,eval_logprob\n";
  char buf[256];
  for (const SweepRun& r : runs) {
    std::snprintf(buf, sizeof(buf), "run,%s,%llu,%s,%.10g,%.10g,%.10g,%.10g\n",
                  nrt::scheme_name(r.scheme), static_cast<unsigned long long>(r.seed),
                  r.ok ? "ok" : "failed", r.final_entropy, r.final_length, r.top_bucket_ratio,
                  r.eval_logprob);
    summary << buf;
  }
  // Per-scheme medians over seeds, for AM-vs-WS comparisons at a glance.
  for (const nrt::Scheme s : schemes) {
    std::vector<double> ent, len, ratio, lp;
    for (const SweepRun& r : runs)
      if (r.scheme == s && r.ok) {
        ent.push_back(r.final_entropy);
        len.push_back(r.final_length);
        ratio.push_back(r.top_bucket_ratio);
        lp.push_back(r.eval_logprob);
      }
    const auto median = [](std::vector<double> v) {
      if (v.empty()) return 0.0;
      std::sort(v.begin(), v.end());
      const std::size_t m = v.size() / 2;
      return (v.size() % 2) ? v[m] : 0.5 * (v[m - 1] + v[m]);
    };
    std::snprintf(buf, sizeof(buf), "median,%s,-,-,%.10g,%.10g,%.10g,%.10g\n",
                  nrt::scheme_name(s), median(ent), median(len), median(ratio), median(lp));
    summary << buf;
  }
  std::cout << "sweep complete: " << runs.size() << " runs, summary at " << out_dir
            << "/summary.csv\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-trace reinforcement training on synthetic tasks"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset file");
  std::string gen_task = "skewed";
  nrt::TaskSpec gen_spec;
  std::size_t gen_n = 1000;
  std::string gen_out = "dataset.txt";
  gen->add_option("--task", gen_task, "skewed | lookup | modadd");
  gen->add_option("--alphabet", gen_spec.alphabet, "task alphabet size");
  gen->add_option("--question-len", gen_spec.question_len, "question symbols (skewed/modadd)");
  gen->add_option("--easy", gen_spec.easy_tokens, "easy answer tokens E (skewed)");
  gen->add_option("--modulus", gen_spec.modulus, "hard-token modulus m");
  gen->add_option("--depth", gen_spec.chain_depth, "chain depth (lookup)");
  gen->add_option("--train-frac", gen_spec.train_fraction, "train split fraction");
  gen->add_option("--n", gen_n, "number of pairs");
  gen->add_option("--seed", gen_spec.seed, "generator seed");
  gen->add_option("--out", gen_out, "output path");

  // train
  auto* train = app.add_subcommand("train", "Run the training loop");
  std::string train_config, train_data, train_out = "run", train_resume;
  std::string train_scheme;
  std::uint64_t train_seed = 0;
  int train_steps = -1;
  train->add_option("--config", train_config, "config file (key = value)");
  train->add_option("--data", train_data, "dataset file")->required();
  train->add_option("--out", train_out, "output directory");
  train->add_option("--resume", train_resume, "resume from a trainer checkpoint");
  train->add_option("--scheme", train_scheme, "override config scheme");
  train->add_option("--seed", train_seed, "override config seed");
  train->add_option("--steps", train_steps, "override config total_steps");

  // verify
  auto* verify = app.add_subcommand("verify", "Run the property suite");
  std::uint64_t verify_seed = 1;
  verify->add_option("--seed", verify_seed, "property fixture seed");

  // oracle-compare
  auto* oracle = app.add_subcommand("oracle-compare", "Monte Carlo vs exact gradient");
  std::size_t oc_n = 200000;
  int oc_alphabet = 3, oc_max_len = 2, oc_order = 1;
  std::string oc_scheme = "gm";
  std::uint64_t oc_seed = 1;
  oracle->add_option("--n", oc_n, "sample count");
  oracle->add_option("--alphabet", oc_alphabet, "trace alphabet size");
  oracle->add_option("--max-len", oc_max_len, "max trace length");
  oracle->add_option("--order", oc_order, "tabular context order");
  oracle->add_option("--scheme", oc_scheme, "aggregation scheme");
  oracle->add_option("--seed", oc_seed, "policy/sampling seed");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Train one run per scheme per seed");
  std::string sweep_schemes, sweep_config, sweep_data, sweep_out = "sweep";
  int sweep_seeds = 5;
  sweep->add_option("--schemes", sweep_schemes, "comma-separated scheme list")->required();
  sweep->add_option("--config", sweep_config, "base config file");
  sweep->add_option("--data", sweep_data, "dataset file")->required();
  sweep->add_option("--seeds", sweep_seeds, "seeds per scheme");
  sweep->add_option("--out", sweep_out, "output directory");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Token-probability ratio analysis");
  std::string an_ckpt, an_ref, an_data, an_out = "analysis.csv";
  int an_eval_k = 4, an_max_len = 6;
  std::uint64_t an_seed = 1;
  analyze->add_option("--checkpoint", an_ckpt, "trainer checkpoint")->required();
  analyze->add_option("--reference", an_ref, "reference policy file (default: from checkpoint)");
  analyze->add_option("--data", an_data, "dataset file")->required();
  analyze->add_option("--eval-k", an_eval_k, "traces per eval prompt (0 = empty traces)");
  analyze->add_option("--max-len", an_max_len, "max trace length");
  analyze->add_option("--seed", an_seed, "analysis sampling seed");
  analyze->add_option("--out", an_out, "output CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_task, gen_spec, gen_n, gen_out);

    if (verify->parsed()) return cmd_verify(verify_seed);

    if (oracle->parsed())
      return cmd_oracle_compare(oc_n, oc_alphabet, oc_max_len, oc_order, oc_scheme, oc_seed);

    if (train->parsed()) {
      nrt::TrainingConfig cfg;
      try {
        if (!train_config.empty()) cfg = nrt::load_config(train_config);
        if (train->count("--scheme")) {
          const auto s = nrt::parse_scheme(train_scheme);
          if (!s) {
            std::cerr << "train: unknown scheme '" << train_scheme << "'\n";
            return kExitUsage;
          }
          cfg.scheme = *s;
        }
        if (train->count("--seed")) cfg.seed = train_seed;
        if (train->count("--steps")) cfg.total_steps = train_steps;
        cfg.validate();
      } catch (const nrt::ConfigError& e) {
        std::cerr << "train: " << e.what() << "\n";
        return kExitUsage;
      }
      nrt::Dataset data;
      try {
        data = nrt::load_dataset(train_data);
      } catch (const nrt::DatasetIoError& e) {
        std::cerr << "train: " << e.what() << "\n";
        return kExitIo;
      }
      if (!train_resume.empty()) {
        // Resumed runs re-emit only the remaining rows into the new out dir.
        std::filesystem::create_directories(train_out);
        nrt::Trainer trainer(cfg, data, nrt::load_checkpoint(train_resume));
        nrt::MetricsCsvWriter csv(train_out + "/metrics.csv");
        try {
          trainer.run([&](const nrt::MetricsRow& row) { csv.write(row); });
        } catch (const nrt::NumericAbortError& e) {
          nrt::save_checkpoint(trainer.make_checkpoint(), train_out + "/abort_checkpoint.txt");
          std::cerr << "train: " << e.what() << " (diagnostic checkpoint dumped)\n";
          return kExitNumeric;
        }
        nrt::save_checkpoint(trainer.make_checkpoint(), train_out + "/checkpoint_final.txt");
        std::cout << "resumed to step " << trainer.completed_steps() << "\n";
        return kExitOk;
      }
      try {
        const TrainArtifacts art = run_training(cfg, data, train_out);
        std::cout << art.rows.size() << " steps, artifacts in " << train_out << "\n";
        return kExitOk;
      } catch (const nrt::NumericAbortError& e) {
        std::cerr << "train: " << e.what() << " (diagnostic checkpoint dumped)\n";
        return kExitNumeric;
      }
    }

    if (sweep->parsed()) {
      nrt::TrainingConfig cfg;
      try {
        if (!sweep_config.empty()) cfg = nrt::load_config(sweep_config);
        cfg.validate();
      } catch (const nrt::ConfigError& e) {
        std::cerr << "sweep: " << e.what() << "\n";
        return kExitUsage;
      }
      nrt::Dataset data;
      try {
        data = nrt::load_dataset(sweep_data);
      } catch (const nrt::DatasetIoError& e) {
        std::cerr << "sweep: " << e.what() << "\n";
        return kExitIo;
      }
      return cmd_sweep(sweep_schemes, sweep_seeds, cfg, data, sweep_out);
    }

    if (analyze->parsed())
      return cmd_analyze(an_ckpt, an_ref, an_data, an_eval_k, an_max_len, an_seed, an_out);
  } catch (const nrt::DatasetIoError& e) {
    std::cerr << e.what() << "\n";
    return kExitIo;
  } catch (const nrt::MetricsIoError& e) {
    std::cerr << e.what() << "\n";
    return kExitIo;
  } catch (const nrt::CheckpointError& e) {
    std::cerr << e.what() << "\n";
    return kExitIo;
  } catch (const nrt::NumericAbortError& e) {
    std::cerr << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
