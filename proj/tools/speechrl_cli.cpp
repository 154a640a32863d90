#include <CLI11.hpp>
#include <iostream>
#include <optional>

#include "speechrl/pipeline.hpp"

using namespace speechrl;

namespace {

struct Common {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
};

ExperimentConfig load_experiment(const Common& c) {
  Config cfg = c.config.empty() ? Config{} : Config::load(c.config);
  if (c.seed) cfg.set_u64("seed", *c.seed);
  return ExperimentConfig::from_config(cfg);
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "experiment config (TOML subset)");
  sub->add_option("--out", c.out, "artifact directory")->capture_default_str();
  sub->add_option("--seed", c.seed, "master seed override");
}

int run(int argc, char** argv) {
  CLI::App app{"desk-scale speech recognition fine-tuning lab"};
  app.require_subcommand(1);
  Common common;
  bool no_resume = false;
  std::string manifest, hyps;

  const std::pair<const char*, Stage> stages[] = {
      {"gen-data", Stage::kGenData},       {"train-codebook", Stage::kTrainCodebook},
      {"tokenize", Stage::kTokenize},      {"pretrain", Stage::kPretrain},
      {"sft", Stage::kSft},                {"train-mp", Stage::kTrainMp},
      {"rlhf", Stage::kRlhf},              {"sweep-gamma", Stage::kSweepGamma},
      {"eval", Stage::kEval},              {"report", Stage::kReport}};
  std::map<CLI::App*, Stage> by_sub;
  CLI::App* eval_sub = nullptr;
  for (const auto& [name, st] : stages) {
    auto* sub = app.add_subcommand(name, "run the " + std::string(name) + " stage");
    add_common(sub, common);
    by_sub[sub] = st;
    if (st == Stage::kEval) eval_sub = sub;
  }
  auto* m_opt = eval_sub->add_option("--manifest", manifest, "score a hypotheses file against this manifest");
  auto* h_opt = eval_sub->add_option("--hyps", hyps, "JSONL hypotheses {utt_id, hyp}");
  m_opt->needs(h_opt);
  h_opt->needs(m_opt);

  auto* run_sub = app.add_subcommand("run", "run every stage in order");
  add_common(run_sub, common);
  run_sub->add_flag("--no-resume", no_resume, "rerun stages even when their artifacts are current");

  auto* show_sub = app.add_subcommand("show-config", "print the resolved configuration");
  add_common(show_sub, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const ExperimentConfig cfg = load_experiment(common);
  if (show_sub->parsed()) {
    std::cout << cfg.canonical();
    return 0;
  }
  Pipeline p(cfg, common.out, &std::cerr);
  if (run_sub->parsed()) {
    p.run_all(!no_resume);
    return 0;
  }
  if (eval_sub->parsed() && !manifest.empty()) {
    const auto res = p.score_hypotheses_file(manifest, hyps);
    std::cout << "utterances " << res.report.overall.count << "\ncorpus_wer " << res.report.overall.corpus_wer()
              << "\nmp_pct " << res.report.overall.mp_pct() << "\n";
    return 0;
  }
  for (const auto& [sub, st] : by_sub)
    if (sub->parsed()) p.run_stage(st);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ArgumentError& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
