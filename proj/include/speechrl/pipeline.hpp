#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "speechrl/audio_tokenizer.hpp"
#include "speechrl/config.hpp"
#include "speechrl/eval_harness.hpp"
#include "speechrl/lm_core.hpp"
#include "speechrl/metrics.hpp"
#include "speechrl/rlhf_ppo.hpp"
#include "speechrl/synth_data.hpp"
#include "speechrl/train_sft.hpp"

namespace speechrl {

struct ExperimentConfig {
  std::uint64_t seed = 1;

  int lexicon_words = 50;
  int synonym_sets = 20;
  int embedding_dim = 16;
  int frames_min = 2;
  int frames_max = 4;
  CorpusSpec corpus;

  int codebook_k = 64;
  int kmeans_max_iters = 50;
  double kmeans_rel_tol = 1e-4;

  ModelConfig model = desk_model();
  TrainConfig pretrain;
  TrainConfig sft;
  double mix_shifted_weight = 0.3;  // shifted:clean = 30:70
  TrainConfig continued_sft;

  int mp_pairs = 4000;
  MpTrainConfig mp;

  RewardConfig reward;
  PPOConfig ppo;
  std::vector<double> gammas{0.0, 0.25, 0.5, 1.0};

  int eval_max_new_tokens = 12;

  ExperimentConfig();
  static ModelConfig desk_model();
  // Unknown keys raise ConfigError.
  static ExperimentConfig from_config(const Config& cfg);
  // Every resolved setting as sorted `key = value` lines.
  std::string canonical() const;
  std::uint64_t hash() const { return hash_string(canonical()); }
  void validate() const;
};

enum class Stage { kGenData, kTrainCodebook, kTokenize, kPretrain, kSft, kTrainMp, kRlhf, kSweepGamma, kEval, kReport };

std::string_view stage_name(Stage s);
Stage parse_stage(std::string_view s);
// Stages run by run_all, in order (the single-gamma rlhf stage is covered by the sweep).
std::vector<Stage> default_stages();

struct StageReport {
  std::string stage;
  double seconds = 0.0;
  bool skipped = false;
  std::map<std::string, std::string> artifacts;  // relative path -> fingerprint (hex)
};

std::string gamma_tag(double gamma);

// Artifact layout under the output directory:
//   data/            lexicon, manifests, embeddings, text corpus
//   codebook.kmc     k-means codebook
//   vocab_map.json, tokens/<split>.jsonl
//   ckpt/            pretrain, sft_clean, sft_mix, sft_continued, rlhf_g<gamma>
//   mp/              pairs, model, summary
//   curves/          CSV training curves
//   reports/         evaluation records, aggregates and summary tables
//   run_manifest.json
class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, std::filesystem::path out_dir, std::ostream* log = nullptr);
  ~Pipeline();

  StageReport run_stage(Stage s);
  // Runs default_stages(); with resume, stages whose recorded artifacts are
  // present and unchanged under the same config hash are skipped.
  std::vector<StageReport> run_all(bool resume = true);

  // Scores a hypotheses file against a manifest split (WER batch mode).
  EvalResult score_hypotheses_file(const std::filesystem::path& manifest, const std::filesystem::path& hyps);

  const std::filesystem::path& out_dir() const { return out_; }
  const ExperimentConfig& config() const { return cfg_; }

 private:
  struct Cache;

  StageReport gen_data();
  StageReport train_codebook_stage();
  StageReport tokenize();
  StageReport pretrain();
  StageReport sft_stage();
  StageReport train_mp();
  StageReport rlhf(const std::vector<double>& gammas, const std::string& stage);
  StageReport eval();
  StageReport report();

  void record(const StageReport& r);
  bool up_to_date(Stage s) const;
  void say(const std::string& msg) const;

  ExperimentConfig cfg_;
  std::filesystem::path out_;
  std::ostream* log_;
  std::unique_ptr<Cache> cache_;
};

// Fingerprint of the artifact table of a run manifest (timings excluded).
std::uint64_t run_manifest_fingerprint(const std::filesystem::path& manifest_path);

std::uint64_t file_fingerprint(const std::filesystem::path& path);

}  // namespace speechrl
