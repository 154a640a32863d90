#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "speechrl/audio_tokenizer.hpp"
#include "speechrl/lm_core.hpp"
#include "speechrl/synth_data.hpp"
#include "speechrl/token_bridge.hpp"

namespace speechrl {

struct TrainConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_steps = 100;
  int total_steps = 2000;
  double final_lr_fraction = 0.1;
  int batch_size = 16;
  double input_dropout = 0.05;
  int eval_every = 200;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  int max_new_tokens = 12;
  std::uint64_t seed = 1;

  void validate() const;
  // Linear warmup from 0 to learning_rate, then cosine decay to
  // final_lr_fraction * learning_rate at total_steps.
  double lr_at(int step) const;
};

class Adam {
 public:
  Adam() = default;
  Adam(std::size_t n, double beta1, double beta2, double eps);

  void step(std::span<float> params, std::span<const float> grads, double lr);
  std::uint64_t steps() const { return t_; }

 private:
  double b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  std::uint64_t t_ = 0;
  std::vector<double> m_, v_;
};

// Scales grads so their global L2 norm is at most max_norm; returns the norm
// before clipping. max_norm <= 0 leaves grads untouched.
double clip_grad_norm(std::span<float> grads, double max_norm);

// ---------------------------------------------------------------------------
// Tokenized data.

struct TokenizedUtterance {
  std::string utt_id;
  std::vector<int> audio;  // codebook ids 0..K-1
  std::string transcript;
  Domain domain = Domain::kClean;
  Severity severity = Severity::kNone;
  std::string speaker_id;
};

struct TokenizedSplit {
  std::string name;
  int k = 0;
  std::uint64_t codebook_fingerprint = 0;
  std::vector<TokenizedUtterance> rows;
};

TokenizedSplit tokenize_split(std::string name, const std::filesystem::path& manifest, const Codebook& cb);
// JSONL: a header object {name, k, codebook_fingerprint} followed by one row per utterance.
void write_tokenized(const std::filesystem::path& path, const TokenizedSplit& split);
TokenizedSplit read_tokenized(const std::filesystem::path& path);

// Encoded model inputs for one split, tagged with the fingerprints they were built against.
struct Dataset {
  std::string name;
  std::vector<EncodedExample> examples;
  std::vector<TokenizedUtterance> rows;  // parallel to examples
  std::uint64_t vocab_map_fingerprint = 0;
  std::uint64_t codebook_fingerprint = 0;

  std::size_t size() const { return examples.size(); }
};

Dataset make_dataset(const TokenizedSplit& split, const TextTokenizer& tok);

// Language-model examples [BOS, ids..., EOS] with every prediction in the loss.
std::vector<EncodedExample> make_text_examples(const TextTokenizer& tok, std::string_view corpus);

// Throws CompatibilityError if the dataset was built against other artifacts.
void check_compatible(const PolicyCheckpoint& ckpt, const Dataset& ds);

// ---------------------------------------------------------------------------
// Mixtures.

struct MixtureComponent {
  const Dataset* data = nullptr;  // not owned
  double weight = 0.0;
};

struct MixtureSpec {
  std::vector<MixtureComponent> components;

  // Rescales weights to sum to one; throws ArgumentError on negative or all-zero weights.
  void normalize();
};

// Stateless sampler. Draw g = step * batch_size + i picks its component from a
// stream seeded by (seed, step); within a component of size n it takes position
// g mod n of the permutation for epoch g / n, seeded by (seed, component, epoch).
std::vector<EncodedExample> sample_mixture_batch(const MixtureSpec& spec, int batch_size, std::uint64_t step,
                                                 std::uint64_t seed);
// Indices into a dataset of size n for draws step * count .. step * count + count - 1,
// taken from per-epoch permutations seeded by (seed, stream, epoch).
std::vector<std::size_t> epoch_sample(std::size_t n, int count, std::uint64_t step, std::uint64_t seed,
                                      std::size_t stream = 0);
// Component index of every draw, for inspection.
std::vector<int> sample_mixture_components(const MixtureSpec& spec, int batch_size, std::uint64_t step,
                                           std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training loops.

struct PretrainResult {
  PolicyCheckpoint ckpt;
  std::vector<double> losses;  // one per step
};

PretrainResult pretrain_text(const PolicyCheckpoint& init, std::span<const EncodedExample> corpus,
                             const TrainConfig& cfg);

struct SftCurveRow {
  int step = 0;
  double train_loss = 0.0;  // mean over steps since the previous row
  double dev_clean_loss = 0.0;
  double dev_shifted_loss = 0.0;
  double dev_clean_wer = 0.0;
  double dev_shifted_wer = 0.0;
};

struct SftResult {
  PolicyCheckpoint best;
  int best_step = 0;
  double best_wer = 0.0;
  std::vector<SftCurveRow> curve;
  std::vector<double> step_losses;
};

// Greedy transcripts of every example in ds.
std::vector<std::string> decode_dataset(const PolicyCheckpoint& ckpt, const Dataset& ds, const TextTokenizer& tok,
                                        int max_new_tokens);
// Corpus WER of greedy decoding over ds.
double dataset_wer(const PolicyCheckpoint& ckpt, const Dataset& ds, const TextTokenizer& tok, int max_new_tokens);

// Index of the lowest value; ties go to the earliest.
std::size_t select_best(std::span<const double> wers);

// Evaluates the dev sets every eval_every steps and at the final step, and keeps
// the checkpoint with the lowest shifted-dev WER.
SftResult sft(const PolicyCheckpoint& init, const MixtureSpec& mixture, const TrainConfig& cfg, const Dataset& dev_clean,
              const Dataset& dev_shifted, const TextTokenizer& tok);

void write_sft_curve(const std::filesystem::path& path, std::span<const SftCurveRow> rows);
void write_loss_curve(const std::filesystem::path& path, std::span<const double> losses);

}  // namespace speechrl
