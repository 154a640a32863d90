#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "speechrl/lm_core.hpp"
#include "speechrl/metrics.hpp"
#include "speechrl/train_sft.hpp"

namespace speechrl {

enum class MpSource { kLearnedModel, kOracle };

std::string_view to_string(MpSource s);
MpSource parse_mp_source(std::string_view s);

struct RewardConfig {
  double gamma = 0.0;
  double wer_clamp_delta = 1e-3;
  MpSource mp_source = MpSource::kLearnedModel;

  void validate() const;
};

// gamma * mp(ref, hyp) + ln(1 - w), with w = wer(ref, hyp) clamped to [0, 1 - delta].
double reward(std::string_view ref, std::string_view hyp, const MpScoreFn& mp, const RewardConfig& cfg);

struct PPOConfig {
  double clip_epsilon = 0.2;
  double kl_coeff = 0.02;
  int rollouts_per_update = 64;
  int ppo_epochs = 2;
  int minibatch_size = 16;
  double value_loss_weight = 0.5;
  double lr = 1e-4;
  double value_lr = 2e-2;
  double grad_clip = 1.0;
  int max_new_tokens = 12;
  double temperature = 1.0;
  bool whiten_advantages = false;  // rescale advantages to zero mean, unit variance per rollout batch
  int total_updates = 400;
  int eval_every = 40;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Trajectory {
  std::vector<int> prompt;
  std::vector<int> generated;
  std::vector<double> behavior_logprobs;
  std::vector<double> ref_logprobs;
  std::vector<double> values;
  double reward = 0.0;
  std::string reference;
  std::string hypothesis;
  // Filled by compute_advantages.
  std::vector<double> returns;
  std::vector<double> advantages;
};

// Per-token rewards -beta * (behavior - reference log-prob), plus the sequence
// reward at the last token; undiscounted reward-to-go minus the value prediction.
void compute_advantages(Trajectory& t, double kl_coeff);

// Linear value probe on the (detached) final normalised hidden state.
struct ValueHead {
  std::vector<float> w;  // d_model weights then a bias
  explicit ValueHead(int d_model = 0) : w(static_cast<std::size_t>(d_model) + 1, 0.0f) {}
  double predict(std::span<const float> h) const;
};

struct RolloutContext {
  const TextTokenizer* tokenizer = nullptr;
  MpScoreFn mp;
  RewardConfig reward;
  // Replaces the composite reward when set (toy tasks).
  std::function<double(std::string_view ref, std::string_view hyp)> score;
};

struct RolloutPrompt {
  std::vector<int> tokens;  // ends with SEP
  std::string reference;
};

// Samples one continuation per prompt at the configured temperature (audio ids
// forbidden) and records behaviour, reference and value estimates. Sampling for
// prompt i uses a stream seeded by (seed, i).
std::vector<Trajectory> rollout(const PolicyCheckpoint& policy, const PolicyCheckpoint& reference,
                                const ValueHead& value, std::span<const RolloutPrompt> prompts, const PPOConfig& cfg,
                                const RolloutContext& ctx, std::uint64_t seed);

// Clipped surrogate -mean_t min(r A, clip(r, 1-eps, 1+eps) A) over all generated
// tokens of the batch, with r = exp(logpi - behavior). Accumulates its gradient
// into grads and adds clipped-token counts to *clipped when given.
template <class T>
double ppo_policy_loss(const ModelConfig& cfg, std::span<const T> params, std::span<const Trajectory> batch,
                       double clip_epsilon, double temperature, std::pair<int, int> audio_mask, std::span<T> grads,
                       std::size_t* clipped = nullptr);

struct PpoStats {
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  double value_loss = 0.0;
  double policy_loss = 0.0;
};

class PpoTrainer {
 public:
  PpoTrainer(const PolicyCheckpoint& policy, const PPOConfig& cfg);

  PolicyCheckpoint& policy() { return policy_; }
  const PolicyCheckpoint& policy() const { return policy_; }
  ValueHead& value() { return value_; }

  // ppo_epochs passes of shuffled minibatches over the trajectories.
  PpoStats update(std::vector<Trajectory>& trajectories, std::uint64_t update_index);

 private:
  PPOConfig cfg_;
  PolicyCheckpoint policy_;
  ValueHead value_;
  Adam policy_opt_;
  Adam value_opt_;
};

struct RlhfCurveRow {
  int update = 0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  std::optional<double> dev_wer;
  std::optional<double> dev_mp_pct;
};

struct RlhfEval {
  int update = 0;
  double dev_wer = 0.0;
  double dev_mp_pct = 0.0;
};

struct RlhfResult {
  PolicyCheckpoint best;
  int best_update = 0;
  std::vector<RlhfCurveRow> curve;
  std::vector<RlhfEval> evals;
};

// Among the evaluations, the highest MP% whose WER is within wer_slack of the
// lowest WER seen; ties prefer lower WER, then the earlier evaluation.
std::size_t select_rlhf_checkpoint(std::span<const RlhfEval> evals, double wer_slack = 0.02);

struct DevEvalHooks {
  const TextTokenizer* tokenizer = nullptr;
  MpScoreFn mp;  // scores used for dev MP% (>= 0.5 counts)
};

// Rollout / update loop on the training set; dev evaluation at update 0, every
// eval_every updates and at the end.
RlhfResult rlhf_train(const PolicyCheckpoint& sft_ckpt, const Dataset& train, const Dataset& dev,
                      const RewardConfig& reward_cfg, const PPOConfig& ppo_cfg, const RolloutContext& ctx,
                      const DevEvalHooks& dev_hooks);

// Corpus WER and MP% of greedy decoding on ds.
RlhfEval evaluate_dev(const PolicyCheckpoint& ckpt, const Dataset& ds, const DevEvalHooks& hooks, int max_new_tokens);

void write_rlhf_curve(const std::filesystem::path& path, std::span<const RlhfCurveRow> rows);

}  // namespace speechrl
