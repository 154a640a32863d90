#include "speechrl/rlhf_ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace speechrl {

std::string_view to_string(MpSource s) { return s == MpSource::kOracle ? "oracle" : "learned_model"; }

MpSource parse_mp_source(std::string_view s) {
  if (s == "oracle") return MpSource::kOracle;
  if (s == "learned_model") return MpSource::kLearnedModel;
  throw ConfigError("unknown mp_source: " + std::string(s));
}

void RewardConfig::validate() const {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("reward gamma must be a finite non-negative number");
  if (!(wer_clamp_delta > 0.0 && wer_clamp_delta < 1.0)) throw ConfigError("wer_clamp_delta must be in (0,1)");
}

double reward(std::string_view ref, std::string_view hyp, const MpScoreFn& mp, const RewardConfig& cfg) {
  const double w = std::clamp(wer(ref, hyp).wer(), 0.0, 1.0 - cfg.wer_clamp_delta);
  const double m = cfg.gamma != 0.0 ? mp(ref, hyp) : 0.0;
  return cfg.gamma * m + std::log1p(-w);
}

void PPOConfig::validate() const {
  if (!(clip_epsilon > 0.0)) throw ConfigError("clip_epsilon must be > 0");
  if (!(kl_coeff >= 0.0)) throw ConfigError("kl_coeff must be >= 0");
  if (rollouts_per_update < 1 || ppo_epochs < 1 || minibatch_size < 1)
    throw ConfigError("rollouts_per_update, ppo_epochs and minibatch_size must be >= 1");
  if (!(value_loss_weight >= 0.0) || !(lr >= 0.0) || !(value_lr >= 0.0)) throw ConfigError("negative PPO rate or weight");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (total_updates < 0 || eval_every < 1) throw ConfigError("total_updates must be >= 0 and eval_every >= 1");
}

void compute_advantages(Trajectory& t, double kl_coeff) {
  const std::size_t n = t.generated.size();
  if (n == 0 || t.behavior_logprobs.size() != n || t.ref_logprobs.size() != n || t.values.size() != n)
    throw ArgumentError("compute_advantages: inconsistent trajectory");
  t.returns.assign(n, 0.0);
  t.advantages.assign(n, 0.0);
  double g = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    double r = -kl_coeff * (t.behavior_logprobs[i] - t.ref_logprobs[i]);
    if (i + 1 == n) r += t.reward;
    g += r;
    t.returns[i] = g;
    t.advantages[i] = g - t.values[i];
  }
}

double ValueHead::predict(std::span<const float> h) const {
  double v = w.back();
  for (std::size_t i = 0; i < h.size(); ++i) v += static_cast<double>(w[i]) * h[i];
  return v;
}

namespace {

std::vector<int> policy_input(const Trajectory& t) {
  std::vector<int> seq = t.prompt;
  seq.insert(seq.end(), t.generated.begin(), t.generated.end() - 1);
  return seq;
}

}  // namespace

std::vector<Trajectory> rollout(const PolicyCheckpoint& policy, const PolicyCheckpoint& reference,
                                const ValueHead& value, std::span<const RolloutPrompt> prompts, const PPOConfig& cfg,
                                const RolloutContext& ctx, std::uint64_t seed) {
  if (!(policy.config == reference.config) || policy.vocab_map_fingerprint != reference.vocab_map_fingerprint ||
      policy.codebook_fingerprint != reference.codebook_fingerprint)
    throw CompatibilityError("rollout: policy and reference checkpoints are not compatible");
  if (ctx.tokenizer == nullptr) throw ArgumentError("rollout: tokenizer missing");
  const int d = policy.config.d_model;
  std::vector<Trajectory> out(prompts.size());
  std::vector<std::string> errors(prompts.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    try {
      DecodeConfig dc;
      dc.mode = DecodeMode::kTemperature;
      dc.temperature = cfg.temperature;
      dc.max_new_tokens = cfg.max_new_tokens;
      dc.seed = mix64(seed, i);
      dc.forbid_audio_ids = true;
      auto gen = generate(policy, prompts[i].tokens, dc);
      Trajectory& t = out[i];
      t.prompt = prompts[i].tokens;
      t.generated = std::move(gen.tokens);
      t.behavior_logprobs = std::move(gen.logprobs);
      t.ref_logprobs = score_continuation(reference, t.prompt, t.generated, dc);
      Transformer<float> model(policy.config);
      ForwardCache<float> cache;
      model.forward(policy.params, policy_input(t), cache);
      t.values.resize(t.generated.size());
      for (std::size_t s = 0; s < t.generated.size(); ++s) {
        const std::size_t pos = t.prompt.size() - 1 + s;
        t.values[s] = value.predict(std::span<const float>(cache.hf.data() + pos * d, static_cast<std::size_t>(d)));
      }
      t.reference = prompts[i].reference;
      t.hypothesis = ctx.tokenizer->decode(t.generated);
      t.reward = ctx.score ? ctx.score(t.reference, t.hypothesis) : reward(t.reference, t.hypothesis, ctx.mp, ctx.reward);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw DataError("rollout: " + e);
  return out;
}

template <class T>
double ppo_policy_loss(const ModelConfig& cfg, std::span<const T> params, std::span<const Trajectory> batch,
                       double clip_epsilon, double temperature, std::pair<int, int> audio_mask, std::span<T> grads,
                       std::size_t* clipped) {
  std::size_t n_tokens = 0;
  for (const auto& t : batch) {
    if (t.advantages.size() != t.generated.size()) throw ArgumentError("ppo_policy_loss: advantages not computed");
    n_tokens += t.generated.size();
  }
  if (n_tokens == 0) throw ArgumentError("ppo_policy_loss: empty batch");
  const double inv = 1.0 / static_cast<double>(n_tokens);
  const int V = cfg.vocab_size;
  Transformer<T> model(cfg);
  ForwardCache<T> cache;
  std::vector<double> logp(static_cast<std::size_t>(V));
  std::vector<T> dlogits;
  double loss = 0.0;
  for (const auto& t : batch) {
    const auto seq = policy_input(t);
    model.forward(params, seq, cache);
    dlogits.assign(seq.size() * static_cast<std::size_t>(V), T(0));
    for (std::size_t s = 0; s < t.generated.size(); ++s) {
      const std::size_t pos = t.prompt.size() - 1 + s;
      masked_log_softmax<T>(std::span<const T>(cache.logits.data() + pos * V, static_cast<std::size_t>(V)), temperature,
                            audio_mask.first, audio_mask.second, logp);
      const int a = t.generated[s];
      const double ratio = std::exp(logp[static_cast<std::size_t>(a)] - t.behavior_logprobs[s]);
      const double adv = t.advantages[s];
      const double clipped_ratio = std::clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon);
      const double unclipped_obj = ratio * adv, clipped_obj = clipped_ratio * adv;
      loss -= std::min(unclipped_obj, clipped_obj) * inv;
      if (clipped != nullptr && std::abs(ratio - 1.0) > clip_epsilon) ++*clipped;
      if (unclipped_obj > clipped_obj) continue;  // the clipped branch is active and flat
      // d loss / d logp(a) = -ratio * adv / N; d logp(a) / d logit_j = (1[j=a] - p_j) / temperature.
      const double coef = -ratio * adv * inv / temperature;
      T* dl = dlogits.data() + pos * V;
      for (int j = 0; j < V; ++j) dl[j] = static_cast<T>(-coef * std::exp(logp[static_cast<std::size_t>(j)]));
      dl[a] += static_cast<T>(coef);
    }
    model.backward(params, cache, dlogits, grads);
  }
  return loss;
}

template double ppo_policy_loss<float>(const ModelConfig&, std::span<const float>, std::span<const Trajectory>, double,
                                       double, std::pair<int, int>, std::span<float>, std::size_t*);
template double ppo_policy_loss<double>(const ModelConfig&, std::span<const double>, std::span<const Trajectory>,
                                        double, double, std::pair<int, int>, std::span<double>, std::size_t*);

PpoTrainer::PpoTrainer(const PolicyCheckpoint& policy, const PPOConfig& cfg)
    : cfg_(cfg),
      policy_(policy),
      value_(policy.config.d_model),
      policy_opt_(policy.params.size(), 0.9, 0.999, 1e-8),
      value_opt_(static_cast<std::size_t>(policy.config.d_model) + 1, 0.9, 0.999, 1e-8) {
  cfg_.validate();
}

PpoStats PpoTrainer::update(std::vector<Trajectory>& trajectories, std::uint64_t update_index) {
  if (trajectories.empty()) throw ArgumentError("ppo_update: no trajectories");
  PpoStats st;
  std::size_t n_tokens = 0;
  for (auto& t : trajectories) {
    compute_advantages(t, cfg_.kl_coeff);
    st.mean_reward += t.reward;
    for (std::size_t s = 0; s < t.generated.size(); ++s) st.mean_kl += t.behavior_logprobs[s] - t.ref_logprobs[s];
    n_tokens += t.generated.size();
  }
  st.mean_reward /= static_cast<double>(trajectories.size());
  st.mean_kl /= static_cast<double>(n_tokens);
  if (cfg_.whiten_advantages) {
    double mean = 0.0, var = 0.0;
    for (const auto& t : trajectories)
      for (double a : t.advantages) mean += a;
    mean /= static_cast<double>(n_tokens);
    for (const auto& t : trajectories)
      for (double a : t.advantages) var += (a - mean) * (a - mean);
    const double inv = 1.0 / (std::sqrt(var / static_cast<double>(n_tokens)) + 1e-8);
    for (auto& t : trajectories)
      for (double& a : t.advantages) a = (a - mean) * inv;
  }

  const auto mask = audio_mask_range(policy_, true);
  const int d = policy_.config.d_model;
  std::size_t clipped = 0, seen = 0;
  int minibatches = 0;
  std::vector<float> grads(policy_.params.size());
  std::vector<float> vgrads(value_.w.size());
  Transformer<float> model(policy_.config);
  ForwardCache<float> cache;
  for (int epoch = 0; epoch < cfg_.ppo_epochs; ++epoch) {
    std::vector<std::size_t> order(trajectories.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix64(mix64(derive_seed(cfg_.seed, "ppo-shuffle"), update_index), static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg_.minibatch_size)) {
      std::vector<Trajectory> mb;
      for (std::size_t i = b; i < std::min(order.size(), b + static_cast<std::size_t>(cfg_.minibatch_size)); ++i)
        mb.push_back(trajectories[order[i]]);

      // Value regression on the current policy's hidden states (no gradient into the policy).
      std::fill(vgrads.begin(), vgrads.end(), 0.0f);
      std::size_t mb_tokens = 0;
      for (const auto& t : mb) mb_tokens += t.generated.size();
      double vloss = 0.0;
      for (const auto& t : mb) {
        model.forward(policy_.params, policy_input(t), cache);
        for (std::size_t s = 0; s < t.generated.size(); ++s) {
          const std::size_t pos = t.prompt.size() - 1 + s;
          const std::span<const float> h(cache.hf.data() + pos * d, static_cast<std::size_t>(d));
          const double err = value_.predict(h) - t.returns[s];
          vloss += cfg_.value_loss_weight * err * err / static_cast<double>(mb_tokens);
          const double g = 2.0 * cfg_.value_loss_weight * err / static_cast<double>(mb_tokens);
          for (int i = 0; i < d; ++i) vgrads[static_cast<std::size_t>(i)] += static_cast<float>(g * h[static_cast<std::size_t>(i)]);
          vgrads.back() += static_cast<float>(g);
        }
      }
      value_opt_.step(value_.w, vgrads, cfg_.value_lr);

      std::fill(grads.begin(), grads.end(), 0.0f);
      const double ploss = ppo_policy_loss<float>(policy_.config, policy_.params, mb, cfg_.clip_epsilon,
                                                  cfg_.temperature, mask, grads, &clipped);
      seen += mb_tokens;
      clip_grad_norm(grads, cfg_.grad_clip);
      policy_opt_.step(policy_.params, grads, cfg_.lr);
      st.value_loss += vloss;
      st.policy_loss += ploss;
      ++minibatches;
    }
  }
  st.value_loss /= minibatches;
  st.policy_loss /= minibatches;
  st.clip_fraction = static_cast<double>(clipped) / static_cast<double>(seen);
  policy_.step += 1;
  if (!std::isfinite(st.mean_reward) || !std::isfinite(st.mean_kl) || !std::isfinite(st.value_loss) ||
      !std::isfinite(st.policy_loss) || !all_finite(policy_.params))
    throw DivergenceError("non-finite PPO statistics at update " + std::to_string(update_index));
  return st;
}

std::size_t select_rlhf_checkpoint(std::span<const RlhfEval> evals, double wer_slack) {
  if (evals.empty()) throw ArgumentError("select_rlhf_checkpoint: no evaluations");
  double best_wer = evals[0].dev_wer;
  for (const auto& e : evals) best_wer = std::min(best_wer, e.dev_wer);
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < evals.size(); ++i) {
    if (evals[i].dev_wer > best_wer + wer_slack + 1e-12) continue;
    if (!best || evals[i].dev_mp_pct > evals[*best].dev_mp_pct ||
        (evals[i].dev_mp_pct == evals[*best].dev_mp_pct && evals[i].dev_wer < evals[*best].dev_wer))
      best = i;
  }
  return *best;
}

RlhfEval evaluate_dev(const PolicyCheckpoint& ckpt, const Dataset& ds, const DevEvalHooks& hooks, int max_new_tokens) {
  if (hooks.tokenizer == nullptr) throw ArgumentError("evaluate_dev: tokenizer missing");
  const auto hyps = decode_dataset(ckpt, ds, *hooks.tokenizer, max_new_tokens);
  long edits = 0, words = 0, mp_hits = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& ref = ds.rows[i].transcript;
    const auto b = wer(ref, hyps[i]);
    edits += b.edits();
    words += b.ref_len;
    if (hooks.mp(ref, hyps[i]) >= 0.5) ++mp_hits;
  }
  RlhfEval e;
  e.dev_wer = static_cast<double>(edits) / static_cast<double>(words);
  e.dev_mp_pct = 100.0 * static_cast<double>(mp_hits) / static_cast<double>(ds.size());
  return e;
}

RlhfResult rlhf_train(const PolicyCheckpoint& sft_ckpt, const Dataset& train, const Dataset& dev,
                      const RewardConfig& reward_cfg, const PPOConfig& ppo_cfg, const RolloutContext& ctx,
                      const DevEvalHooks& dev_hooks) {
  reward_cfg.validate();
  ppo_cfg.validate();
  check_compatible(sft_ckpt, train);
  check_compatible(sft_ckpt, dev);
  if (train.size() == 0) throw DataError("rlhf_train: empty training set");
  RolloutContext rctx = ctx;
  rctx.reward = reward_cfg;

  RlhfResult res;
  PpoTrainer trainer(sft_ckpt, ppo_cfg);
  std::vector<PolicyCheckpoint> snapshots;
  auto run_eval = [&](int update) {
    RlhfEval e = evaluate_dev(trainer.policy(), dev, dev_hooks, ppo_cfg.max_new_tokens);
    e.update = update;
    res.evals.push_back(e);
    snapshots.push_back(trainer.policy());
    return e;
  };
  run_eval(0);

  for (int u = 0; u < ppo_cfg.total_updates; ++u) {
    const auto idx = epoch_sample(train.size(), ppo_cfg.rollouts_per_update, static_cast<std::uint64_t>(u),
                                  derive_seed(ppo_cfg.seed, "rlhf-prompts"));
    std::vector<RolloutPrompt> prompts;
    for (auto i : idx) prompts.push_back({train.examples[i].prompt(), train.rows[i].transcript});
    auto trajs = rollout(trainer.policy(), sft_ckpt, trainer.value(), prompts, ppo_cfg, rctx,
                         mix64(derive_seed(ppo_cfg.seed, "rlhf-rollout"), static_cast<std::uint64_t>(u)));
    const auto st = trainer.update(trajs, static_cast<std::uint64_t>(u));
    RlhfCurveRow row;
    row.update = u + 1;
    row.mean_reward = st.mean_reward;
    row.mean_kl = st.mean_kl;
    row.clip_fraction = st.clip_fraction;
    if ((u + 1) % ppo_cfg.eval_every == 0 || u + 1 == ppo_cfg.total_updates) {
      const auto e = run_eval(u + 1);
      row.dev_wer = e.dev_wer;
      row.dev_mp_pct = e.dev_mp_pct;
    }
    res.curve.push_back(row);
  }
  const std::size_t pick = select_rlhf_checkpoint(res.evals);
  res.best = std::move(snapshots[pick]);
  res.best_update = res.evals[pick].update;
  return res;
}

void write_rlhf_curve(const std::filesystem::path& path, std::span<const RlhfCurveRow> rows) {
  std::ostringstream os;
  os.precision(9);
  os << "update,mean_reward,mean_kl,clip_fraction,dev_wer,dev_mp_pct\n";
  for (const auto& r : rows) {
    os << r.update << ',' << r.mean_reward << ',' << r.mean_kl << ',' << r.clip_fraction << ',';
    if (r.dev_wer) os << *r.dev_wer;
    os << ',';
    if (r.dev_mp_pct) os << *r.dev_mp_pct;
    os << '\n';
  }
  write_text_file(path.string(), os.str());
}

}  // namespace speechrl
