#include <doctest.h>

#include <cmath>

#include "speechrl/rlhf_ppo.hpp"

using namespace speechrl;

namespace {

ModelConfig bandit_model() {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_query_heads = 2;
  c.head_dim = 4;
  c.ffn_dim = 16;
  c.max_seq_len = 16;
  c.dropout_rate = 0.0;
  return c;
}

// Ten words on raw ids 4..13, one audio slot (15), identity reindexing.
struct World {
  std::vector<std::string> words{"w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7", "w8", "w9"};
  VocabMap map = build_vocab_map(16, 1, std::vector<std::uint64_t>(16, 0));
  TextTokenizer tok{words, map};

  PolicyCheckpoint init(std::uint64_t seed) const {
    auto ck = init_model(bandit_model(), seed);
    ck.vocab_map = map;
    ck.vocab_map_fingerprint = map.fingerprint();
    return ck;
  }
};

const MpScoreFn kMpOne = [](std::string_view, std::string_view) { return 1.0; };

double target_probability(const PolicyCheckpoint& ck, int target) {
  const std::vector<int> prompt{kBos, kSep}, cont{target};
  DecodeConfig dc;
  dc.mode = DecodeMode::kTemperature;
  return std::exp(score_continuation(ck, prompt, cont, dc)[0]);
}

std::vector<Trajectory> sample_batch(const World& w, const PolicyCheckpoint& policy, const PolicyCheckpoint& ref,
                                     int n, std::uint64_t seed) {
  PPOConfig cfg;
  cfg.max_new_tokens = 4;
  RolloutContext ctx;
  ctx.tokenizer = &w.tok;
  ctx.score = [](std::string_view, std::string_view hyp) { return hyp.empty() ? -1.0 : 0.5; };
  std::vector<RolloutPrompt> prompts;
  for (int i = 0; i < n; ++i) prompts.push_back({{kBos, 15, 15, kSep}, "w1 w2"});
  ValueHead vh(8);
  vh.w[0] = 0.3f;
  vh.w.back() = -0.1f;
  auto trajs = rollout(policy, ref, vh, prompts, cfg, ctx, seed);
  for (auto& t : trajs) compute_advantages(t, 0.05);
  return trajs;
}

}  // namespace

TEST_CASE("reward values") {
  RewardConfig c;
  c.gamma = 1.0;
  CHECK(std::abs(reward("a b", "a b", kMpOne, c) - 1.0) < 1e-9);

  c.gamma = 0.25;
  const MpScoreFn mp06 = [](std::string_view, std::string_view) { return 0.6; };
  CHECK(std::abs(reward("a b c d", "a b x y", mp06, c) - (0.15 + std::log(0.5))) < 1e-9);
  CHECK(std::abs(reward("a b c d", "a b x y", mp06, c) - (-0.543147)) < 1e-6);

  c.gamma = 0.0;
  c.wer_clamp_delta = 1e-3;
  CHECK(std::abs(reward("are you comfortable?", "are you going to school?", kMpOne, c) - std::log(1e-3)) < 1e-9);
  CHECK(std::abs(reward("a", "b c d e", kMpOne, c) - (-6.907755)) < 1e-6);
}

TEST_CASE("reward is bounded and falls with WER") {
  RewardConfig c;
  c.gamma = 0.5;
  const MpScoreFn mp = [](std::string_view, std::string_view) { return 0.5; };
  const std::string ref = "a b c d e f g h";
  const std::vector<std::string> hyps{"a b c d e f g h", "a b c d e f g x", "a b c d e f x x", "a b x x x x x x",
                                      "x x x x x x x x", "x x x x x x x x x x x x"};
  double prev = 1e9;
  for (const auto& h : hyps) {
    const double r = reward(ref, h, mp, c);
    CHECK(r <= prev);
    CHECK(r <= c.gamma);
    CHECK(r >= c.gamma * 0.5 + std::log(c.wer_clamp_delta) - 1e-12);
    prev = r;
  }
}

TEST_CASE("advantages by hand") {
  Trajectory t;
  t.generated = {5, 6, 1};
  t.behavior_logprobs = {-1.0, -0.5, -0.2};
  t.ref_logprobs = {-1.5, -0.5, -0.4};
  t.values = {0.1, 0.2, 0.3};
  t.reward = 2.0;
  compute_advantages(t, 0.1);
  // Per-token rewards: -0.05, 0, 1.98.
  CHECK(t.returns[2] == doctest::Approx(1.98));
  CHECK(t.returns[1] == doctest::Approx(1.98));
  CHECK(t.returns[0] == doctest::Approx(1.93));
  CHECK(t.advantages[0] == doctest::Approx(1.83));
  CHECK(t.advantages[2] == doctest::Approx(1.68));
  t.values.pop_back();
  CHECK_THROWS_AS(compute_advantages(t, 0.1), ArgumentError);
}

TEST_CASE("on-policy first pass: unit ratios, zero clipping, loss = -mean advantage") {
  const World w;
  const auto ck = w.init(3);
  const auto trajs = sample_batch(w, ck, ck, 6, 9);
  const auto p = convert_params<double>(ck.params);
  std::vector<double> g(p.size(), 0.0);
  std::size_t clipped = 0;
  const double loss = ppo_policy_loss<double>(ck.config, p, trajs, 0.2, 1.0, audio_mask_range(ck, true), g, &clipped);
  double sum = 0;
  std::size_t n = 0;
  for (const auto& t : trajs)
    for (double a : t.advantages) {
      sum += a;
      ++n;
    }
  CHECK(clipped == 0);
  CHECK(loss == doctest::Approx(-sum / n).epsilon(1e-5));
}

TEST_CASE("zero advantages give a zero policy gradient") {
  const World w;
  const auto ck = w.init(3);
  auto trajs = sample_batch(w, ck, ck, 4, 1);
  for (auto& t : trajs) std::fill(t.advantages.begin(), t.advantages.end(), 0.0);
  const auto p = convert_params<double>(ck.params);
  std::vector<double> g(p.size(), 0.0);
  ppo_policy_loss<double>(ck.config, p, trajs, 0.2, 1.0, audio_mask_range(ck, true), g);
  for (double x : g) CHECK(x == 0.0);
}

TEST_CASE("policy loss gradient matches central differences") {
  const World w;
  const auto behavior = w.init(3);
  auto current = behavior;
  Rng rng(6);
  for (auto& x : current.params) x += static_cast<float>(0.05 * rng.normal());
  const auto trajs = sample_batch(w, behavior, behavior, 8, 2);
  auto p = convert_params<double>(current.params);
  const auto mask = audio_mask_range(current, true);
  std::vector<double> g(p.size(), 0.0), dummy(p.size());
  std::size_t clipped = 0;
  ppo_policy_loss<double>(current.config, p, trajs, 0.2, 1.0, mask, g, &clipped);
  const ParamLayout layout(current.config);
  const double eps = 1e-5;
  for (const auto& t : layout.tensors) {
    double worst = 0;
    for (int s = 0; s < 10; ++s) {
      const std::size_t i = t.offset + rng.below(static_cast<int>(t.size));
      const double keep = p[i];
      p[i] = keep + eps;
      const double up = ppo_policy_loss<double>(current.config, p, trajs, 0.2, 1.0, mask, dummy);
      p[i] = keep - eps;
      const double down = ppo_policy_loss<double>(current.config, p, trajs, 0.2, 1.0, mask, dummy);
      p[i] = keep;
      const double fd = (up - down) / (2 * eps);
      worst = std::max(worst, std::abs(g[i] - fd) / std::max({std::abs(g[i]), std::abs(fd), 1e-7}));
    }
    INFO(t.name);
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("reference equal to policy gives zero KL; rollouts are seed-deterministic") {
  const World w;
  const auto ck = w.init(4);
  const auto a = sample_batch(w, ck, ck, 8, 17), b = sample_batch(w, ck, ck, 8, 17);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].generated == b[i].generated);
    CHECK(a[i].behavior_logprobs == b[i].behavior_logprobs);
    for (std::size_t s = 0; s < a[i].generated.size(); ++s)
      CHECK(std::abs(a[i].behavior_logprobs[s] - a[i].ref_logprobs[s]) < 1e-6);
    for (int tok : a[i].generated) CHECK(tok != 15);
  }
}

TEST_CASE("a policy that only emits EOS earns the clamped reward") {
  const World w;
  auto ck = w.init(1);
  const ParamLayout l(ck.config);
  std::fill(ck.params.begin(), ck.params.end(), 0.0f);
  for (int v = 0; v < 16; ++v) ck.params[l.tok_emb + v * 8] = 1.0f;
  for (int i = 0; i < 8; ++i) ck.params[l.final_norm + i] = 1.0f;
  ck.params[l.out + kEos] = 100.0f;
  PPOConfig cfg;
  RolloutContext ctx;
  ctx.tokenizer = &w.tok;
  ctx.mp = kMpOne;
  ctx.reward.gamma = 0.0;
  const std::vector<RolloutPrompt> prompts{{{kBos, kSep}, "w1 w2"}};
  const auto t = rollout(ck, ck, ValueHead(8), prompts, cfg, ctx, 1);
  CHECK(t[0].generated == std::vector<int>{kEos});
  CHECK(t[0].hypothesis.empty());
  CHECK(std::abs(t[0].reward - std::log(1e-3)) < 1e-9);
}

TEST_CASE("single-token bandit converges onto the rewarded word") {
  const World w;
  const int target = w.tok.vocab().vocab_of_raw(w.tok.raw_id("w3"));
  const auto init = w.init(2024);
  const double p0 = target_probability(init, target);
  CHECK(p0 < 0.2);

  PPOConfig cfg;
  cfg.max_new_tokens = 1;
  cfg.seed = 2024;
  RolloutContext ctx;
  ctx.tokenizer = &w.tok;
  ctx.score = [](std::string_view, std::string_view hyp) { return hyp == "w3" ? 1.0 : 0.0; };
  const std::vector<RolloutPrompt> prompts(static_cast<std::size_t>(cfg.rollouts_per_update), {{kBos, kSep}, "w3"});
  PpoTrainer trainer(init, cfg);
  int reached = -1;
  for (int u = 0; u < 500 && reached < 0; ++u) {
    auto trajs = rollout(trainer.policy(), init, trainer.value(), prompts, cfg, ctx, mix64(cfg.seed, u));
    trainer.update(trajs, u);
    if (target_probability(trainer.policy(), target) > 0.9) reached = u + 1;
  }
  MESSAGE("P(target) start " << p0 << ", > 0.9 after " << reached << " updates");
  CHECK(reached > 0);
}

TEST_CASE("checkpoint choice: best MP% within the WER slack") {
  const std::vector<RlhfEval> a{{0, 0.40, 20}, {10, 0.41, 30}, {20, 0.45, 50}};
  CHECK(select_rlhf_checkpoint(a) == 1);
  const std::vector<RlhfEval> b{{0, 0.40, 30}, {10, 0.39, 30}};
  CHECK(select_rlhf_checkpoint(b) == 1);
  const std::vector<RlhfEval> c{{0, 0.40, 30}, {10, 0.40, 30}};
  CHECK(select_rlhf_checkpoint(c) == 0);
  const std::vector<RlhfEval> d{{0, 0.30, 10}};
  CHECK(select_rlhf_checkpoint(d) == 0);
  CHECK_THROWS_AS(select_rlhf_checkpoint(std::vector<RlhfEval>{}), ArgumentError);
}

TEST_CASE("zero updates return the starting checkpoint") {
  const World w;
  const auto ck = w.init(8);
  Dataset ds;
  ds.name = "toy";
  ds.vocab_map_fingerprint = w.map.fingerprint();
  for (const char* word : {"w1", "w2"}) {
    const auto text = w.tok.encode(word);
    ds.examples.push_back(encode_example(w.map, std::vector<int>{0}, text));
    TokenizedUtterance row;
    row.transcript = word;
    ds.rows.push_back(row);
  }
  PPOConfig cfg;
  cfg.total_updates = 0;
  RolloutContext ctx;
  ctx.tokenizer = &w.tok;
  ctx.mp = kMpOne;
  DevEvalHooks hooks{&w.tok, kMpOne};
  const auto res = rlhf_train(ck, ds, ds, RewardConfig{}, cfg, ctx, hooks);
  CHECK(res.best == ck);
  CHECK(res.best_update == 0);
  CHECK(res.evals.size() == 1);
  CHECK(res.curve.empty());
}
