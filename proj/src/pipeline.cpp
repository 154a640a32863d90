#include "speechrl/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "speechrl/checkpoint.hpp"
#include "speechrl/token_bridge.hpp"

namespace speechrl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration.

namespace {

// Visits every setting as (key, field). Reading and canonical printing share it
// so the two can never disagree about the key set.
template <class Cfg, class V>
void visit_train(const std::string& p, Cfg& t, V&& v) {
  v(p + ".learning_rate", t.learning_rate);
  v(p + ".beta1", t.beta1);
  v(p + ".beta2", t.beta2);
  v(p + ".adam_eps", t.adam_eps);
  v(p + ".warmup_steps", t.warmup_steps);
  v(p + ".total_steps", t.total_steps);
  v(p + ".final_lr_fraction", t.final_lr_fraction);
  v(p + ".batch_size", t.batch_size);
  v(p + ".input_dropout", t.input_dropout);
  v(p + ".eval_every", t.eval_every);
  v(p + ".grad_clip", t.grad_clip);
}

template <class Cfg, class V>
void visit_all(Cfg& c, V&& v) {
  v("seed", c.seed);
  v("data.lexicon_words", c.lexicon_words);
  v("data.synonym_sets", c.synonym_sets);
  v("data.embedding_dim", c.embedding_dim);
  v("data.frames_min", c.frames_min);
  v("data.frames_max", c.frames_max);
  v("data.clean_train", c.corpus.clean.train);
  v("data.clean_dev", c.corpus.clean.dev);
  v("data.clean_test", c.corpus.clean.test);
  v("data.disordered_train", c.corpus.disordered.train);
  v("data.disordered_dev", c.corpus.disordered.dev);
  v("data.disordered_test", c.corpus.disordered.test);
  v("data.clean_speakers", c.corpus.clean_speakers);
  v("data.disordered_speakers_train", c.corpus.disordered_speakers.train);
  v("data.disordered_speakers_dev", c.corpus.disordered_speakers.dev);
  v("data.disordered_speakers_test", c.corpus.disordered_speakers.test);
  v("data.disordered_phrases_train", c.corpus.disordered_phrases.train);
  v("data.disordered_phrases_dev", c.corpus.disordered_phrases.dev);
  v("data.disordered_phrases_test", c.corpus.disordered_phrases.test);
  v("data.severity_mix", c.corpus.severity_mix);
  v("data.min_words", c.corpus.min_words);
  v("data.max_words", c.corpus.max_words);
  v("data.text_corpus_sentences", c.corpus.text_corpus_sentences);
  v("codebook.k", c.codebook_k);
  v("codebook.max_iters", c.kmeans_max_iters);
  v("codebook.rel_tol", c.kmeans_rel_tol);
  v("model.vocab_size", c.model.vocab_size);
  v("model.d_model", c.model.d_model);
  v("model.n_layers", c.model.n_layers);
  v("model.n_query_heads", c.model.n_query_heads);
  v("model.head_dim", c.model.head_dim);
  v("model.ffn_dim", c.model.ffn_dim);
  v("model.max_seq_len", c.model.max_seq_len);
  v("model.dropout_rate", c.model.dropout_rate);
  visit_train("pretrain", c.pretrain, v);
  visit_train("sft", c.sft, v);
  v("sft.mix_shifted_weight", c.mix_shifted_weight);
  visit_train("continued_sft", c.continued_sft, v);
  v("mp.pairs", c.mp_pairs);
  v("mp.lr", c.mp.lr);
  v("mp.steps", c.mp.steps);
  v("mp.holdout_fraction", c.mp.holdout_fraction);
  v("reward.gamma", c.reward.gamma);
  v("reward.wer_clamp_delta", c.reward.wer_clamp_delta);
  v("reward.mp_source", c.reward.mp_source);
  v("ppo.clip_epsilon", c.ppo.clip_epsilon);
  v("ppo.kl_coeff", c.ppo.kl_coeff);
  v("ppo.rollouts_per_update", c.ppo.rollouts_per_update);
  v("ppo.ppo_epochs", c.ppo.ppo_epochs);
  v("ppo.minibatch_size", c.ppo.minibatch_size);
  v("ppo.value_loss_weight", c.ppo.value_loss_weight);
  v("ppo.lr", c.ppo.lr);
  v("ppo.value_lr", c.ppo.value_lr);
  v("ppo.grad_clip", c.ppo.grad_clip);
  v("ppo.temperature", c.ppo.temperature);
  v("ppo.whiten_advantages", c.ppo.whiten_advantages);
  v("ppo.total_updates", c.ppo.total_updates);
  v("ppo.eval_every", c.ppo.eval_every);
  v("sweep.gammas", c.gammas);
  v("eval.max_new_tokens", c.eval_max_new_tokens);
}

struct Reader {
  const Config& c;
  void operator()(const std::string& k, int& x) const {
    const auto v = c.get_int(k, x);
    if (v < INT32_MIN || v > INT32_MAX) throw ConfigError(k + " is out of range");
    x = static_cast<int>(v);
  }
  void operator()(const std::string& k, double& x) const { x = c.get_double(k, x); }
  void operator()(const std::string& k, bool& x) const { x = c.get_bool(k, x); }
  void operator()(const std::string& k, std::uint64_t& x) const { x = c.get_u64(k, x); }
  void operator()(const std::string& k, std::vector<double>& x) const { x = c.get_doubles(k, x); }
  void operator()(const std::string& k, MpSource& x) const {
    x = parse_mp_source(c.get_string(k, std::string(to_string(x))));
  }
};

struct Printer {
  std::map<std::string, std::string>& out;
  static std::string num(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
  }
  void operator()(const std::string& k, int x) const { out[k] = std::to_string(x); }
  void operator()(const std::string& k, double x) const { out[k] = num(x); }
  void operator()(const std::string& k, bool x) const { out[k] = x ? "true" : "false"; }
  void operator()(const std::string& k, std::uint64_t x) const { out[k] = std::to_string(x); }
  void operator()(const std::string& k, const std::vector<double>& x) const {
    std::string s = "[";
    for (std::size_t i = 0; i < x.size(); ++i) s += (i ? ", " : "") + num(x[i]);
    out[k] = s + "]";
  }
  void operator()(const std::string& k, MpSource x) const { out[k] = "\"" + std::string(to_string(x)) + "\""; }
};

}  // namespace

ModelConfig ExperimentConfig::desk_model() {
  ModelConfig m;
  m.vocab_size = 128;
  m.d_model = 64;
  m.n_layers = 2;
  m.n_query_heads = 4;
  m.head_dim = 16;
  m.ffn_dim = 256;
  m.max_seq_len = 64;
  m.dropout_rate = 0.05;
  return m;
}

ExperimentConfig::ExperimentConfig() {
  pretrain.learning_rate = 1e-3;
  pretrain.warmup_steps = 50;
  pretrain.total_steps = 400;
  pretrain.eval_every = 400;

  sft.learning_rate = 1e-3;
  sft.warmup_steps = 100;
  sft.total_steps = 1500;
  sft.eval_every = 250;

  continued_sft = sft;
  continued_sft.learning_rate = 2e-4;
  continued_sft.warmup_steps = 20;
  continued_sft.total_steps = 400;
  continued_sft.eval_every = 50;
}

ExperimentConfig ExperimentConfig::from_config(const Config& c) {
  ExperimentConfig e;
  visit_all(e, Reader{c});
  c.check_all_used();
  e.validate();
  return e;
}

std::string ExperimentConfig::canonical() const {
  std::map<std::string, std::string> kv;
  visit_all(*this, Printer{kv});
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

void ExperimentConfig::validate() const {
  if (lexicon_words < 2 || synonym_sets < 1 || synonym_sets > lexicon_words) throw ConfigError("invalid lexicon sizes");
  if (embedding_dim < 2) throw ConfigError("data.embedding_dim must be >= 2");
  if (frames_min < 1 || frames_max < frames_min) throw ConfigError("invalid frames_per_word range");
  if (codebook_k < 1) throw ConfigError("codebook.k must be >= 1");
  try {
    model.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  if (model.vocab_size <= codebook_k + kNumReserved + lexicon_words)
    throw ConfigError("model.vocab_size must exceed codebook.k + reserved ids + lexicon words");
  pretrain.validate();
  sft.validate();
  continued_sft.validate();
  if (!(mix_shifted_weight >= 0.0 && mix_shifted_weight <= 1.0)) throw ConfigError("sft.mix_shifted_weight must be in [0,1]");
  if (mp_pairs < 10) throw ConfigError("mp.pairs must be >= 10");
  reward.validate();
  ppo.validate();
  for (double g : gammas)
    if (!(g >= 0.0)) throw ConfigError("sweep.gammas must be non-negative");
  if (eval_max_new_tokens < 1) throw ConfigError("eval.max_new_tokens must be >= 1");
}

// ---------------------------------------------------------------------------
// Stages.

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::kGenData: return "gen-data";
    case Stage::kTrainCodebook: return "train-codebook";
    case Stage::kTokenize: return "tokenize";
    case Stage::kPretrain: return "pretrain";
    case Stage::kSft: return "sft";
    case Stage::kTrainMp: return "train-mp";
    case Stage::kRlhf: return "rlhf";
    case Stage::kSweepGamma: return "sweep-gamma";
    case Stage::kEval: return "eval";
    case Stage::kReport: return "report";
  }
  return "?";
}

Stage parse_stage(std::string_view s) {
  for (Stage st : {Stage::kGenData, Stage::kTrainCodebook, Stage::kTokenize, Stage::kPretrain, Stage::kSft,
                   Stage::kTrainMp, Stage::kRlhf, Stage::kSweepGamma, Stage::kEval, Stage::kReport})
    if (stage_name(st) == s) return st;
  throw ArgumentError("unknown stage: " + std::string(s));
}

std::vector<Stage> default_stages() {
  return {Stage::kGenData, Stage::kTrainCodebook, Stage::kTokenize, Stage::kPretrain, Stage::kSft,
          Stage::kTrainMp, Stage::kSweepGamma,    Stage::kEval,     Stage::kReport};
}

std::string gamma_tag(double gamma) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "g%.2f", gamma);
  return buf;
}

std::uint64_t file_fingerprint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Fnv1a h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return h.digest();
}

namespace {

const char* kSplits[] = {"clean_train", "clean_dev", "clean_test", "disordered_train", "disordered_dev", "disordered_test"};

std::uint64_t directory_fingerprint(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Fnv1a h;
  for (const auto& f : files) {
    h.update(f.filename().string());
    h.update_u64(file_fingerprint(f));
  }
  return h.digest();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

struct Pipeline::Cache {
  std::optional<Lexicon> lexicon;
  std::optional<Codebook> codebook;
  std::optional<TextTokenizer> tokenizer;
  std::map<std::string, Dataset> datasets;
  std::optional<MPModel> mp_model;
};

Pipeline::Pipeline(ExperimentConfig cfg, fs::path out_dir, std::ostream* log)
    : cfg_(std::move(cfg)), out_(std::move(out_dir)), log_(log), cache_(std::make_unique<Cache>()) {
  cfg_.validate();
  std::error_code ec;
  fs::create_directories(out_, ec);
  if (ec) throw IoError("cannot create output directory " + out_.string());
}

Pipeline::~Pipeline() = default;

void Pipeline::say(const std::string& msg) const {
  if (log_) *log_ << msg << std::endl;
}

namespace {

[[noreturn]] void missing(const std::string& stage, const fs::path& what, const std::string& producer) {
  throw StagingError("stage '" + stage + "' needs " + what.string() + ", produced by stage '" + producer + "'");
}

void require(const std::string& stage, const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) missing(stage, p, producer);
}

}  // namespace

#define SPEECHRL_NEED(stage, path, producer) require(stage, path, producer)

StageReport Pipeline::gen_data() {
  StageReport r{"gen-data", 0, false, {}};
  const auto data = out_ / "data";
  const Lexicon lex = build_lexicon(derive_seed(cfg_.seed, "lexicon"), cfg_.lexicon_words, cfg_.synonym_sets,
                                    cfg_.embedding_dim, {cfg_.frames_min, cfg_.frames_max});
  save_lexicon(data / "lexicon.json", lex);
  CorpusSpec spec = cfg_.corpus;
  spec.seed = derive_seed(cfg_.seed, "corpus");
  const auto files = gen_corpus(lex, spec, data);
  r.artifacts["data/lexicon.json"] = hex64(file_fingerprint(data / "lexicon.json"));
  for (const auto& [name, path] : files.manifests)
    r.artifacts["data/manifests/" + path.filename().string()] = hex64(file_fingerprint(path));
  r.artifacts["data/text_corpus.txt"] = hex64(file_fingerprint(files.text_corpus));
  r.artifacts["data/emb/"] = hex64(directory_fingerprint(data / "emb"));
  cache_->lexicon = lex;
  return r;
}

StageReport Pipeline::train_codebook_stage() {
  StageReport r{"train-codebook", 0, false, {}};
  const auto manifest = out_ / "data/manifests/clean_train.jsonl";
  SPEECHRL_NEED(r.stage, manifest, "gen-data");
  FrameSet frames;
  for (const auto& row : read_manifest(manifest)) frames.append(load_row_embedding(manifest, row));
  const auto tr = train_codebook(frames, cfg_.codebook_k, derive_seed(cfg_.seed, "codebook"), cfg_.kmeans_max_iters,
                                 cfg_.kmeans_rel_tol, file_fingerprint(manifest));
  write_codebook(out_ / "codebook.kmc", tr.codebook);
  std::ostringstream os;
  os.precision(12);
  os << "iteration,distortion\n";
  for (std::size_t i = 0; i < tr.distortion_trace.size(); ++i) os << i + 1 << ',' << tr.distortion_trace[i] << '\n';
  write_text_file((out_ / "curves/kmeans_distortion.csv").string(), os.str());
  r.artifacts["codebook.kmc"] = hex64(file_fingerprint(out_ / "codebook.kmc"));
  r.artifacts["curves/kmeans_distortion.csv"] = hex64(file_fingerprint(out_ / "curves/kmeans_distortion.csv"));
  cache_->codebook = tr.codebook;
  return r;
}

StageReport Pipeline::tokenize() {
  StageReport r{"tokenize", 0, false, {}};
  SPEECHRL_NEED(r.stage, out_ / "codebook.kmc", "train-codebook");
  SPEECHRL_NEED(r.stage, out_ / "data/lexicon.json", "gen-data");
  const Codebook cb = read_codebook(out_ / "codebook.kmc");
  const Lexicon lex = load_lexicon(out_ / "data/lexicon.json");
  const std::string corpus = read_text_file((out_ / "data/text_corpus.txt").string());
  const auto freqs = count_raw_frequencies(cfg_.model.vocab_size, lex.words, corpus);
  const VocabMap map = build_vocab_map(cfg_.model.vocab_size, cb.k, freqs);
  TextTokenizer tok(lex.words, map);  // validates that every word sits below the audio range
  write_text_file((out_ / "vocab_map.json").string(), vocab_map_to_json(map));
  r.artifacts["vocab_map.json"] = hex64(file_fingerprint(out_ / "vocab_map.json"));
  for (const char* split : kSplits) {
    const auto manifest = out_ / "data/manifests" / (std::string(split) + ".jsonl");
    SPEECHRL_NEED(r.stage, manifest, "gen-data");
    const auto ts = tokenize_split(split, manifest, cb);
    const auto rel = std::string("tokens/") + split + ".jsonl";
    write_tokenized(out_ / rel, ts);
    r.artifacts[rel] = hex64(file_fingerprint(out_ / rel));
  }
  cache_->datasets.clear();
  cache_->tokenizer.reset();
  return r;
}

namespace {

struct Loaded {
  const Lexicon& lex;
  const TextTokenizer& tok;
};

}  // namespace

StageReport Pipeline::pretrain() {
  StageReport r{"pretrain", 0, false, {}};
  SPEECHRL_NEED(r.stage, out_ / "vocab_map.json", "tokenize");
  SPEECHRL_NEED(r.stage, out_ / "codebook.kmc", "train-codebook");
  const Lexicon lex = load_lexicon(out_ / "data/lexicon.json");
  const VocabMap map = vocab_map_from_json(read_text_file((out_ / "vocab_map.json").string()));
  const TextTokenizer tok(lex.words, map);
  const Codebook cb = read_codebook(out_ / "codebook.kmc");

  PolicyCheckpoint init = init_model(cfg_.model, derive_seed(cfg_.seed, "init-model"));
  init.vocab_map = map;
  init.vocab_map_fingerprint = map.fingerprint();
  init.codebook_fingerprint = codebook_fingerprint(cb);
  const auto examples = make_text_examples(tok, read_text_file((out_ / "data/text_corpus.txt").string()));
  TrainConfig tc = cfg_.pretrain;
  tc.seed = derive_seed(cfg_.seed, "pretrain");
  const auto res = pretrain_text(init, examples, tc);
  save_checkpoint(out_ / "ckpt/pretrain.ckpt", res.ckpt);
  write_loss_curve(out_ / "curves/pretrain_loss.csv", res.losses);
  r.artifacts["ckpt/pretrain.ckpt"] = hex64(file_fingerprint(out_ / "ckpt/pretrain.ckpt"));
  r.artifacts["curves/pretrain_loss.csv"] = hex64(file_fingerprint(out_ / "curves/pretrain_loss.csv"));
  return r;
}

namespace {

const Dataset& dataset(Pipeline& p, std::map<std::string, Dataset>& cache, const TextTokenizer& tok,
                       const std::string& split, const std::string& stage) {
  auto it = cache.find(split);
  if (it != cache.end()) return it->second;
  const auto path = p.out_dir() / "tokens" / (split + ".jsonl");
  require(stage, path, "tokenize");
  return cache.emplace(split, make_dataset(read_tokenized(path), tok)).first->second;
}

}  // namespace

StageReport Pipeline::sft_stage() {
  StageReport r{"sft", 0, false, {}};
  SPEECHRL_NEED(r.stage, out_ / "ckpt/pretrain.ckpt", "pretrain");
  const Lexicon lex = load_lexicon(out_ / "data/lexicon.json");
  const PolicyCheckpoint base = load_checkpoint(out_ / "ckpt/pretrain.ckpt");
  const TextTokenizer tok(lex.words, base.vocab_map);
  auto& dc = cache_->datasets;
  const Dataset& clean_train = dataset(*this, dc, tok, "clean_train", r.stage);
  const Dataset& dis_train = dataset(*this, dc, tok, "disordered_train", r.stage);
  const Dataset& clean_dev = dataset(*this, dc, tok, "clean_dev", r.stage);
  const Dataset& dis_dev = dataset(*this, dc, tok, "disordered_dev", r.stage);

  TrainConfig tc = cfg_.sft;
  tc.seed = derive_seed(cfg_.seed, "sft");
  tc.max_new_tokens = cfg_.eval_max_new_tokens;

  auto run = [&](const std::string& name, const PolicyCheckpoint& init, MixtureSpec mix, const TrainConfig& t) {
    mix.normalize();
    auto t0 = std::chrono::steady_clock::now();
    auto res = sft(init, mix, t, clean_dev, dis_dev, tok);
    say("[sft] " + name + ": best step " + std::to_string(res.best_step) + ", shifted-dev WER " +
        std::to_string(res.best_wer) + " (" + std::to_string(seconds_since(t0)) + " s)");
    const auto ck = "ckpt/" + name + ".ckpt", cv = "curves/" + name + ".csv";
    save_checkpoint(out_ / ck, res.best);
    write_sft_curve(out_ / cv, res.curve);
    r.artifacts[ck] = hex64(file_fingerprint(out_ / ck));
    r.artifacts[cv] = hex64(file_fingerprint(out_ / cv));
    return res;
  };
  run("sft_clean", base, MixtureSpec{{{&clean_train, 1.0}}}, tc);
  const auto mix = run("sft_mix", base,
                       MixtureSpec{{{&dis_train, cfg_.mix_shifted_weight}, {&clean_train, 1.0 - cfg_.mix_shifted_weight}}},
                       tc);
  TrainConfig cc = cfg_.continued_sft;
  cc.seed = derive_seed(cfg_.seed, "continued-sft");
  cc.max_new_tokens = cfg_.eval_max_new_tokens;
  run("sft_continued", mix.best, MixtureSpec{{{&dis_train, 1.0}}}, cc);
  return r;
}

StageReport Pipeline::train_mp() {
  StageReport r{"train-mp", 0, false, {}};
  SPEECHRL_NEED(r.stage, out_ / "data/lexicon.json", "gen-data");
  const Lexicon lex = load_lexicon(out_ / "data/lexicon.json");
  const auto pairs = make_mp_pairs(lex, cfg_.mp_pairs, derive_seed(cfg_.seed, "mp-pairs"), cfg_.corpus.min_words,
                                   cfg_.corpus.max_words);
  write_mp_pairs(out_ / "mp/pairs.jsonl", pairs);
  MpTrainConfig mc = cfg_.mp;
  mc.seed = derive_seed(cfg_.seed, "mp-train");
  const MPModel model = train_mp_model(lex, pairs, mc);
  write_text_file((out_ / "mp/model.json").string(), model.to_json());

  auto shuffled = pairs;
  std::vector<int> labels;
  for (const auto& p : shuffled) labels.push_back(p.label);
  Rng rng(derive_seed(cfg_.seed, "mp-shuffle"));
  rng.shuffle(labels);
  for (std::size_t i = 0; i < shuffled.size(); ++i) shuffled[i].label = labels[i];
  const MPModel null_model = train_mp_model(lex, shuffled, mc);

  nlohmann::ordered_json s;
  s["pairs"] = pairs.size();
  s["holdout_auc"] = model.holdout_auc();
  s["shuffled_label_auc"] = null_model.holdout_auc();
  write_text_file((out_ / "mp/summary.json").string(), s.dump(2) + "\n");
  say("[train-mp] holdout AUC " + std::to_string(model.holdout_auc()) + ", shuffled-label AUC " +
      std::to_string(null_model.holdout_auc()));
  for (const char* f : {"mp/pairs.jsonl", "mp/model.json", "mp/summary.json"})
    r.artifacts[f] = hex64(file_fingerprint(out_ / f));
  cache_->mp_model = model;
  return r;
}

StageReport Pipeline::rlhf(const std::vector<double>& gammas, const std::string& stage) {
  StageReport r{stage, 0, false, {}};
  SPEECHRL_NEED(stage, out_ / "ckpt/sft_mix.ckpt", "sft");
  SPEECHRL_NEED(stage, out_ / "mp/model.json", "train-mp");
  const Lexicon lex = load_lexicon(out_ / "data/lexicon.json");
  const PolicyCheckpoint base = load_checkpoint(out_ / "ckpt/sft_mix.ckpt");
  const MPModel mp = MPModel::from_json(read_text_file((out_ / "mp/model.json").string()));
  const TextTokenizer tok(lex.words, base.vocab_map);
  auto& dc = cache_->datasets;
  const Dataset& train = dataset(*this, dc, tok, "disordered_train", stage);
  const Dataset& dev = dataset(*this, dc, tok, "disordered_dev", stage);

  const MpScoreFn learned = [&mp](std::string_view ref, std::string_view hyp) { return mp.score(ref, hyp); };
  const MpScoreFn oracle = [&lex](std::string_view ref, std::string_view hyp) {
    return static_cast<double>(mp_oracle(lex, ref, hyp));
  };
  for (double g : gammas) {
    RewardConfig rc = cfg_.reward;
    rc.gamma = g;
    PPOConfig pc = cfg_.ppo;
    pc.seed = derive_seed(cfg_.seed, "rlhf");
    pc.max_new_tokens = cfg_.eval_max_new_tokens;
    RolloutContext ctx{&tok, rc.mp_source == MpSource::kOracle ? oracle : learned, rc, {}};
    DevEvalHooks hooks{&tok, learned};
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = rlhf_train(base, train, dev, rc, pc, ctx, hooks);
    const auto& best = res.evals[select_rlhf_checkpoint(res.evals)];
    say("[" + stage + "] gamma " + Printer::num(g) + ": best update " + std::to_string(res.best_update) + ", dev WER " +
        std::to_string(best.dev_wer) + ", dev MP% " + std::to_string(best.dev_mp_pct) + " (" +
        std::to_string(seconds_since(t0)) + " s)");
    const auto ck = "ckpt/rlhf_" + gamma_tag(g) + ".ckpt", cv = "curves/rlhf_" + gamma_tag(g) + ".csv";
    save_checkpoint(out_ / ck, res.best);
    write_rlhf_curve(out_ / cv, res.curve);
    r.artifacts[ck] = hex64(file_fingerprint(out_ / ck));
    r.artifacts[cv] = hex64(file_fingerprint(out_ / cv));
  }
  return r;
}

namespace {

nlohmann::ordered_json aggregate_json(const Aggregate& a) {
  nlohmann::ordered_json j;
  j["count"] = a.count;
  j["ref_words"] = a.ref_words;
  j["edits"] = a.edits;
  j["corpus_wer"] = a.corpus_wer();
  j["mp_pct"] = a.mp_pct();
  return j;
}

std::vector<std::string> eval_models(const ExperimentConfig& cfg) {
  std::vector<std::string> models{"sft_clean", "sft_mix", "sft_continued"};
  std::vector<double> gammas = cfg.gammas;
  gammas.push_back(cfg.reward.gamma);
  std::sort(gammas.begin(), gammas.end());
  gammas.erase(std::unique(gammas.begin(), gammas.end()), gammas.end());
  for (double g : gammas) models.push_back("rlhf_" + gamma_tag(g));
  return models;
}

}  // namespace

StageReport Pipeline::eval() {
  StageReport r{"eval", 0, false, {}};
  SPEECHRL_NEED(r.stage, out_ / "mp/model.json", "train-mp");
  SPEECHRL_NEED(r.stage, out_ / "ckpt/sft_mix.ckpt", "sft");
  const Lexicon lex = load_lexicon(out_ / "data/lexicon.json");
  const MPModel mp = MPModel::from_json(read_text_file((out_ / "mp/model.json").string()));
  const VocabMap map = vocab_map_from_json(read_text_file((out_ / "vocab_map.json").string()));
  const TextTokenizer tok(lex.words, map);
  const MetricsHandles handles{&lex, &mp};
  auto& dc = cache_->datasets;

  nlohmann::ordered_json results = nlohmann::ordered_json::object();
  for (const auto& model : eval_models(cfg_)) {
    const auto ck_path = out_ / "ckpt" / (model + ".ckpt");
    if (!fs::exists(ck_path)) {
      say("[eval] skipping " + model + " (no checkpoint)");
      continue;
    }
    const PolicyCheckpoint ck = load_checkpoint(ck_path);
    nlohmann::ordered_json mj = nlohmann::ordered_json::object();
    for (const char* split : {"disordered_dev", "disordered_test", "clean_dev"}) {
      const Dataset& ds = dataset(*this, dc, tok, split, r.stage);
      const auto res = evaluate(ck, ds, tok, handles, cfg_.eval_max_new_tokens);
      const auto base = "reports/" + model + "/" + split;
      write_records_csv(out_ / (base + "_records.csv"), res.records);
      write_report_csv(out_ / (base + "_report.csv"), res.report);
      write_hypotheses(out_ / (base + "_hyps.jsonl"), res.records);
      nlohmann::ordered_json sj = aggregate_json(res.report.overall);
      nlohmann::ordered_json sev = nlohmann::ordered_json::object();
      for (const auto& [s, a] : res.report.by_severity) sev[std::string(to_string(s))] = aggregate_json(a);
      sj["by_severity"] = sev;
      const auto ag = agreement(res.records);
      sj["agreement_accuracy"] = ag.accuracy;
      sj["spearman_rho"] = ag.spearman_rho ? nlohmann::ordered_json(*ag.spearman_rho) : nlohmann::ordered_json(nullptr);
      mj[split] = sj;
      for (const char* suffix : {"_records.csv", "_report.csv", "_hyps.jsonl"})
        r.artifacts[base + suffix] = hex64(file_fingerprint(out_ / (base + suffix)));
    }
    results[model] = mj;
  }
  write_text_file((out_ / "reports/eval_results.json").string(), results.dump(2) + "\n");
  r.artifacts["reports/eval_results.json"] = hex64(file_fingerprint(out_ / "reports/eval_results.json"));
  return r;
}

StageReport Pipeline::report() {
  StageReport r{"report", 0, false, {}};
  SPEECHRL_NEED(r.stage, out_ / "reports/eval_results.json", "eval");
  const auto results = nlohmann::json::parse(read_text_file((out_ / "reports/eval_results.json").string()));

  std::ostringstream summary;
  summary.precision(9);
  summary << "model,split,count,corpus_wer,mp_pct,agreement_accuracy,spearman_rho\n";
  std::ostringstream sev;
  sev.precision(9);
  sev << "model,split,severity,count,corpus_wer,mp_pct\n";
  for (const auto& [model, splits] : results.items()) {
    for (const auto& [split, s] : splits.items()) {
      summary << model << ',' << split << ',' << s.at("count").get<long>() << ',' << s.at("corpus_wer").get<double>()
              << ',' << s.at("mp_pct").get<double>() << ',' << s.at("agreement_accuracy").get<double>() << ',';
      if (!s.at("spearman_rho").is_null()) summary << s.at("spearman_rho").get<double>();
      summary << '\n';
      for (const auto& [name, b] : s.at("by_severity").items())
        sev << model << ',' << split << ',' << name << ',' << b.at("count").get<long>() << ','
            << b.at("corpus_wer").get<double>() << ',' << b.at("mp_pct").get<double>() << '\n';
    }
  }
  write_text_file((out_ / "reports/summary.csv").string(), summary.str());
  write_text_file((out_ / "reports/severity.csv").string(), sev.str());

  std::ostringstream sweep;
  sweep.precision(9);
  sweep << "gamma,dev_wer,dev_mp_pct,test_wer,test_mp_pct\n";
  for (double g : cfg_.gammas) {
    const auto key = "rlhf_" + gamma_tag(g);
    if (!results.contains(key)) continue;
    const auto& m = results.at(key);
    sweep << Printer::num(g) << ',' << m.at("disordered_dev").at("corpus_wer").get<double>() << ','
          << m.at("disordered_dev").at("mp_pct").get<double>() << ','
          << m.at("disordered_test").at("corpus_wer").get<double>() << ','
          << m.at("disordered_test").at("mp_pct").get<double>() << '\n';
  }
  write_text_file((out_ / "reports/gamma_sweep.csv").string(), sweep.str());
  for (const char* f : {"reports/summary.csv", "reports/severity.csv", "reports/gamma_sweep.csv"})
    r.artifacts[f] = hex64(file_fingerprint(out_ / f));
  return r;
}

// ---------------------------------------------------------------------------

StageReport Pipeline::run_stage(Stage s) {
  const auto t0 = std::chrono::steady_clock::now();
  say("[" + std::string(stage_name(s)) + "] start");
  StageReport r;
  switch (s) {
    case Stage::kGenData: r = gen_data(); break;
    case Stage::kTrainCodebook: r = train_codebook_stage(); break;
    case Stage::kTokenize: r = tokenize(); break;
    case Stage::kPretrain: r = pretrain(); break;
    case Stage::kSft: r = sft_stage(); break;
    case Stage::kTrainMp: r = train_mp(); break;
    case Stage::kRlhf: r = rlhf({cfg_.reward.gamma}, "rlhf"); break;
    case Stage::kSweepGamma: r = rlhf(cfg_.gammas, "sweep-gamma"); break;
    case Stage::kEval: r = eval(); break;
    case Stage::kReport: r = report(); break;
  }
  r.seconds = seconds_since(t0);
  say("[" + r.stage + "] done in " + std::to_string(r.seconds) + " s");
  record(r);
  return r;
}

namespace {

nlohmann::ordered_json load_manifest(const fs::path& p) {
  if (!fs::exists(p)) return nlohmann::ordered_json::object();
  try {
    return nlohmann::ordered_json::parse(read_text_file(p.string()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed run manifest: ") + e.what());
  }
}

std::uint64_t artifacts_fingerprint(const nlohmann::ordered_json& stages) {
  std::map<std::string, std::string> all;
  for (const auto& [name, st] : stages.items())
    for (const auto& [path, fp] : st.at("artifacts").items()) all[name + ":" + path] = fp.get<std::string>();
  Fnv1a h;
  for (const auto& [k, v] : all) {
    h.update(k);
    h.update(v);
  }
  return h.digest();
}

}  // namespace

void Pipeline::record(const StageReport& r) {
  const auto path = out_ / "run_manifest.json";
  auto m = load_manifest(path);
  const std::string hash = hex64(cfg_.hash());
  if (!m.contains("config_hash") || m.at("config_hash").get<std::string>() != hash) {
    m = nlohmann::ordered_json::object();
    m["config_hash"] = hash;
    m["seed"] = cfg_.seed;
    m["config"] = cfg_.canonical();
    m["stages"] = nlohmann::ordered_json::object();
  }
  nlohmann::ordered_json st;
  st["seconds"] = r.seconds;
  st["artifacts"] = r.artifacts;
  m["stages"][r.stage] = st;
  m["artifact_fingerprint"] = hex64(artifacts_fingerprint(m["stages"]));
  write_text_file(path.string(), m.dump(2) + "\n");
}

bool Pipeline::up_to_date(Stage s) const {
  const auto m = load_manifest(out_ / "run_manifest.json");
  if (!m.contains("config_hash") || m.at("config_hash").get<std::string>() != hex64(cfg_.hash())) return false;
  const std::string name(stage_name(s));
  if (!m.at("stages").contains(name)) return false;
  for (const auto& [rel, fp] : m.at("stages").at(name).at("artifacts").items()) {
    const auto p = out_ / rel;
    if (!fs::exists(p)) return false;
    const auto actual = rel.back() == '/' ? directory_fingerprint(p) : file_fingerprint(p);
    if (hex64(actual) != fp.get<std::string>()) return false;
  }
  return true;
}

std::vector<StageReport> Pipeline::run_all(bool resume) {
  std::vector<StageReport> out;
  bool upstream_ran = false;
  for (Stage s : default_stages()) {
    if (resume && !upstream_ran && up_to_date(s)) {
      say("[" + std::string(stage_name(s)) + "] up to date, skipped");
      StageReport r;
      r.stage = std::string(stage_name(s));
      r.skipped = true;
      out.push_back(r);
      continue;
    }
    out.push_back(run_stage(s));
    upstream_ran = true;
  }
  return out;
}

EvalResult Pipeline::score_hypotheses_file(const fs::path& manifest, const fs::path& hyps_path) {
  SPEECHRL_NEED("eval", out_ / "mp/model.json", "train-mp");
  SPEECHRL_NEED("eval", out_ / "data/lexicon.json", "gen-data");
  const Lexicon lex = load_lexicon(out_ / "data/lexicon.json");
  const MPModel mp = MPModel::from_json(read_text_file((out_ / "mp/model.json").string()));
  const auto rows = read_manifest(manifest);
  if (rows.empty()) throw ArgumentError("manifest is empty: " + manifest.string());
  const auto hyps = read_hypotheses(hyps_path, rows);
  std::vector<TokenizedUtterance> meta;
  for (const auto& row : rows) meta.push_back({row.utt_id, {}, row.transcript, row.domain, row.severity, row.speaker_id});
  EvalResult res;
  res.records = score_hypotheses(meta, hyps, MetricsHandles{&lex, &mp});
  res.report = make_report(res.records);
  return res;
}

std::uint64_t run_manifest_fingerprint(const fs::path& manifest_path) {
  const auto m = load_manifest(manifest_path);
  if (!m.contains("stages")) throw DataError("run manifest has no stages: " + manifest_path.string());
  return artifacts_fingerprint(m.at("stages"));
}

}  // namespace speechrl
