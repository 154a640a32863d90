#include "speechrl/train_sft.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <sstream>

#include "speechrl/metrics.hpp"

namespace speechrl {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (!(input_dropout >= 0.0 && input_dropout < 1.0)) throw ConfigError("input_dropout must be in [0,1)");
  if (warmup_steps < 0 || total_steps < 0 || warmup_steps > total_steps)
    throw ConfigError("warmup_steps must lie in [0, total_steps]");
  if (!(final_lr_fraction >= 0.0 && final_lr_fraction <= 1.0)) throw ConfigError("final_lr_fraction must be in [0,1]");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0))
    throw ConfigError("invalid Adam hyperparameters");
}

double TrainConfig::lr_at(int step) const {
  if (step <= 0) return warmup_steps > 0 ? 0.0 : learning_rate;
  if (step < warmup_steps) return learning_rate * step / warmup_steps;
  if (step >= total_steps) return final_lr_fraction * learning_rate;
  const double span = total_steps - warmup_steps;
  const double progress = span > 0 ? (step - warmup_steps) / span : 1.0;
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return learning_rate * (final_lr_fraction + (1.0 - final_lr_fraction) * cosine);
}

Adam::Adam(std::size_t n, double beta1, double beta2, double eps)
    : b1_(beta1), b2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(std::span<float> params, std::span<const float> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) throw ArgumentError("Adam: size mismatch");
  ++t_;
  if (lr == 0.0) return;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * g * g;
    params[i] -= static_cast<float>(lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_));
  }
}

double clip_grad_norm(std::span<float> grads, double max_norm) {
  double ss = 0.0;
  for (float g : grads) ss += static_cast<double>(g) * g;
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    for (auto& g : grads) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------

TokenizedSplit tokenize_split(std::string name, const std::filesystem::path& manifest, const Codebook& cb) {
  const auto rows = read_manifest(manifest);
  TokenizedSplit out;
  out.name = std::move(name);
  out.k = cb.k;
  out.codebook_fingerprint = codebook_fingerprint(cb);
  out.rows.resize(rows.size());
  std::vector<std::string> errors(rows.size());
#pragma omp parallel for schedule(dynamic, 16)
  for (std::size_t i = 0; i < rows.size(); ++i) {
    try {
      const auto emb = load_row_embedding(manifest, rows[i]);
      auto& r = out.rows[i];
      r.utt_id = rows[i].utt_id;
      r.audio = quantize(cb, emb);
      r.transcript = rows[i].transcript;
      r.domain = rows[i].domain;
      r.severity = rows[i].severity;
      r.speaker_id = rows[i].speaker_id;
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw DataError("tokenize " + manifest.string() + ": " + e);
  return out;
}

void write_tokenized(const std::filesystem::path& path, const TokenizedSplit& split) {
  std::string text;
  nlohmann::ordered_json h;
  h["name"] = split.name;
  h["k"] = split.k;
  h["codebook_fingerprint"] = hex64(split.codebook_fingerprint);
  text += h.dump() + "\n";
  for (const auto& r : split.rows) {
    nlohmann::ordered_json j;
    j["utt_id"] = r.utt_id;
    j["audio"] = r.audio;
    j["transcript"] = r.transcript;
    j["domain"] = to_string(r.domain);
    j["severity"] = to_string(r.severity);
    j["speaker_id"] = r.speaker_id;
    text += j.dump() + "\n";
  }
  write_text_file(path.string(), text);
}

TokenizedSplit read_tokenized(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  TokenizedSplit out;
  std::string line;
  bool header = true;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (header) {
        out.name = j.at("name").get<std::string>();
        out.k = j.at("k").get<int>();
        out.codebook_fingerprint = parse_hex64(j.at("codebook_fingerprint").get<std::string>());
        header = false;
        continue;
      }
      TokenizedUtterance r;
      r.utt_id = j.at("utt_id").get<std::string>();
      r.audio = j.at("audio").get<std::vector<int>>();
      r.transcript = j.at("transcript").get<std::string>();
      r.domain = parse_domain(j.at("domain").get<std::string>());
      r.severity = parse_severity(j.at("severity").get<std::string>());
      r.speaker_id = j.at("speaker_id").get<std::string>();
      for (int a : r.audio)
        if (a < 0 || a >= out.k) throw DataError("audio id out of range in " + r.utt_id);
      out.rows.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed tokenized split " + path.string() + ": " + e.what());
  }
  if (header) throw DataError("tokenized split has no header: " + path.string());
  return out;
}

Dataset make_dataset(const TokenizedSplit& split, const TextTokenizer& tok) {
  const auto& map = tok.vocab();
  if (split.k != map.k) throw CompatibilityError("split " + split.name + " was tokenized with a different K");
  Dataset ds;
  ds.name = split.name;
  ds.rows = split.rows;
  ds.vocab_map_fingerprint = map.fingerprint();
  ds.codebook_fingerprint = split.codebook_fingerprint;
  ds.examples.reserve(split.rows.size());
  for (const auto& r : split.rows) ds.examples.push_back(encode_example(map, r.audio, tok.encode(r.transcript)));
  return ds;
}

std::vector<EncodedExample> make_text_examples(const TextTokenizer& tok, std::string_view corpus) {
  std::vector<EncodedExample> out;
  std::istringstream in{std::string(corpus)};
  std::string line;
  while (std::getline(in, line)) {
    const auto ids = tok.encode(line);
    if (ids.empty()) continue;
    EncodedExample ex;
    ex.tokens.push_back(kBos);
    ex.tokens.insert(ex.tokens.end(), ids.begin(), ids.end());
    ex.tokens.push_back(kEos);
    ex.loss_mask.assign(ex.tokens.size() - 1, 1);
    out.push_back(std::move(ex));
  }
  return out;
}

void check_compatible(const PolicyCheckpoint& ckpt, const Dataset& ds) {
  if (ckpt.vocab_map_fingerprint != ds.vocab_map_fingerprint)
    throw CompatibilityError("dataset " + ds.name + " uses a different vocabulary map than the checkpoint");
  if (ckpt.codebook_fingerprint != ds.codebook_fingerprint)
    throw CompatibilityError("dataset " + ds.name + " uses a different codebook than the checkpoint");
}

// ---------------------------------------------------------------------------

void MixtureSpec::normalize() {
  if (components.empty()) throw ArgumentError("mixture has no components");
  double sum = 0.0;
  for (const auto& c : components) {
    if (!(c.weight >= 0.0)) throw ArgumentError("mixture weights must be non-negative");
    sum += c.weight;
  }
  if (!(sum > 0.0)) throw ArgumentError("mixture weights sum to zero");
  for (auto& c : components) c.weight /= sum;
}

namespace {

std::size_t permuted_index(std::size_t n, std::uint64_t g, std::uint64_t seed, std::size_t component) {
  const std::uint64_t epoch = g / n;
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(mix64(mix64(seed, 0x6d69780000000000ULL + component), epoch));
  rng.shuffle(perm);
  return perm[g % n];
}

}  // namespace

std::vector<std::size_t> epoch_sample(std::size_t n, int count, std::uint64_t step, std::uint64_t seed,
                                      std::size_t stream) {
  if (n == 0) throw DataError("epoch_sample: empty dataset");
  std::vector<std::size_t> out;
  for (int i = 0; i < count; ++i)
    out.push_back(permuted_index(n, step * static_cast<std::uint64_t>(count) + static_cast<std::uint64_t>(i), seed, stream));
  return out;
}

std::vector<int> sample_mixture_components(const MixtureSpec& spec, int batch_size, std::uint64_t step,
                                           std::uint64_t seed) {
  if (spec.components.empty()) throw ArgumentError("mixture has no components");
  std::vector<double> w;
  for (const auto& c : spec.components) {
    if (c.data == nullptr || c.data->size() == 0) throw DataError("mixture component has no examples");
    w.push_back(c.weight);
  }
  Rng rng(mix64(derive_seed(seed, "mixture-step"), step));
  std::vector<int> out(static_cast<std::size_t>(batch_size));
  for (auto& c : out) c = static_cast<int>(rng.categorical(w));
  return out;
}

std::vector<EncodedExample> sample_mixture_batch(const MixtureSpec& spec, int batch_size, std::uint64_t step,
                                                 std::uint64_t seed) {
  const auto comps = sample_mixture_components(spec, batch_size, step, seed);
  std::vector<EncodedExample> batch;
  batch.reserve(comps.size());
  for (std::size_t i = 0; i < comps.size(); ++i) {
    const auto c = static_cast<std::size_t>(comps[i]);
    const Dataset& ds = *spec.components[c].data;
    const std::uint64_t g = step * static_cast<std::uint64_t>(batch_size) + i;
    batch.push_back(ds.examples[permuted_index(ds.size(), g, seed, c)]);
  }
  return batch;
}

// ---------------------------------------------------------------------------

namespace {

double train_step(PolicyCheckpoint& ck, Adam& opt, std::span<const EncodedExample> batch, const TrainConfig& cfg,
                  int step) {
  ModelConfig mc = ck.config;
  mc.dropout_rate = cfg.input_dropout;
  std::vector<float> grads(ck.params.size(), 0.0f);
  const double loss = loss_and_grads<float>(mc, ck.params, batch, cfg.input_dropout > 0.0,
                                            mix64(derive_seed(cfg.seed, "dropout"), static_cast<std::uint64_t>(step)), grads);
  if (!std::isfinite(loss)) throw DivergenceError("non-finite training loss at step " + std::to_string(step));
  clip_grad_norm(grads, cfg.grad_clip);
  opt.step(ck.params, grads, cfg.lr_at(step));
  ck.step += 1;
  return loss;
}

}  // namespace

PretrainResult pretrain_text(const PolicyCheckpoint& init, std::span<const EncodedExample> corpus,
                             const TrainConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw ArgumentError("pretrain_text: empty corpus");
  PretrainResult res;
  res.ckpt = init;
  Adam opt(init.params.size(), cfg.beta1, cfg.beta2, cfg.adam_eps);
  Dataset text;
  text.examples.assign(corpus.begin(), corpus.end());
  MixtureSpec mix{{{&text, 1.0}}};
  for (int step = 0; step < cfg.total_steps; ++step) {
    const auto batch = sample_mixture_batch(mix, cfg.batch_size, static_cast<std::uint64_t>(step), cfg.seed);
    res.losses.push_back(train_step(res.ckpt, opt, batch, cfg, step));
  }
  return res;
}

std::vector<std::string> decode_dataset(const PolicyCheckpoint& ckpt, const Dataset& ds, const TextTokenizer& tok,
                                        int max_new_tokens) {
  std::vector<std::string> out(ds.size());
  DecodeConfig dc;
  dc.max_new_tokens = max_new_tokens;
#pragma omp parallel for schedule(dynamic, 4)
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto prompt = ds.examples[i].prompt();
    out[i] = tok.decode(generate(ckpt, prompt, dc).tokens);
  }
  return out;
}

double dataset_wer(const PolicyCheckpoint& ckpt, const Dataset& ds, const TextTokenizer& tok, int max_new_tokens) {
  const auto hyps = decode_dataset(ckpt, ds, tok, max_new_tokens);
  long edits = 0, words = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto b = wer(ds.rows[i].transcript, hyps[i]);
    edits += b.edits();
    words += b.ref_len;
  }
  return static_cast<double>(edits) / static_cast<double>(words);
}

std::size_t select_best(std::span<const double> wers) {
  if (wers.empty()) throw ArgumentError("select_best: no evaluations");
  std::size_t best = 0;
  for (std::size_t i = 1; i < wers.size(); ++i)
    if (wers[i] < wers[best]) best = i;
  return best;
}

SftResult sft(const PolicyCheckpoint& init, const MixtureSpec& mixture, const TrainConfig& cfg, const Dataset& dev_clean,
              const Dataset& dev_shifted, const TextTokenizer& tok) {
  cfg.validate();
  for (const auto& c : mixture.components) {
    if (c.data == nullptr) throw ArgumentError("sft: null mixture component");
    check_compatible(init, *c.data);
  }
  check_compatible(init, dev_clean);
  check_compatible(init, dev_shifted);
  if (tok.vocab().fingerprint() != init.vocab_map_fingerprint)
    throw CompatibilityError("sft: tokenizer vocabulary does not match the checkpoint");

  SftResult res;
  PolicyCheckpoint ck = init;
  Adam opt(ck.params.size(), cfg.beta1, cfg.beta2, cfg.adam_eps);
  std::vector<double> eval_wers;
  double loss_acc = 0.0;
  int loss_n = 0;
  for (int step = 0; step < cfg.total_steps; ++step) {
    const auto batch = sample_mixture_batch(mixture, cfg.batch_size, static_cast<std::uint64_t>(step), cfg.seed);
    const double loss = train_step(ck, opt, batch, cfg, step);
    res.step_losses.push_back(loss);
    loss_acc += loss;
    ++loss_n;
    const int done = step + 1;
    if (done % cfg.eval_every != 0 && done != cfg.total_steps) continue;
    SftCurveRow row;
    row.step = done;
    row.train_loss = loss_acc / loss_n;
    row.dev_clean_loss = eval_loss(ck, dev_clean.examples);
    row.dev_shifted_loss = eval_loss(ck, dev_shifted.examples);
    row.dev_clean_wer = dataset_wer(ck, dev_clean, tok, cfg.max_new_tokens);
    row.dev_shifted_wer = dataset_wer(ck, dev_shifted, tok, cfg.max_new_tokens);
    res.curve.push_back(row);
    eval_wers.push_back(row.dev_shifted_wer);
    if (select_best(eval_wers) == eval_wers.size() - 1) {
      res.best = ck;
      res.best_step = done;
      res.best_wer = row.dev_shifted_wer;
    }
    loss_acc = 0.0;
    loss_n = 0;
  }
  if (res.curve.empty()) res.best = ck;
  return res;
}

void write_sft_curve(const std::filesystem::path& path, std::span<const SftCurveRow> rows) {
  std::ostringstream os;
  os.precision(9);
  os << "step,train_loss,dev_clean_loss,dev_shifted_loss,dev_clean_wer,dev_shifted_wer\n";
  for (const auto& r : rows)
    os << r.step << ',' << r.train_loss << ',' << r.dev_clean_loss << ',' << r.dev_shifted_loss << ','
       << r.dev_clean_wer << ',' << r.dev_shifted_wer << '\n';
  write_text_file(path.string(), os.str());
}

void write_loss_curve(const std::filesystem::path& path, std::span<const double> losses) {
  std::ostringstream os;
  os.precision(9);
  os << "step,train_loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << losses[i] << '\n';
  write_text_file(path.string(), os.str());
}

}  // namespace speechrl
