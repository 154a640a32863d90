#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <json.hpp>

#include "speechrl/metrics.hpp"

namespace speechrl {

namespace {

constexpr int kUnknown = -2;

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

MPModel::MPModel(const Lexicon& lex) {
  for (int w = 0; w < lex.size(); ++w) class_of_.emplace(lex.words[static_cast<std::size_t>(w)], lex.synonym_class[static_cast<std::size_t>(w)]);
  scale_.fill(1.0);
}

MPModel::Features MPModel::features(std::string_view ref, std::string_view hyp) const {
  auto analyse = [&](std::string_view text, std::map<int, int>& bag, int& content, int& function, int& unknown) {
    for (const auto& w : normalize_text(text)) {
      auto it = class_of_.find(w);
      const int c = it == class_of_.end() ? kUnknown : it->second;
      if (c == Lexicon::kFunctionClass) {
        ++function;
        continue;
      }
      if (c == kUnknown) ++unknown;
      ++content;
      bag[c]++;
    }
  };
  std::map<int, int> rb, hb;
  int rc = 0, rf = 0, ru = 0, hc = 0, hf = 0, hu = 0;
  analyse(ref, rb, rc, rf, ru);
  analyse(hyp, hb, hc, hf, hu);
  int overlap = 0;
  for (const auto& [c, n] : rb) {
    if (c == kUnknown) continue;
    auto it = hb.find(c);
    if (it != hb.end()) overlap += std::min(n, it->second);
  }
  Features f{};
  f[0] = static_cast<double>(overlap) / std::max(rc, 1);
  f[1] = static_cast<double>(overlap) / std::max(hc, 1);
  f[2] = (overlap == rc && overlap == hc) ? 1.0 : 0.0;
  f[3] = rc;
  f[4] = hc;
  f[5] = std::abs(rc - hc);
  f[6] = hu;
  f[7] = std::abs(rf - hf);
  return f;
}

double MPModel::logit(const Features& f) const {
  double z = bias_;
  for (int i = 0; i < kNumFeatures; ++i) z += weights_[static_cast<std::size_t>(i)] * (f[static_cast<std::size_t>(i)] - mean_[static_cast<std::size_t>(i)]) * scale_[static_cast<std::size_t>(i)];
  return z;
}

double MPModel::score(std::string_view ref, std::string_view hyp) const { return sigmoid(logit(features(ref, hyp))); }

std::vector<double> MPModel::score_batch(std::span<const MpPair> pairs) const {
  std::vector<double> out(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) out[i] = score(pairs[i].ref, pairs[i].hyp);
  return out;
}

std::uint64_t MPModel::fingerprint() const { return hash_string(to_json()); }

std::string MPModel::to_json() const {
  nlohmann::ordered_json j;
  std::map<std::string, int> sorted(class_of_.begin(), class_of_.end());
  j["class_of"] = sorted;
  j["mean"] = mean_;
  j["scale"] = scale_;
  j["weights"] = weights_;
  j["bias"] = bias_;
  j["holdout_auc"] = holdout_auc_;
  return j.dump();
}

MPModel MPModel::from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MPModel m;
    for (const auto& [w, c] : j.at("class_of").items()) m.class_of_.emplace(w, c.get<int>());
    m.mean_ = j.at("mean").get<std::array<double, kNumFeatures>>();
    m.scale_ = j.at("scale").get<std::array<double, kNumFeatures>>();
    m.weights_ = j.at("weights").get<std::array<double, kNumFeatures>>();
    m.bias_ = j.at("bias").get<double>();
    m.holdout_auc_ = j.at("holdout_auc").get<double>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed MP model: ") + e.what());
  }
}

MPModel train_mp_model(const Lexicon& lex, std::span<const MpPair> pairs, const MpTrainConfig& cfg) {
  if (!(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0)) throw ArgumentError("train_mp_model: holdout_fraction must be in (0,1)");
  if (cfg.steps < 0 || !(cfg.lr >= 0.0)) throw ArgumentError("train_mp_model: bad optimiser settings");
  bool has0 = false, has1 = false;
  for (const auto& p : pairs) (p.label == 1 ? has1 : has0) = true;
  if (!has0 || !has1) throw DataError("train_mp_model: training pairs contain a single label");

  MPModel model(lex);
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(cfg.seed, "mp-split"));
  rng.shuffle(order);
  const auto n_hold = static_cast<std::size_t>(std::lround(cfg.holdout_fraction * static_cast<double>(pairs.size())));
  std::vector<std::size_t> hold(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
  if (train.empty() || hold.empty()) throw DataError("train_mp_model: too few pairs for the holdout split");

  constexpr int F = MPModel::kNumFeatures;
  std::vector<MPModel::Features> feats(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) feats[i] = model.features(pairs[i].ref, pairs[i].hyp);

  for (int f = 0; f < F; ++f) {
    double m = 0, v = 0;
    for (auto i : train) m += feats[i][static_cast<std::size_t>(f)];
    m /= static_cast<double>(train.size());
    for (auto i : train) v += (feats[i][static_cast<std::size_t>(f)] - m) * (feats[i][static_cast<std::size_t>(f)] - m);
    v /= static_cast<double>(train.size());
    model.mean_[static_cast<std::size_t>(f)] = m;
    model.scale_[static_cast<std::size_t>(f)] = v > 1e-12 ? 1.0 / std::sqrt(v) : 1.0;
  }

  // Full-batch Adam on mean binary cross-entropy.
  std::array<double, F + 1> m1{}, m2{};
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int step = 1; step <= cfg.steps; ++step) {
    std::array<double, F + 1> g{};
    for (auto i : train) {
      const double err = sigmoid(model.logit(feats[i])) - pairs[i].label;
      for (int f = 0; f < F; ++f)
        g[static_cast<std::size_t>(f)] += err * (feats[i][static_cast<std::size_t>(f)] - model.mean_[static_cast<std::size_t>(f)]) * model.scale_[static_cast<std::size_t>(f)];
      g[F] += err;
    }
    for (auto& x : g) x /= static_cast<double>(train.size());
    const double c1 = 1.0 - std::pow(b1, step), c2 = 1.0 - std::pow(b2, step);
    for (int p = 0; p <= F; ++p) {
      const auto up = static_cast<std::size_t>(p);
      m1[up] = b1 * m1[up] + (1 - b1) * g[up];
      m2[up] = b2 * m2[up] + (1 - b2) * g[up] * g[up];
      const double delta = cfg.lr * (m1[up] / c1) / (std::sqrt(m2[up] / c2) + eps);
      if (p < F) model.weights_[up] -= delta;
      else model.bias_ -= delta;
    }
  }

  std::vector<double> scores;
  std::vector<int> labels;
  for (auto i : hold) {
    scores.push_back(sigmoid(model.logit(feats[i])));
    labels.push_back(pairs[i].label);
  }
  bool h0 = false, h1 = false;
  for (int l : labels) (l == 1 ? h1 : h0) = true;
  if (!h0 || !h1) throw DataError("train_mp_model: holdout split contains a single label");
  model.holdout_auc_ = auc(scores, labels);
  return model;
}

std::vector<MpPair> make_mp_pairs(const Lexicon& lex, int count, std::uint64_t seed, int min_words, int max_words) {
  if (count < 1) throw ArgumentError("make_mp_pairs: count must be >= 1");
  const auto content = lex.content_words();
  const auto function = lex.function_words();
  std::vector<MpPair> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int n = 0; n < count; ++n) {
    Rng rng(mix64(seed, static_cast<std::uint64_t>(n)));
    const std::string ref = sample_transcript(lex, rng, min_words, max_words);
    auto words = normalize_text(ref);
    const int edits = rng.range(1, 2);
    for (int e = 0; e < edits; ++e) {
      const int kind = static_cast<int>(rng.below(8));
      const std::size_t pos = words.empty() ? 0 : rng.below(words.size());
      switch (kind) {
        case 0:  // untouched
          break;
        case 1: {  // synonym swap
          if (words.empty()) break;
          const int idx = lex.index_of(words[pos]);
          if (idx < 0) break;
          const auto syn = lex.synonyms_of(idx);
          if (!syn.empty()) words[pos] = lex.words[static_cast<std::size_t>(syn[rng.below(syn.size())])];
          break;
        }
        case 2:  // insert a function word
          if (!function.empty())
            words.insert(words.begin() + static_cast<std::ptrdiff_t>(rng.below(words.size() + 1)),
                         lex.words[static_cast<std::size_t>(function[rng.below(function.size())])]);
          break;
        case 3:  // delete any word
          if (words.size() > 1) words.erase(words.begin() + static_cast<std::ptrdiff_t>(pos));
          break;
        case 4:  // replace with a random content word
          if (!words.empty()) words[pos] = lex.words[static_cast<std::size_t>(content[rng.below(content.size())])];
          break;
        case 5:  // swap neighbours
          if (words.size() > 1) {
            const std::size_t p = rng.below(words.size() - 1);
            std::swap(words[p], words[p + 1]);
          }
          break;
        case 6:  // out-of-lexicon word
          if (!words.empty()) words[pos] = words[pos] + "x";
          break;
        case 7:  // insert a content word
          words.insert(words.begin() + static_cast<std::ptrdiff_t>(rng.below(words.size() + 1)),
                       lex.words[static_cast<std::size_t>(content[rng.below(content.size())])]);
          break;
      }
    }
    std::string hyp;
    for (const auto& w : words) hyp += (hyp.empty() ? "" : " ") + w;
    out.push_back({ref, hyp, mp_oracle(lex, ref, hyp)});
  }
  return out;
}

void write_mp_pairs(const std::filesystem::path& path, std::span<const MpPair> pairs) {
  std::string text;
  for (const auto& p : pairs) {
    nlohmann::ordered_json j;
    j["ref"] = p.ref;
    j["hyp"] = p.hyp;
    j["label"] = p.label;
    text += j.dump() + "\n";
  }
  write_text_file(path.string(), text);
}

std::vector<MpPair> read_mp_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<MpPair> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      MpPair p{j.at("ref").get<std::string>(), j.at("hyp").get<std::string>(), j.at("label").get<int>()};
      if (p.label != 0 && p.label != 1) throw DataError("MP label must be 0 or 1");
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed MP pair line: ") + e.what());
    }
  }
  return out;
}

}  // namespace speechrl
