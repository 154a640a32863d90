#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "speechrl/synth_data.hpp"

namespace speechrl {

// Lowercase, drop punctuation characters, split on whitespace.
std::vector<std::string> normalize_text(std::string_view s);

struct WerBreakdown {
  int substitutions = 0;
  int insertions = 0;
  int deletions = 0;
  int ref_len = 0;

  int edits() const { return substitutions + insertions + deletions; }
  double wer() const { return static_cast<double>(edits()) / ref_len; }
  bool operator==(const WerBreakdown&) const = default;
};

// Word-level Levenshtein alignment with unit costs. The backtrace prefers the
// diagonal (match/substitution), then deletion, then insertion.
WerBreakdown wer_words(std::span<const std::string> ref, std::span<const std::string> hyp);
WerBreakdown wer(std::string_view ref, std::string_view hyp);

// 1 iff the synonym-class sequences of the content words agree. Words outside the
// lexicon are content words of a sentinel class that matches nothing in ref.
int mp_oracle(const Lexicon& lex, std::string_view ref, std::string_view hyp);

// Rank-based AUC (Mann-Whitney); tied scores across classes earn half credit.
double auc(std::span<const double> scores, std::span<const int> labels);

// Spearman rank correlation with midranks. Throws ArgumentError when either side
// is constant.
double spearman(std::span<const double> a, std::span<const double> b);

// ---------------------------------------------------------------------------
// Learned meaning-preservation scorer.

struct MpPair {
  std::string ref;
  std::string hyp;
  int label = 0;
};

struct MpTrainConfig {
  double lr = 0.05;
  int steps = 2000;
  std::uint64_t seed = 7;
  double holdout_fraction = 0.3;
};

class MPModel;
MPModel train_mp_model(const Lexicon& lex, std::span<const MpPair> pairs, const MpTrainConfig& cfg);

class MPModel {
 public:
  static constexpr int kNumFeatures = 8;
  using Features = std::array<double, kNumFeatures>;

  MPModel() = default;
  explicit MPModel(const Lexicon& lex);

  // Bag-of-synonym-class features of a (ref, hyp) pair; word order is not seen.
  Features features(std::string_view ref, std::string_view hyp) const;
  double score(std::string_view ref, std::string_view hyp) const;
  std::vector<double> score_batch(std::span<const MpPair> pairs) const;

  double holdout_auc() const { return holdout_auc_; }
  std::uint64_t fingerprint() const;

  std::string to_json() const;
  static MPModel from_json(std::string_view text);

 private:
  friend MPModel train_mp_model(const Lexicon& lex, std::span<const MpPair> pairs, const MpTrainConfig& cfg);

  double logit(const Features& f) const;

  std::unordered_map<std::string, int> class_of_;  // function words map to -1
  std::array<double, kNumFeatures> mean_{};
  std::array<double, kNumFeatures> scale_{};
  std::array<double, kNumFeatures> weights_{};
  double bias_ = 0.0;
  double holdout_auc_ = 0.0;
};

// Seeded shuffle into train/holdout, logistic regression trained with full-batch
// Adam on binary cross-entropy. Throws DataError if only one label is present.
MPModel train_mp_model(const Lexicon& lex, std::span<const MpPair> pairs, const MpTrainConfig& cfg);

// Synthetic labelled pairs: references sampled from the lexicon and hypotheses
// produced by meaning-preserving or meaning-breaking edits; labels come from mp_oracle.
std::vector<MpPair> make_mp_pairs(const Lexicon& lex, int count, std::uint64_t seed, int min_words = 2,
                                  int max_words = 5);

void write_mp_pairs(const std::filesystem::path& path, std::span<const MpPair> pairs);
std::vector<MpPair> read_mp_pairs(const std::filesystem::path& path);

// The MP term of the reward: maps (hyp, ref) to a score in [0, 1].
using MpScoreFn = std::function<double(std::string_view ref, std::string_view hyp)>;

}  // namespace speechrl
