#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "speechrl/common.hpp"

namespace speechrl {

enum class Severity { kNone = 0, kMild = 1, kModerate = 2, kSevere = 3 };
enum class Domain { kClean = 0, kDisordered = 1 };

std::string_view to_string(Severity s);
std::string_view to_string(Domain d);
Severity parse_severity(std::string_view s);
Domain parse_domain(std::string_view s);

// frames x dim matrix of floats, row-major. Stand-in for speech-encoder output.
struct EmbeddingSequence {
  int dim = 0;
  int frames = 0;
  std::vector<float> data;

  std::span<const float> frame(int i) const {
    return {data.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
  }
  bool operator==(const EmbeddingSequence&) const = default;
};

// EMB1 container: magic, dim (u32), frame count (u32), row-major f32 frames.
void write_embedding(const std::filesystem::path& path, const EmbeddingSequence& emb);
EmbeddingSequence read_embedding(const std::filesystem::path& path);

struct Lexicon {
  static constexpr int kFunctionClass = -1;

  int dim = 0;
  int num_synonym_sets = 0;
  std::vector<std::string> words;
  // prototypes[w] holds frames_of(w) * dim floats.
  std::vector<std::vector<float>> prototypes;
  // Synonym-set id per word, or kFunctionClass for function words.
  std::vector<int> synonym_class;

  int size() const { return static_cast<int>(words.size()); }
  int frames_of(int w) const { return static_cast<int>(prototypes[static_cast<std::size_t>(w)].size()) / dim; }
  bool is_function_word(int w) const { return synonym_class[static_cast<std::size_t>(w)] == kFunctionClass; }
  // -1 when the word is not in the lexicon.
  int index_of(std::string_view word) const;
  std::vector<int> content_words() const;
  std::vector<int> function_words() const;
  std::vector<int> synonyms_of(int w) const;
  std::uint64_t fingerprint() const;

  bool operator==(const Lexicon& o) const {
    return dim == o.dim && num_synonym_sets == o.num_synonym_sets && words == o.words &&
           prototypes == o.prototypes && synonym_class == o.synonym_class;
  }

  void rebuild_index();

 private:
  std::unordered_map<std::string, int> index_;
};

// Deterministic in all arguments. Function-word count is
// min(num_words / 5, num_words - num_synonym_sets); the remaining content words are
// dealt round-robin (after a seeded shuffle) into num_synonym_sets nonempty classes.
Lexicon build_lexicon(std::uint64_t seed, int num_words, int num_synonym_sets, int dim,
                      std::pair<int, int> frames_per_word_range);

void save_lexicon(const std::filesystem::path& path, const Lexicon& lex);
Lexicon load_lexicon(const std::filesystem::path& path);

struct DomainParams {
  double noise_std = 0.0;
  double substitution_rate = 0.0;
  double frame_drop_rate = 0.0;
  double frame_dup_rate = 0.0;
  Severity severity = Severity::kNone;

  void validate() const;
};

// Presets: the clean domain and the three disordered severities. Perturbation
// parameters grow component-wise with severity.
DomainParams clean_domain_params();
DomainParams disordered_domain_params(Severity s);

struct UtteranceRecord {
  std::string utt_id;
  EmbeddingSequence embedding;
  std::string transcript;
  Domain domain = Domain::kClean;
  Severity severity = Severity::kNone;
  std::string speaker_id;
};

// Concatenated clean prototypes for the transcript (no perturbation).
EmbeddingSequence render_clean(const Lexicon& lex, std::string_view transcript);

// Renders prototype frames, then in order: substitution, drop, duplication, noise.
UtteranceRecord gen_utterance(const Lexicon& lex, std::string_view transcript, const DomainParams& params,
                              std::uint64_t seed);

// Random phrase: length uniform in [min_len, max_len]; each slot is a function word
// with probability 0.25, otherwise a content word; both drawn Zipf(1) over lexicon order.
std::string sample_transcript(const Lexicon& lex, Rng& rng, int min_len, int max_len);

struct SplitCounts {
  int train = 0;
  int dev = 0;
  int test = 0;
};

struct CorpusSpec {
  std::uint64_t seed = 1;
  SplitCounts clean{2000, 200, 200};
  SplitCounts disordered{1000, 300, 300};
  int clean_speakers = 40;
  // Disordered speakers are split train/dev/test; dev and test speakers are held out.
  SplitCounts disordered_speakers{30, 8, 8};
  // Disordered phrase pool sizes per split; phrases are disjoint across splits.
  SplitCounts disordered_phrases{1000, 150, 150};
  // Relative weights of mild, moderate, severe among disordered speakers.
  std::vector<double> severity_mix{0.4, 0.35, 0.25};
  int min_words = 2;
  int max_words = 5;
  int text_corpus_sentences = 4000;
};

struct ManifestRow {
  std::string utt_id;
  std::string embedding_path;  // relative to the manifest's directory
  std::string transcript;
  Domain domain = Domain::kClean;
  Severity severity = Severity::kNone;
  std::string speaker_id;
};

std::string manifest_line(const ManifestRow& row);
ManifestRow parse_manifest_line(std::string_view line);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);
EmbeddingSequence load_row_embedding(const std::filesystem::path& manifest_path, const ManifestRow& row);

struct CorpusFiles {
  // Keys: "clean_train", "clean_dev", ..., "disordered_test".
  std::vector<std::pair<std::string, std::filesystem::path>> manifests;
  std::filesystem::path text_corpus;
};

// Writes <out>/manifests/<domain>_<split>.jsonl, <out>/emb/<utt_id>.emb and
// <out>/text_corpus.txt. Output is byte-identical for identical inputs.
CorpusFiles gen_corpus(const Lexicon& lex, const CorpusSpec& spec, const std::filesystem::path& out_dir);

}  // namespace speechrl
