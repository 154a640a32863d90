#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

#include "speechrl/synth_data.hpp"

using namespace speechrl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("speechrl_synth_" + name);
  fs::remove_all(p);
  return p;
}

double mean_frame_distance(const EmbeddingSequence& a, const EmbeddingSequence& clean) {
  // Frames are compared position by position over the shorter length.
  const int n = std::min(a.frames, clean.frames);
  double total = 0;
  for (int i = 0; i < n; ++i) {
    const auto x = a.frame(i), y = clean.frame(i);
    for (std::size_t j = 0; j < x.size(); ++j) total += (x[j] - y[j]) * (x[j] - y[j]);
  }
  return total / n;
}

}  // namespace

TEST_CASE("build_lexicon: sizes, frame lengths and classes") {
  const Lexicon lex = build_lexicon(7, 50, 10, 16, {2, 4});
  CHECK(lex.size() == 50);
  CHECK(lex.dim == 16);
  for (int w = 0; w < lex.size(); ++w) {
    CHECK(lex.frames_of(w) >= 2);
    CHECK(lex.frames_of(w) <= 4);
  }
  std::set<int> classes;
  for (int w : lex.content_words()) classes.insert(lex.synonym_class[w]);
  CHECK(classes.size() == 10);
  CHECK(lex.function_words().size() == 10);  // min(50 / 5, 50 - 10)
  for (int c : classes) CHECK(c >= 0);
}

TEST_CASE("build_lexicon is deterministic and seed dependent") {
  CHECK(build_lexicon(7, 50, 10, 16, {2, 4}) == build_lexicon(7, 50, 10, 16, {2, 4}));
  CHECK_FALSE(build_lexicon(7, 50, 10, 16, {2, 4}) == build_lexicon(8, 50, 10, 16, {2, 4}));
}

TEST_CASE("build_lexicon with one class per word") {
  // 50 words, 50 sets: no room for function words, every content word its own class.
  const Lexicon lex = build_lexicon(3, 50, 50, 8, {2, 3});
  CHECK(lex.function_words().empty());
  std::set<int> classes(lex.synonym_class.begin(), lex.synonym_class.end());
  CHECK(classes.size() == 50);
}

TEST_CASE("build_lexicon rejects invalid sizes") {
  CHECK_THROWS_AS(build_lexicon(1, 5, 6, 8, {2, 3}), ArgumentError);
  CHECK_THROWS_AS(build_lexicon(1, 5, 0, 8, {2, 3}), ArgumentError);
  CHECK_THROWS_AS(build_lexicon(1, 5, 2, 1, {2, 3}), ArgumentError);
}

TEST_CASE("lexicon save/load round trip") {
  const auto dir = scratch("lex");
  const Lexicon lex = build_lexicon(7, 30, 8, 8, {2, 4});
  save_lexicon(dir / "lexicon.json", lex);
  CHECK(load_lexicon(dir / "lexicon.json") == lex);
  fs::remove_all(dir);
}

TEST_CASE("gen_utterance without perturbation equals the clean rendering") {
  const Lexicon lex = build_lexicon(7, 30, 8, 8, {2, 4});
  const std::string tr = lex.words[3] + " " + lex.words[9] + " " + lex.words[3];
  DomainParams none{0.0, 0.0, 0.0, 0.0, Severity::kNone};
  const auto rec = gen_utterance(lex, tr, none, 99);
  CHECK(rec.embedding == render_clean(lex, tr));
  CHECK(rec.embedding.frames == 2 * lex.frames_of(3) + lex.frames_of(9));
  CHECK(rec.domain == Domain::kClean);
}

TEST_CASE("gen_utterance is deterministic in its seed") {
  const Lexicon lex = build_lexicon(7, 30, 8, 8, {2, 4});
  const std::string tr = lex.words[1] + " " + lex.words[2];
  const auto p = disordered_domain_params(Severity::kModerate);
  const auto a = gen_utterance(lex, tr, p, 5), b = gen_utterance(lex, tr, p, 5), c = gen_utterance(lex, tr, p, 6);
  CHECK(a.embedding == b.embedding);
  CHECK_FALSE(a.embedding == c.embedding);
  CHECK_THROWS_AS(gen_utterance(lex, "nosuchword", p, 1), LexiconError);
}

TEST_CASE("at least one frame always survives") {
  const Lexicon lex = build_lexicon(7, 30, 8, 8, {2, 2});
  DomainParams drop_all{0.0, 0.0, 1.0, 0.0, Severity::kSevere};
  const auto rec = gen_utterance(lex, lex.words[4], drop_all, 1);
  CHECK(rec.embedding.frames == 1);
  CHECK(rec.embedding.data == std::vector<float>(lex.prototypes[4].begin(), lex.prototypes[4].begin() + 8));
}

TEST_CASE("severe renderings sit farther from the clean rendering than clean-domain ones") {
  const Lexicon lex = build_lexicon(7, 50, 20, 16, {2, 4});
  Rng rng(1);
  const Severity levels[] = {Severity::kNone, Severity::kMild, Severity::kModerate, Severity::kSevere};
  std::vector<double> mean(4, 0.0);
  const int n = 200;
  for (int i = 0; i < n; ++i) {
    const auto tr = sample_transcript(lex, rng, 2, 5);
    const auto clean = render_clean(lex, tr);
    for (int s = 0; s < 4; ++s) {
      const auto p = s == 0 ? clean_domain_params() : disordered_domain_params(levels[s]);
      mean[s] += mean_frame_distance(gen_utterance(lex, tr, p, mix64(77, i)).embedding, clean) / n;
    }
  }
  for (int s = 0; s + 1 < 4; ++s) CHECK(mean[s] <= mean[s + 1]);
  CHECK(mean[3] > mean[0]);
}

TEST_CASE("severity presets grow component-wise") {
  const auto m = disordered_domain_params(Severity::kMild), o = disordered_domain_params(Severity::kModerate),
             s = disordered_domain_params(Severity::kSevere);
  CHECK(m.noise_std <= o.noise_std);
  CHECK(o.noise_std <= s.noise_std);
  CHECK(m.substitution_rate <= o.substitution_rate);
  CHECK(o.substitution_rate <= s.substitution_rate);
  CHECK(m.frame_drop_rate <= o.frame_drop_rate);
  CHECK(o.frame_drop_rate <= s.frame_drop_rate);
  CHECK_THROWS_AS(disordered_domain_params(Severity::kNone), ArgumentError);
}

TEST_CASE("embedding file round trip") {
  const auto dir = scratch("emb");
  EmbeddingSequence e{2, 3, {1, 2, 3, 4, 5, 6}};
  write_embedding(dir / "a.emb", e);
  CHECK(read_embedding(dir / "a.emb") == e);
  write_text_file((dir / "bad.emb").string(), "XXXX");
  CHECK_THROWS_AS(read_embedding(dir / "bad.emb"), DataError);
  fs::remove_all(dir);
}

TEST_CASE("gen_corpus: counts, split hygiene and byte-identical regeneration") {
  const Lexicon lex = build_lexicon(7, 50, 20, 8, {2, 3});
  CorpusSpec spec;
  spec.clean = {100, 20, 20};
  spec.disordered = {60, 20, 20};
  spec.clean_speakers = 10;
  spec.disordered_speakers = {8, 1, 1};
  spec.disordered_phrases = {30, 10, 10};
  spec.text_corpus_sentences = 50;
  const auto a = scratch("corpus_a"), b = scratch("corpus_b");
  const auto files = gen_corpus(lex, spec, a);
  gen_corpus(lex, spec, b);

  std::map<std::string, std::vector<ManifestRow>> rows;
  for (const auto& [key, path] : files.manifests) {
    rows[key] = read_manifest(path);
    CHECK(read_text_file(path.string()) == read_text_file((b / "manifests" / path.filename()).string()));
  }
  CHECK(rows["clean_train"].size() == 100);
  CHECK(rows["clean_dev"].size() == 20);
  CHECK(rows["disordered_train"].size() == 60);

  std::set<std::string> train_speakers, train_phrases;
  for (const auto& r : rows["disordered_train"]) {
    train_speakers.insert(r.speaker_id);
    train_phrases.insert(r.transcript);
    CHECK(r.severity != Severity::kNone);
  }
  for (const char* split : {"disordered_dev", "disordered_test"})
    for (const auto& r : rows[split]) {
      CHECK(train_speakers.count(r.speaker_id) == 0);
      CHECK(train_phrases.count(r.transcript) == 0);
    }
  for (const auto& r : rows["clean_dev"]) {
    const auto emb = load_row_embedding(files.manifests[1].second, r);
    CHECK(emb.dim == 8);
    CHECK(r.severity == Severity::kNone);
  }
  CHECK(read_text_file(files.text_corpus.string()) == read_text_file((b / "text_corpus.txt").string()));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("manifest line round trip") {
  ManifestRow r{"u1", "emb/u1.emb", "a b", Domain::kDisordered, Severity::kSevere, "spk3"};
  const auto back = parse_manifest_line(manifest_line(r));
  CHECK(back.utt_id == r.utt_id);
  CHECK(back.embedding_path == r.embedding_path);
  CHECK(back.transcript == r.transcript);
  CHECK(back.domain == r.domain);
  CHECK(back.severity == r.severity);
  CHECK(back.speaker_id == r.speaker_id);
  CHECK_THROWS_AS(parse_manifest_line("{not json"), DataError);
}
