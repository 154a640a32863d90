#include <doctest.h>

#include <cmath>
#include <map>

#include "oracles.hpp"
#include "speechrl/metrics.hpp"

using namespace speechrl;

namespace {

const std::vector<std::string> kAlphabet{"a", "b", "c"};

struct Synonyms {
  int a = -1, b = -1;  // two content words of one class
  int other = -1;      // a content word of another class
  int fn = -1;         // a function word
};

Synonyms find_synonyms(const Lexicon& lex) {
  Synonyms s;
  std::map<int, std::vector<int>> by_class;
  for (int w : lex.content_words()) by_class[lex.synonym_class[w]].push_back(w);
  for (const auto& [c, ws] : by_class)
    if (ws.size() >= 2 && s.a < 0) {
      s.a = ws[0];
      s.b = ws[1];
    }
  for (int w : lex.content_words())
    if (lex.synonym_class[w] != lex.synonym_class[s.a]) s.other = w;
  s.fn = lex.function_words().front();
  return s;
}

}  // namespace

TEST_CASE("normalisation") {
  CHECK(normalize_text("Not so good to day.") == std::vector<std::string>{"not", "so", "good", "to", "day"});
  CHECK(normalize_text("hello") == std::vector<std::string>{"hello"});
  CHECK(normalize_text("  ... ").empty());
  CHECK(normalize_text("that's  FUN!") == std::vector<std::string>{"thats", "fun"});
}

TEST_CASE("worked transcript examples") {
  CHECK(wer("not so good today", "not so good to the.").wer() == 0.5);
  CHECK(wer("not so good today", "not so good to day.").wer() == 0.5);
  CHECK(wer("every one of my family listens to music", "everybody in my family listens to music").wer() == 0.375);
  CHECK(wer("every one of my family listens to music", "every once in my frame and listen to music").wer() == 0.625);
  CHECK(wer("dancing is so much fun", "dancing so much fun.").wer() == 0.2);
  CHECK(wer("dancing is so much fun", "that's so much fun.").wer() == 0.4);
  CHECK(wer("are you comfortable?", "are you going to school?").wer() == 1.0);
  CHECK(wer("are you comfortable?", "are you comfortable with it?").wer() == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(wer("happy birthday dear friend.", "absolutely your friend.").wer() == 0.75);
  CHECK(wer("happy birthday dear friend.", "happy birthday to your friend.").wer() == 0.5);
  CHECK(wer("as soon as possible", "a soon as possible.").wer() == 0.25);
  CHECK(wer("same words", "Same words!").wer() == 0.0);
}

TEST_CASE("breakdown and tie order") {
  CHECK(wer("a b c", "a x c") == WerBreakdown{1, 0, 0, 3});
  CHECK(wer("a b c", "a c") == WerBreakdown{0, 0, 1, 3});
  CHECK(wer("a b", "a b c d") == WerBreakdown{0, 2, 0, 2});
  CHECK(wer("a b", "") == WerBreakdown{0, 0, 2, 2});
  CHECK_THROWS_AS(wer("", "a"), ArgumentError);
  CHECK_THROWS_AS(wer(" ?! ", "a"), ArgumentError);
}

TEST_CASE("edit distance equals the brute-force recursion on every short pair") {
  const auto seqs = oracle::all_sequences(kAlphabet, 5);
  CHECK(seqs.size() == 364);
  long checked = 0;
  for (const auto& r : seqs) {
    if (r.empty()) continue;
    for (const auto& h : seqs) {
      const auto b = wer_words(r, h);
      if (b.edits() != oracle::edit_distance(r, h)) {
        FAIL_CHECK("mismatch");
        return;
      }
      CHECK_MESSAGE(b.ref_len == static_cast<int>(r.size()), "ref length");
      ++checked;
    }
  }
  CHECK(checked == 363L * 364L);
}

TEST_CASE("edit distance is a metric on short sequences") {
  const auto seqs = oracle::all_sequences(kAlphabet, 3);
  // Breakdowns count the alignment exactly.
  Rng rng(2);
  for (int trial = 0; trial < 3000; ++trial) {
    const auto& x = seqs[1 + rng.below(static_cast<int>(seqs.size()) - 1)];
    const auto& y = seqs[1 + rng.below(static_cast<int>(seqs.size()) - 1)];
    const auto& z = seqs[1 + rng.below(static_cast<int>(seqs.size()) - 1)];
    const int xy = wer_words(x, y).edits(), yz = wer_words(y, z).edits(), xz = wer_words(x, z).edits();
    CHECK(xz <= xy + yz);
    CHECK(xy == wer_words(y, x).edits());
    CHECK((xy == 0) == (x == y));
    const auto b = wer_words(x, y);
    CHECK(static_cast<int>(y.size()) == b.ref_len - b.deletions + b.insertions);
  }
}

TEST_CASE("meaning-preservation oracle") {
  const Lexicon lex = build_lexicon(7, 60, 12, 4, {2, 3});
  const auto s = find_synonyms(lex);
  REQUIRE(s.a >= 0);
  const auto& w = lex.words;
  const std::string ref = w[s.a] + " " + w[s.fn] + " " + w[s.other];
  CHECK(mp_oracle(lex, ref, ref) == 1);
  CHECK(mp_oracle(lex, ref, w[s.b] + " " + w[s.fn] + " " + w[s.other]) == 1);  // in-class synonym
  CHECK(mp_oracle(lex, ref, w[s.a] + " " + w[s.other]) == 1);                    // function word dropped
  CHECK(mp_oracle(lex, ref, w[s.a] + " " + w[s.fn]) == 0);                       // content word dropped
  CHECK(mp_oracle(lex, ref, w[s.other] + " " + w[s.fn] + " " + w[s.a]) == 0);    // order matters
  CHECK(mp_oracle(lex, ref, ref + " zzz") == 0);                                 // unknown word
  CHECK(mp_oracle(lex, ref, "") == 0);
}

TEST_CASE("oracle is invariant to synonym swaps on random sentences") {
  const Lexicon lex = build_lexicon(9, 60, 12, 4, {2, 3});
  Rng rng(4);
  std::map<int, std::vector<int>> by_class;
  for (int w : lex.content_words()) by_class[lex.synonym_class[w]].push_back(w);
  for (int trial = 0; trial < 300; ++trial) {
    const auto ref = sample_transcript(lex, rng, 1, 6);
    std::string hyp;
    for (const auto& word : normalize_text(ref)) {
      int id = 0;
      while (lex.words[id] != word) ++id;
      if (!lex.is_function_word(id)) {
        const auto& cls = by_class[lex.synonym_class[id]];
        id = cls[rng.below(static_cast<int>(cls.size()))];
      }
      hyp += (hyp.empty() ? "" : " ") + lex.words[id];
    }
    CHECK(mp_oracle(lex, ref, hyp) == 1);
  }
}

TEST_CASE("AUC by hand") {
  CHECK(auc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<int>{1, 1, 0, 0}) == 1.0);
  CHECK(auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{1, 1, 0, 0}) == 0.0);
  CHECK(auc(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}) == 0.5);
  CHECK(auc(std::vector<double>{0.9, 0.3, 0.5, 0.1}, std::vector<int>{1, 1, 0, 0}) == 0.75);
  CHECK_THROWS_AS(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), DataError);
}

TEST_CASE("spearman with midranks") {
  CHECK(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{10, 20, 30}) == doctest::Approx(1.0));
  CHECK(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman(std::vector<double>{1, 1, 2, 3}, std::vector<double>{1, 1, 2, 3}) == doctest::Approx(1.0));
  CHECK_THROWS_AS(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), ArgumentError);
}

TEST_CASE("learned scorer separates the labels and fails on shuffled labels") {
  const Lexicon lex = build_lexicon(1, 80, 16, 4, {2, 3});
  const auto pairs = make_mp_pairs(lex, 2000, 5);
  int pos = 0;
  for (const auto& p : pairs) {
    CHECK(p.label == mp_oracle(lex, p.ref, p.hyp));
    pos += p.label;
  }
  CHECK(pos > 400);
  CHECK(pos < 1600);
  MpTrainConfig cfg;
  const auto model = train_mp_model(lex, pairs, cfg);
  CHECK(model.holdout_auc() >= 0.95);

  auto shuffled = pairs;
  std::vector<int> labels;
  for (const auto& p : pairs) labels.push_back(p.label);
  Rng rng(77);
  rng.shuffle(labels);
  for (std::size_t i = 0; i < shuffled.size(); ++i) shuffled[i].label = labels[i];
  const double s_auc = train_mp_model(lex, shuffled, cfg).holdout_auc();
  CHECK(s_auc >= 0.4);
  CHECK(s_auc <= 0.6);

  // Same inputs, same model; batch scoring equals single scoring.
  const auto again = train_mp_model(lex, pairs, cfg);
  CHECK(again.fingerprint() == model.fingerprint());
  const std::vector<MpPair> few(pairs.begin(), pairs.begin() + 20);
  const auto batch = model.score_batch(few);
  for (std::size_t i = 0; i < few.size(); ++i) CHECK(batch[i] == model.score(few[i].ref, few[i].hyp));
  for (int i = 0; i < 20; ++i) CHECK(model.score(pairs[i].ref, pairs[i].ref) > 0.5);

  const auto back = MPModel::from_json(model.to_json());
  CHECK(back.fingerprint() == model.fingerprint());
  CHECK(back.score(pairs[3].ref, pairs[3].hyp) == model.score(pairs[3].ref, pairs[3].hyp));
}

TEST_CASE("scorer training needs both labels") {
  const Lexicon lex = build_lexicon(1, 40, 8, 4, {2, 3});
  std::vector<MpPair> same{{"x", "x", 1}, {"y", "y", 1}, {"z", "z", 1}};
  CHECK_THROWS_AS(train_mp_model(lex, same, MpTrainConfig{}), DataError);
}
