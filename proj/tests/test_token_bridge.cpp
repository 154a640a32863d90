#include <doctest.h>

#include "speechrl/token_bridge.hpp"

using namespace speechrl;

namespace {

VocabMap flat_map(int v, int k) {
  std::vector<std::uint64_t> freqs(static_cast<std::size_t>(v), 0);
  return build_vocab_map(v, k, freqs);
}

}  // namespace

TEST_CASE("audio ids land on the top K slots") {
  const auto m = flat_map(32, 4);
  CHECK(map_token(m, 0, MapDirection::kAudioToVocab) == 28);
  CHECK(map_token(m, 3, MapDirection::kAudioToVocab) == 31);
  CHECK(map_token(m, 2, MapDirection::kAudioToVocab) == 30);
  CHECK(map_token(m, 30, MapDirection::kVocabToAudio) == 2);
  CHECK_FALSE(map_token(m, 5, MapDirection::kVocabToAudio).has_value());
  CHECK_THROWS_AS(map_token(m, 4, MapDirection::kAudioToVocab), ArgumentError);
  CHECK_THROWS_AS(map_token(m, 32, MapDirection::kVocabToAudio), ArgumentError);
}

TEST_CASE("large vocabulary: first audio slot") {
  const auto m = flat_map(256000, 1024);
  CHECK(m.audio_begin() == 254976);
  CHECK(map_token(m, 0, MapDirection::kAudioToVocab) == 254976);
  CHECK(map_token(m, 1023, MapDirection::kAudioToVocab) == 255999);
}

TEST_CASE("round trip over every audio id") {
  for (int k : {1, 3, 16}) {
    const auto m = flat_map(40, k);
    for (int a = 0; a < k; ++a) {
      const int v = *map_token(m, a, MapDirection::kAudioToVocab);
      CHECK(m.is_audio(v));
      CHECK(map_token(m, v, MapDirection::kVocabToAudio) == a);
    }
    for (int v = 0; v < m.audio_begin(); ++v) CHECK_FALSE(map_token(m, v, MapDirection::kVocabToAudio).has_value());
  }
}

TEST_CASE("reindexing sorts by frequency, ties to the lower raw id, reserved ids fixed") {
  //                                   reserved     4  5  6  7  8  9
  const std::vector<std::uint64_t> f{0, 0, 0, 0, 3, 9, 3, 0, 1, 9};
  const auto m = build_vocab_map(10, 1, f);
  CHECK(m.freq_rank == std::vector<int>{0, 1, 2, 3, 6, 4, 7, 9, 8, 5});
  // The least frequent raw id (7) ends up on the audio slot.
  CHECK(m.is_audio(m.vocab_of_raw(7)));
}

TEST_CASE("build_vocab_map argument checks") {
  std::vector<std::uint64_t> f(8, 0);
  CHECK_THROWS_AS(build_vocab_map(8, 4, f), ArgumentError);
  CHECK_THROWS_AS(build_vocab_map(8, 0, f), ArgumentError);
  CHECK_THROWS_AS(build_vocab_map(9, 2, f), ArgumentError);
}

TEST_CASE("encode_example layout and loss mask") {
  const auto m = flat_map(32, 4);
  const std::vector<int> audio{1, 3}, text{7, 9};
  const auto ex = encode_example(m, audio, text);
  CHECK(ex.tokens == std::vector<int>{kBos, 29, 31, kSep, 7, 9, kEos});
  CHECK(ex.loss_mask == std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1});
  CHECK(ex.prompt() == std::vector<int>{kBos, 29, 31, kSep});
  CHECK(ex.transcript_ids() == text);
}

TEST_CASE("empty transcript still predicts EOS") {
  const auto m = flat_map(32, 4);
  const std::vector<int> audio{0};
  const auto ex = encode_example(m, audio, {});
  CHECK(ex.tokens == std::vector<int>{kBos, 28, kSep, kEos});
  CHECK(ex.loss_mask == std::vector<std::uint8_t>{0, 0, 1});
  CHECK(ex.transcript_ids().empty());
}

TEST_CASE("transcript ids inside the audio range are rejected") {
  const auto m = flat_map(32, 4);
  const std::vector<int> audio{0}, bad{28};
  CHECK_THROWS_AS(encode_example(m, audio, bad), EncodingError);
  EncodedExample no_sep{{kBos, 5}, {0}};
  CHECK_THROWS_AS(no_sep.prompt(), EncodingError);
}

TEST_CASE("text tokenizer encode/decode round trip") {
  const std::vector<std::string> words{"red", "blue", "green"};
  const auto f = count_raw_frequencies(16, words, "blue blue green\nblue red\n");
  CHECK(f[5] == 3);
  CHECK(f[4] == 1);
  const TextTokenizer tok(words, build_vocab_map(16, 4, f));
  const auto ids = tok.encode("red  green blue");
  CHECK(ids.size() == 3);
  CHECK(tok.decode(ids) == "red green blue");
  CHECK(ids[2] == kNumReserved);  // most frequent word takes the first free slot
  CHECK_THROWS_AS(tok.encode("purple"), EncodingError);
  CHECK_THROWS_AS(count_raw_frequencies(16, words, "purple"), EncodingError);
}

TEST_CASE("vocab map json round trip") {
  std::vector<std::uint64_t> f{0, 0, 0, 0, 5, 1, 7, 2};
  const auto m = build_vocab_map(8, 2, f);
  CHECK(vocab_map_from_json(vocab_map_to_json(m)) == m);
  CHECK(vocab_map_from_json(vocab_map_to_json(m)).fingerprint() == m.fingerprint());
  CHECK_THROWS_AS(vocab_map_from_json("{\"v\": 3}"), DataError);
}
