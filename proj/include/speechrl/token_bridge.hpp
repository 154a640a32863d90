#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "speechrl/common.hpp"

namespace speechrl {

// Reserved ids are pinned to the bottom of the vocabulary, below any audio slot.
inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kPad = 2;
inline constexpr int kSep = 3;
inline constexpr int kNumReserved = 4;

enum class MapDirection { kAudioToVocab, kVocabToAudio };

// Vocabulary reindexed by descending text frequency; the K least frequent slots
// [V-K, V) carry audio-token ids 0..K-1.
struct VocabMap {
  int v = 0;
  int k = 0;
  // freq_rank[raw_id] = vocabulary index after reindexing.
  std::vector<int> freq_rank;

  int audio_begin() const { return v - k; }
  bool is_audio(int vocab_id) const { return vocab_id >= audio_begin() && vocab_id < v; }
  int vocab_of_raw(int raw_id) const { return freq_rank.at(static_cast<std::size_t>(raw_id)); }
  std::uint64_t fingerprint() const;

  bool operator==(const VocabMap&) const = default;
};

// token_freqs is indexed by raw id and must have length V. Ties in frequency
// rank the lower raw id as more frequent.
VocabMap build_vocab_map(int v, int k, std::span<const std::uint64_t> token_freqs);

std::optional<int> map_token(const VocabMap& map, int id, MapDirection dir);

// tokens = [BOS, audio..., SEP, transcript..., EOS]. loss_mask[i] selects the
// prediction of tokens[i + 1] from position i, so it has tokens.size() - 1 entries.
struct EncodedExample {
  std::vector<int> tokens;
  std::vector<std::uint8_t> loss_mask;

  // Prompt = tokens up to and including SEP.
  std::vector<int> prompt() const;
  // Transcript ids (between SEP and EOS).
  std::vector<int> transcript_ids() const;
  bool operator==(const EncodedExample&) const = default;
};

EncodedExample encode_example(const VocabMap& map, std::span<const int> audio_ids, std::span<const int> transcript_ids);

// Word-level text tokenizer. Raw ids: reserved 0..3, lexicon words 4..4+W-1, then
// unused filler slots up to V. Encoded ids are post-reindexing vocabulary indices.
class TextTokenizer {
 public:
  TextTokenizer(std::vector<std::string> words, VocabMap map);

  const VocabMap& vocab() const { return map_; }
  int raw_id(std::string_view word) const;
  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> vocab_ids) const;
  std::string token_string(int vocab_id) const;

 private:
  std::vector<std::string> words_;
  VocabMap map_;
  std::vector<int> raw_of_vocab_;
  std::unordered_map<std::string, int> raw_index_;
};

// Raw-id frequency table of a whitespace-tokenized corpus over the lexicon words.
std::vector<std::uint64_t> count_raw_frequencies(int v, const std::vector<std::string>& words, std::string_view corpus);

std::string vocab_map_to_json(const VocabMap& map);
VocabMap vocab_map_from_json(std::string_view text);

}  // namespace speechrl
