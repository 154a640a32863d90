#include "speechrl/token_bridge.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <json.hpp>

namespace speechrl {

std::uint64_t VocabMap::fingerprint() const {
  return Fnv1a()
      .update("vocab-map")
      .update_u64(static_cast<std::uint64_t>(v))
      .update_u64(static_cast<std::uint64_t>(k))
      .update_span(std::span<const int>(freq_rank))
      .digest();
}

VocabMap build_vocab_map(int v, int k, std::span<const std::uint64_t> token_freqs) {
  if (k < 1 || v <= k + kNumReserved) throw ArgumentError("build_vocab_map: need V > K + 4 and K >= 1");
  if (token_freqs.size() != static_cast<std::size_t>(v)) throw ArgumentError("build_vocab_map: frequency table must have length V");

  std::vector<int> order(static_cast<std::size_t>(v - kNumReserved));
  std::iota(order.begin(), order.end(), kNumReserved);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return token_freqs[static_cast<std::size_t>(a)] > token_freqs[static_cast<std::size_t>(b)];
  });

  VocabMap map;
  map.v = v;
  map.k = k;
  map.freq_rank.resize(static_cast<std::size_t>(v));
  for (int r = 0; r < kNumReserved; ++r) map.freq_rank[static_cast<std::size_t>(r)] = r;
  for (std::size_t i = 0; i < order.size(); ++i)
    map.freq_rank[static_cast<std::size_t>(order[i])] = kNumReserved + static_cast<int>(i);
  return map;
}

std::optional<int> map_token(const VocabMap& map, int id, MapDirection dir) {
  if (dir == MapDirection::kAudioToVocab) {
    if (id < 0 || id >= map.k) throw ArgumentError("map_token: audio id out of range");
    return map.audio_begin() + id;
  }
  if (id < 0 || id >= map.v) throw ArgumentError("map_token: vocabulary id out of range");
  if (!map.is_audio(id)) return std::nullopt;
  return id - map.audio_begin();
}

std::vector<int> EncodedExample::prompt() const {
  auto it = std::find(tokens.begin(), tokens.end(), kSep);
  if (it == tokens.end()) throw EncodingError("encoded example has no SEP");
  return {tokens.begin(), it + 1};
}

std::vector<int> EncodedExample::transcript_ids() const {
  auto it = std::find(tokens.begin(), tokens.end(), kSep);
  if (it == tokens.end()) throw EncodingError("encoded example has no SEP");
  auto end = tokens.end();
  if (end != it + 1 && *(end - 1) == kEos) --end;
  return {it + 1, end};
}

EncodedExample encode_example(const VocabMap& map, std::span<const int> audio_ids, std::span<const int> transcript_ids) {
  EncodedExample ex;
  ex.tokens.reserve(audio_ids.size() + transcript_ids.size() + 3);
  ex.tokens.push_back(kBos);
  for (int a : audio_ids) ex.tokens.push_back(*map_token(map, a, MapDirection::kAudioToVocab));
  ex.tokens.push_back(kSep);
  const std::size_t sep_pos = ex.tokens.size() - 1;
  for (int t : transcript_ids) {
    if (t < 0 || t >= map.v || map.is_audio(t)) throw EncodingError("transcript id " + std::to_string(t) + " lies outside the text range");
    ex.tokens.push_back(t);
  }
  ex.tokens.push_back(kEos);
  ex.loss_mask.assign(ex.tokens.size() - 1, 0);
  for (std::size_t i = sep_pos; i < ex.loss_mask.size(); ++i) ex.loss_mask[i] = 1;
  return ex;
}

TextTokenizer::TextTokenizer(std::vector<std::string> words, VocabMap map)
    : words_(std::move(words)), map_(std::move(map)) {
  if (kNumReserved + static_cast<int>(words_.size()) > map_.audio_begin())
    throw ArgumentError("TextTokenizer: lexicon does not fit below the audio range");
  raw_of_vocab_.assign(static_cast<std::size_t>(map_.v), -1);
  for (int raw = 0; raw < map_.v; ++raw) raw_of_vocab_[static_cast<std::size_t>(map_.freq_rank[static_cast<std::size_t>(raw)])] = raw;
  for (std::size_t i = 0; i < words_.size(); ++i) raw_index_.emplace(words_[i], kNumReserved + static_cast<int>(i));
  for (std::size_t i = 0; i < words_.size(); ++i)
    if (map_.is_audio(map_.vocab_of_raw(kNumReserved + static_cast<int>(i))))
      throw ArgumentError("TextTokenizer: word '" + words_[i] + "' was ranked into the audio range");
}

int TextTokenizer::raw_id(std::string_view word) const {
  auto it = raw_index_.find(std::string(word));
  return it == raw_index_.end() ? -1 : it->second;
}

std::vector<int> TextTokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) {
      const std::string_view w = text.substr(i, j - i);
      const int raw = raw_id(w);
      if (raw < 0) throw EncodingError("word not in tokenizer vocabulary: " + std::string(w));
      out.push_back(map_.vocab_of_raw(raw));
    }
    i = j;
  }
  return out;
}

std::string TextTokenizer::token_string(int vocab_id) const {
  if (vocab_id < 0 || vocab_id >= map_.v) throw ArgumentError("token id out of range");
  const int raw = raw_of_vocab_[static_cast<std::size_t>(vocab_id)];
  if (raw < kNumReserved) {
    static const char* names[kNumReserved] = {"<bos>", "<eos>", "<pad>", "<sep>"};
    return names[raw];
  }
  if (map_.is_audio(vocab_id)) return "<audio" + std::to_string(vocab_id - map_.audio_begin()) + ">";
  const int w = raw - kNumReserved;
  if (w < static_cast<int>(words_.size())) return words_[static_cast<std::size_t>(w)];
  return "<unused" + std::to_string(raw) + ">";
}

std::string TextTokenizer::decode(std::span<const int> vocab_ids) const {
  std::string out;
  for (int id : vocab_ids) {
    if (id == kEos) break;
    if (id < kNumReserved) continue;
    if (!out.empty()) out += ' ';
    out += token_string(id);
  }
  return out;
}

std::vector<std::uint64_t> count_raw_frequencies(int v, const std::vector<std::string>& words, std::string_view corpus) {
  std::unordered_map<std::string, int> index;
  for (std::size_t i = 0; i < words.size(); ++i) index.emplace(words[i], kNumReserved + static_cast<int>(i));
  std::vector<std::uint64_t> freqs(static_cast<std::size_t>(v), 0);
  std::size_t i = 0;
  while (i < corpus.size()) {
    while (i < corpus.size() && std::isspace(static_cast<unsigned char>(corpus[i]))) ++i;
    std::size_t j = i;
    while (j < corpus.size() && !std::isspace(static_cast<unsigned char>(corpus[j]))) ++j;
    if (j > i) {
      auto it = index.find(std::string(corpus.substr(i, j - i)));
      if (it == index.end()) throw EncodingError("corpus word not in lexicon: " + std::string(corpus.substr(i, j - i)));
      if (it->second < v) freqs[static_cast<std::size_t>(it->second)]++;
    }
    i = j;
  }
  return freqs;
}

std::string vocab_map_to_json(const VocabMap& map) {
  nlohmann::ordered_json j;
  j["V"] = map.v;
  j["K"] = map.k;
  j["freq_rank"] = map.freq_rank;
  j["reserved"] = {{"BOS", kBos}, {"EOS", kEos}, {"PAD", kPad}, {"SEP", kSep}};
  return j.dump();
}

VocabMap vocab_map_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    VocabMap m;
    m.v = j.at("V").get<int>();
    m.k = j.at("K").get<int>();
    m.freq_rank = j.at("freq_rank").get<std::vector<int>>();
    if (static_cast<int>(m.freq_rank.size()) != m.v) throw DataError("vocab map: freq_rank length mismatch");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed vocab map: ") + e.what());
  }
}

}  // namespace speechrl
