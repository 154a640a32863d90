#include "speechrl/synth_data.hpp"

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

namespace speechrl {

using json = nlohmann::ordered_json;

std::string_view to_string(Severity s) {
  switch (s) {
    case Severity::kNone: return "none";
    case Severity::kMild: return "mild";
    case Severity::kModerate: return "moderate";
    case Severity::kSevere: return "severe";
  }
  return "none";
}

std::string_view to_string(Domain d) { return d == Domain::kClean ? "clean" : "disordered"; }

Severity parse_severity(std::string_view s) {
  if (s == "none") return Severity::kNone;
  if (s == "mild") return Severity::kMild;
  if (s == "moderate") return Severity::kModerate;
  if (s == "severe") return Severity::kSevere;
  throw DataError("unknown severity: " + std::string(s));
}

Domain parse_domain(std::string_view s) {
  if (s == "clean") return Domain::kClean;
  if (s == "disordered") return Domain::kDisordered;
  throw DataError("unknown domain: " + std::string(s));
}

// ---------------------------------------------------------------------------
// Embedding files

void write_embedding(const std::filesystem::path& path, const EmbeddingSequence& emb) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("EMB1", 4);
  write_u32(out, static_cast<std::uint32_t>(emb.dim));
  write_u32(out, static_cast<std::uint32_t>(emb.frames));
  write_f32s(out, emb.data);
  if (!out) throw IoError("write failed: " + path.string());
}

EmbeddingSequence read_embedding(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "EMB1") throw DataError("bad embedding magic in " + path.string());
  EmbeddingSequence emb;
  emb.dim = static_cast<int>(read_u32(in));
  emb.frames = static_cast<int>(read_u32(in));
  if (emb.dim <= 0 || emb.frames <= 0) throw DataError("empty embedding in " + path.string());
  emb.data.resize(static_cast<std::size_t>(emb.dim) * emb.frames);
  read_f32s(in, emb.data);
  return emb;
}

// ---------------------------------------------------------------------------
// Lexicon

int Lexicon::index_of(std::string_view word) const {
  if (index_.size() != words.size()) const_cast<Lexicon*>(this)->rebuild_index();
  auto it = index_.find(std::string(word));
  return it == index_.end() ? -1 : it->second;
}

void Lexicon::rebuild_index() {
  index_.clear();
  for (int i = 0; i < size(); ++i) index_.emplace(words[static_cast<std::size_t>(i)], i);
}

std::vector<int> Lexicon::content_words() const {
  std::vector<int> out;
  for (int w = 0; w < size(); ++w)
    if (!is_function_word(w)) out.push_back(w);
  return out;
}

std::vector<int> Lexicon::function_words() const {
  std::vector<int> out;
  for (int w = 0; w < size(); ++w)
    if (is_function_word(w)) out.push_back(w);
  return out;
}

std::vector<int> Lexicon::synonyms_of(int w) const {
  std::vector<int> out;
  const int c = synonym_class[static_cast<std::size_t>(w)];
  if (c == kFunctionClass) return out;
  for (int v = 0; v < size(); ++v)
    if (v != w && synonym_class[static_cast<std::size_t>(v)] == c) out.push_back(v);
  return out;
}

std::uint64_t Lexicon::fingerprint() const {
  Fnv1a h;
  h.update_u64(static_cast<std::uint64_t>(dim)).update_u64(static_cast<std::uint64_t>(num_synonym_sets));
  for (std::size_t i = 0; i < words.size(); ++i) {
    h.update(words[i]);
    h.update_u64(static_cast<std::uint64_t>(static_cast<std::int64_t>(synonym_class[i])));
    h.update_span(std::span<const float>(prototypes[i]));
  }
  return h.digest();
}

namespace {

std::string make_pseudo_word(Rng& rng) {
  static constexpr std::string_view kOnsets = "bdfgklmnprstvz";
  static constexpr std::string_view kVowels = "aeiou";
  const int syllables = rng.range(1, 3);
  std::string w;
  for (int s = 0; s < syllables; ++s) {
    w += kOnsets[rng.below(kOnsets.size())];
    w += kVowels[rng.below(kVowels.size())];
  }
  if (rng.bernoulli(0.3)) w += kOnsets[rng.below(kOnsets.size())];
  return w;
}

std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace

Lexicon build_lexicon(std::uint64_t seed, int num_words, int num_synonym_sets, int dim,
                      std::pair<int, int> frames_per_word_range) {
  if (num_synonym_sets < 1 || num_words < num_synonym_sets)
    throw ArgumentError("build_lexicon: need num_words >= num_synonym_sets >= 1");
  if (dim < 2) throw ArgumentError("build_lexicon: dim must be >= 2");
  auto [fmin, fmax] = frames_per_word_range;
  if (fmin < 1 || fmax < fmin) throw ArgumentError("build_lexicon: bad frames_per_word_range");

  Rng rng(derive_seed(seed, "lexicon"));
  Lexicon lex;
  lex.dim = dim;
  lex.num_synonym_sets = num_synonym_sets;

  std::set<std::string> seen;
  while (static_cast<int>(lex.words.size()) < num_words) {
    std::string w = make_pseudo_word(rng);
    if (seen.insert(w).second) lex.words.push_back(std::move(w));
  }

  lex.prototypes.resize(static_cast<std::size_t>(num_words));
  for (auto& proto : lex.prototypes) {
    const int frames = rng.range(fmin, fmax);
    proto.resize(static_cast<std::size_t>(frames) * dim);
    for (float& v : proto) v = static_cast<float>(rng.normal());
  }

  const int num_function = std::min(num_words / 5, num_words - num_synonym_sets);
  std::vector<int> order(static_cast<std::size_t>(num_words));
  for (int i = 0; i < num_words; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  lex.synonym_class.assign(static_cast<std::size_t>(num_words), Lexicon::kFunctionClass);
  for (int i = num_function; i < num_words; ++i)
    lex.synonym_class[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = (i - num_function) % num_synonym_sets;
  lex.rebuild_index();
  return lex;
}

void save_lexicon(const std::filesystem::path& path, const Lexicon& lex) {
  json j;
  j["dim"] = lex.dim;
  j["num_synonym_sets"] = lex.num_synonym_sets;
  j["words"] = lex.words;
  j["synonym_class"] = lex.synonym_class;
  j["prototypes"] = lex.prototypes;
  write_text_file(path.string(), j.dump() + "\n");
}

Lexicon load_lexicon(const std::filesystem::path& path) {
  try {
    const json j = json::parse(read_text_file(path.string()));
    Lexicon lex;
    lex.dim = j.at("dim").get<int>();
    lex.num_synonym_sets = j.at("num_synonym_sets").get<int>();
    lex.words = j.at("words").get<std::vector<std::string>>();
    lex.synonym_class = j.at("synonym_class").get<std::vector<int>>();
    lex.prototypes = j.at("prototypes").get<std::vector<std::vector<float>>>();
    if (lex.words.size() != lex.synonym_class.size() || lex.words.size() != lex.prototypes.size())
      throw DataError("inconsistent lexicon file " + path.string());
    lex.rebuild_index();
    return lex;
  } catch (const json::exception& e) {
    throw DataError("malformed lexicon " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Domain parameters and rendering

void DomainParams::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!(noise_std >= 0.0)) throw ArgumentError("noise_std must be >= 0");
  if (!prob(substitution_rate) || !prob(frame_drop_rate) || !prob(frame_dup_rate))
    throw ArgumentError("perturbation rates must lie in [0,1]");
  if (severity == Severity::kNone && (substitution_rate != 0.0 || frame_drop_rate != 0.0 || frame_dup_rate != 0.0))
    throw ArgumentError("severity=none requires zero substitution/drop/dup rates");
}

DomainParams clean_domain_params() { return DomainParams{0.30, 0.0, 0.0, 0.0, Severity::kNone}; }

DomainParams disordered_domain_params(Severity s) {
  switch (s) {
    case Severity::kMild: return DomainParams{0.40, 0.10, 0.06, 0.06, Severity::kMild};
    case Severity::kModerate: return DomainParams{0.50, 0.18, 0.10, 0.10, Severity::kModerate};
    case Severity::kSevere: return DomainParams{0.60, 0.27, 0.15, 0.15, Severity::kSevere};
    case Severity::kNone: break;
  }
  throw ArgumentError("disordered speech needs a severity above none");
}

EmbeddingSequence render_clean(const Lexicon& lex, std::string_view transcript) {
  const auto words = split_words(transcript);
  if (words.empty()) throw ArgumentError("transcript is empty");
  EmbeddingSequence emb;
  emb.dim = lex.dim;
  for (const auto& w : words) {
    const int idx = lex.index_of(w);
    if (idx < 0) throw LexiconError("word not in lexicon: " + w);
    const auto& proto = lex.prototypes[static_cast<std::size_t>(idx)];
    emb.data.insert(emb.data.end(), proto.begin(), proto.end());
  }
  emb.frames = static_cast<int>(emb.data.size()) / lex.dim;
  return emb;
}

UtteranceRecord gen_utterance(const Lexicon& lex, std::string_view transcript, const DomainParams& params,
                              std::uint64_t seed) {
  params.validate();
  const EmbeddingSequence clean = render_clean(lex, transcript);
  const auto dim = static_cast<std::size_t>(lex.dim);
  Rng rng(mix64(seed));

  // Substitution draws from the pool of all prototype frames.
  std::vector<std::vector<float>> frames;
  frames.reserve(static_cast<std::size_t>(clean.frames));
  std::size_t pool = 0;
  for (int w = 0; w < lex.size(); ++w) pool += static_cast<std::size_t>(lex.frames_of(w));
  for (int i = 0; i < clean.frames; ++i) {
    auto f = clean.frame(i);
    if (params.substitution_rate > 0.0 && rng.bernoulli(params.substitution_rate)) {
      std::size_t pick = rng.below(pool);
      int w = 0;
      while (pick >= static_cast<std::size_t>(lex.frames_of(w))) pick -= static_cast<std::size_t>(lex.frames_of(w++));
      const float* src = lex.prototypes[static_cast<std::size_t>(w)].data() + pick * dim;
      frames.emplace_back(src, src + dim);
    } else {
      frames.emplace_back(f.begin(), f.end());
    }
  }

  std::vector<std::vector<float>> kept;
  for (auto& f : frames)
    if (!(params.frame_drop_rate > 0.0 && rng.bernoulli(params.frame_drop_rate))) kept.push_back(f);
  if (kept.empty()) kept.push_back(frames.front());

  std::vector<std::vector<float>> duped;
  for (auto& f : kept) {
    duped.push_back(f);
    if (params.frame_dup_rate > 0.0 && rng.bernoulli(params.frame_dup_rate)) duped.push_back(f);
  }

  UtteranceRecord rec;
  rec.transcript = std::string(transcript);
  rec.severity = params.severity;
  rec.domain = params.severity == Severity::kNone ? Domain::kClean : Domain::kDisordered;
  rec.embedding.dim = lex.dim;
  rec.embedding.frames = static_cast<int>(duped.size());
  rec.embedding.data.reserve(duped.size() * dim);
  for (auto& f : duped) {
    for (float v : f) {
      const double noisy = params.noise_std > 0.0 ? v + params.noise_std * rng.normal() : v;
      rec.embedding.data.push_back(static_cast<float>(noisy));
    }
  }
  return rec;
}

std::string sample_transcript(const Lexicon& lex, Rng& rng, int min_len, int max_len) {
  static thread_local std::vector<double> content_w, function_w;
  const auto content = lex.content_words();
  const auto function = lex.function_words();
  content_w.resize(content.size());
  function_w.resize(function.size());
  for (std::size_t i = 0; i < content.size(); ++i) content_w[i] = 1.0 / static_cast<double>(i + 1);
  for (std::size_t i = 0; i < function.size(); ++i) function_w[i] = 1.0 / static_cast<double>(i + 1);

  const int len = rng.range(min_len, max_len);
  std::string out;
  for (int i = 0; i < len; ++i) {
    int w;
    if (!function.empty() && rng.bernoulli(0.25))
      w = function[rng.categorical(function_w)];
    else
      w = content[rng.categorical(content_w)];
    if (!out.empty()) out += ' ';
    out += lex.words[static_cast<std::size_t>(w)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

std::string manifest_line(const ManifestRow& row) {
  json j;
  j["utt_id"] = row.utt_id;
  j["embedding_path"] = row.embedding_path;
  j["transcript"] = row.transcript;
  j["domain"] = std::string(to_string(row.domain));
  j["severity"] = std::string(to_string(row.severity));
  j["speaker_id"] = row.speaker_id;
  return j.dump();
}

ManifestRow parse_manifest_line(std::string_view line) {
  try {
    const json j = json::parse(line);
    ManifestRow r;
    r.utt_id = j.at("utt_id").get<std::string>();
    r.embedding_path = j.at("embedding_path").get<std::string>();
    r.transcript = j.at("transcript").get<std::string>();
    r.domain = parse_domain(j.at("domain").get<std::string>());
    r.severity = parse_severity(j.at("severity").get<std::string>());
    r.speaker_id = j.at("speaker_id").get<std::string>();
    if (r.utt_id.empty() || r.transcript.empty()) throw DataError("manifest row missing utt_id/transcript");
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed manifest line: ") + e.what());
  }
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(parse_manifest_line(line));
  }
  return rows;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  std::string text;
  for (const auto& r : rows) text += manifest_line(r) + "\n";
  write_text_file(path.string(), text);
}

EmbeddingSequence load_row_embedding(const std::filesystem::path& manifest_path, const ManifestRow& row) {
  return read_embedding(manifest_path.parent_path() / row.embedding_path);
}

namespace {

// Largest-remainder apportionment of n speakers over the severity mix.
std::vector<Severity> allocate_severities(int n, const std::vector<double>& mix) {
  double total = 0.0;
  for (double w : mix) total += w;
  std::vector<int> counts(mix.size(), 0);
  std::vector<std::pair<double, std::size_t>> rem;
  int assigned = 0;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    const double exact = n * mix[i] / total;
    counts[i] = static_cast<int>(std::floor(exact));
    assigned += counts[i];
    rem.emplace_back(exact - counts[i], i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) counts[rem[i % rem.size()].second]++;
  std::vector<Severity> out;
  for (std::size_t i = 0; i < counts.size(); ++i)
    for (int c = 0; c < counts[i]; ++c) out.push_back(static_cast<Severity>(i + 1));
  return out;
}

struct SplitPlan {
  std::string name;
  Domain domain;
  int count;
  std::vector<std::string> speakers;
  std::vector<Severity> speaker_severity;
  std::vector<std::string> phrases;  // empty for clean: transcripts are sampled fresh
};

std::string numbered(std::string_view prefix, int i) {
  char pad_buf[32];
  std::snprintf(pad_buf, sizeof(pad_buf), "%05d", i);
  return std::string(prefix) + pad_buf;
}

}  // namespace

CorpusFiles gen_corpus(const Lexicon& lex, const CorpusSpec& spec, const std::filesystem::path& out_dir) {
  auto check = [](const SplitCounts& c, const char* what) {
    if (c.train < 1 || c.dev < 1 || c.test < 1) throw ArgumentError(std::string("gen_corpus: counts must be >= 1: ") + what);
  };
  check(spec.clean, "clean");
  check(spec.disordered, "disordered");
  check(spec.disordered_speakers, "disordered_speakers");
  check(spec.disordered_phrases, "disordered_phrases");
  if (spec.clean_speakers < 1) throw ArgumentError("gen_corpus: clean_speakers must be >= 1");
  if (spec.severity_mix.size() != 3) throw ArgumentError("gen_corpus: severity_mix needs 3 weights");
  if (spec.min_words < 1 || spec.max_words < spec.min_words) throw ArgumentError("gen_corpus: bad transcript length range");

  std::error_code ec;
  std::filesystem::create_directories(out_dir / "manifests", ec);
  std::filesystem::create_directories(out_dir / "emb", ec);
  if (ec || !std::filesystem::is_directory(out_dir / "emb")) throw IoError("cannot create output directory " + out_dir.string());

  // Disjoint phrase pool for the disordered domain.
  const int total_phrases = spec.disordered_phrases.train + spec.disordered_phrases.dev + spec.disordered_phrases.test;
  std::vector<std::string> phrases;
  {
    Rng rng(derive_seed(spec.seed, "disordered-phrases"));
    std::set<std::string> seen;
    int attempts = 0;
    while (static_cast<int>(phrases.size()) < total_phrases) {
      if (++attempts > 1000 * total_phrases) throw ArgumentError("gen_corpus: cannot draw enough distinct phrases");
      std::string p = sample_transcript(lex, rng, spec.min_words, spec.max_words);
      if (seen.insert(p).second) phrases.push_back(std::move(p));
    }
  }

  std::vector<SplitPlan> plans;
  const char* split_names[3] = {"train", "dev", "test"};
  const int clean_counts[3] = {spec.clean.train, spec.clean.dev, spec.clean.test};
  std::vector<std::string> clean_speakers;
  for (int i = 0; i < spec.clean_speakers; ++i) clean_speakers.push_back(numbered("c-spk-", i));
  for (int s = 0; s < 3; ++s) {
    SplitPlan p{std::string("clean_") + split_names[s], Domain::kClean, clean_counts[s], clean_speakers, {}, {}};
    p.speaker_severity.assign(clean_speakers.size(), Severity::kNone);
    plans.push_back(std::move(p));
  }
  const int dis_counts[3] = {spec.disordered.train, spec.disordered.dev, spec.disordered.test};
  const int spk_counts[3] = {spec.disordered_speakers.train, spec.disordered_speakers.dev, spec.disordered_speakers.test};
  const int phr_counts[3] = {spec.disordered_phrases.train, spec.disordered_phrases.dev, spec.disordered_phrases.test};
  int spk_next = 0, phr_next = 0;
  for (int s = 0; s < 3; ++s) {
    SplitPlan p{std::string("disordered_") + split_names[s], Domain::kDisordered, dis_counts[s], {}, {}, {}};
    for (int i = 0; i < spk_counts[s]; ++i) p.speakers.push_back(numbered("d-spk-", spk_next++));
    p.speaker_severity = allocate_severities(spk_counts[s], spec.severity_mix);
    p.phrases.assign(phrases.begin() + phr_next, phrases.begin() + phr_next + phr_counts[s]);
    phr_next += phr_counts[s];
    plans.push_back(std::move(p));
  }

  CorpusFiles files;
  for (const auto& plan : plans) {
    std::vector<ManifestRow> rows(static_cast<std::size_t>(plan.count));
    std::vector<EmbeddingSequence> embs(static_cast<std::size_t>(plan.count));
    const std::string prefix = (plan.domain == Domain::kClean ? "cln-" : "dis-") + plan.name.substr(plan.name.find('_') + 1) + "-";
#pragma omp parallel for schedule(dynamic, 16)
    for (int i = 0; i < plan.count; ++i) {
      ManifestRow& row = rows[static_cast<std::size_t>(i)];
      row.utt_id = numbered(prefix, i);
      Rng rng(derive_seed(spec.seed, row.utt_id));
      const std::size_t spk = rng.below(plan.speakers.size());
      row.speaker_id = plan.speakers[spk];
      row.domain = plan.domain;
      row.severity = plan.speaker_severity[spk];
      row.transcript = plan.phrases.empty() ? sample_transcript(lex, rng, spec.min_words, spec.max_words)
                                            : plan.phrases[rng.below(plan.phrases.size())];
      const DomainParams params =
          plan.domain == Domain::kClean ? clean_domain_params() : disordered_domain_params(row.severity);
      embs[static_cast<std::size_t>(i)] = gen_utterance(lex, row.transcript, params, rng.next_u64()).embedding;
      row.embedding_path = "../emb/" + row.utt_id + ".emb";
    }
    for (int i = 0; i < plan.count; ++i)
      write_embedding(out_dir / "emb" / (rows[static_cast<std::size_t>(i)].utt_id + ".emb"), embs[static_cast<std::size_t>(i)]);
    const auto path = out_dir / "manifests" / (plan.name + ".jsonl");
    write_manifest(path, rows);
    files.manifests.emplace_back(plan.name, path);
  }

  {
    Rng rng(derive_seed(spec.seed, "text-corpus"));
    std::string text;
    for (int i = 0; i < spec.text_corpus_sentences; ++i) text += sample_transcript(lex, rng, spec.min_words, spec.max_words) + "\n";
    files.text_corpus = out_dir / "text_corpus.txt";
    write_text_file(files.text_corpus.string(), text);
  }
  return files;
}

}  // namespace speechrl
