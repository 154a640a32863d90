#include "speechrl/eval_harness.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>
#include <unordered_map>

namespace speechrl {

void Aggregate::add(const EvalRecord& r) {
  ++count;
  edits += r.wer.edits();
  ref_words += r.wer.ref_len;
  if (r.mp_model_score >= 0.5) ++mp_hits;
}

Aggregate aggregate(std::span<const EvalRecord> records) {
  Aggregate a;
  for (const auto& r : records) a.add(r);
  return a;
}

std::map<Severity, Aggregate> slice_by_severity(std::span<const EvalRecord> records) {
  std::map<Severity, Aggregate> out;
  for (const auto& r : records) out[r.severity].add(r);
  return out;
}

AggregateReport make_report(std::span<const EvalRecord> records) {
  return {aggregate(records), slice_by_severity(records)};
}

Agreement agreement(std::span<const EvalRecord> records) {
  if (records.empty()) throw ArgumentError("agreement: no records");
  Agreement a;
  a.n = records.size();
  std::vector<double> scores, labels;
  std::size_t hits = 0;
  for (const auto& r : records) {
    if ((r.mp_model_score >= 0.5 ? 1 : 0) == r.mp_oracle_label) ++hits;
    scores.push_back(r.mp_model_score);
    labels.push_back(r.mp_oracle_label);
  }
  a.accuracy = static_cast<double>(hits) / static_cast<double>(a.n);
  const bool labels_vary = std::any_of(labels.begin(), labels.end(), [&](double l) { return l != labels.front(); });
  const bool scores_vary = std::any_of(scores.begin(), scores.end(), [&](double s) { return s != scores.front(); });
  if (labels_vary && scores_vary) a.spearman_rho = spearman(scores, labels);
  return a;
}

std::vector<EvalRecord> score_hypotheses(std::span<const TokenizedUtterance> rows, std::span<const std::string> hyps,
                                         const MetricsHandles& m) {
  if (rows.size() != hyps.size()) throw ArgumentError("score_hypotheses: size mismatch");
  if (m.lexicon == nullptr || m.mp_model == nullptr) throw ArgumentError("score_hypotheses: metrics handles missing");
  std::vector<EvalRecord> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto& r = out[i];
    r.utt_id = rows[i].utt_id;
    r.ref = rows[i].transcript;
    r.hyp = hyps[i];
    r.wer = wer(r.ref, r.hyp);
    r.mp_model_score = m.mp_model->score(r.ref, r.hyp);
    r.mp_oracle_label = mp_oracle(*m.lexicon, r.ref, r.hyp);
    r.domain = rows[i].domain;
    r.severity = rows[i].severity;
  }
  return out;
}

EvalResult evaluate(const PolicyCheckpoint& ckpt, const Dataset& ds, const TextTokenizer& tok, const MetricsHandles& m,
                    int max_new_tokens) {
  if (ds.size() == 0) throw ArgumentError("evaluate: empty dataset " + ds.name);
  check_compatible(ckpt, ds);
  if (tok.vocab().fingerprint() != ckpt.vocab_map_fingerprint)
    throw CompatibilityError("evaluate: tokenizer vocabulary does not match the checkpoint");
  EvalResult res;
  const auto hyps = decode_dataset(ckpt, ds, tok, max_new_tokens);
  res.records = score_hypotheses(ds.rows, hyps, m);
  res.report = make_report(res.records);
  return res;
}

std::vector<std::string> read_hypotheses(const std::filesystem::path& path, std::span<const ManifestRow> rows) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::unordered_map<std::string, std::string> by_id;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      by_id[j.at("utt_id").get<std::string>()] = j.at("hyp").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed hypothesis line: ") + e.what());
    }
  }
  std::vector<std::string> out;
  for (const auto& r : rows) {
    auto it = by_id.find(r.utt_id);
    if (it == by_id.end()) throw DataError("no hypothesis for " + r.utt_id);
    out.push_back(it->second);
  }
  return out;
}

void write_hypotheses(const std::filesystem::path& path, std::span<const EvalRecord> records) {
  std::string text;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["utt_id"] = r.utt_id;
    j["hyp"] = r.hyp;
    text += j.dump() + "\n";
  }
  write_text_file(path.string(), text);
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void write_records_csv(const std::filesystem::path& path, std::span<const EvalRecord> records) {
  std::ostringstream os;
  os.precision(9);
  os << "utt_id,domain,severity,ref,hyp,substitutions,insertions,deletions,ref_len,wer,mp_model_score,mp_oracle_label\n";
  for (const auto& r : records)
    os << csv_field(r.utt_id) << ',' << to_string(r.domain) << ',' << to_string(r.severity) << ',' << csv_field(r.ref)
       << ',' << csv_field(r.hyp) << ',' << r.wer.substitutions << ',' << r.wer.insertions << ',' << r.wer.deletions
       << ',' << r.wer.ref_len << ',' << r.wer.wer() << ',' << r.mp_model_score << ',' << r.mp_oracle_label << '\n';
  write_text_file(path.string(), os.str());
}

void write_report_csv(const std::filesystem::path& path, const AggregateReport& report) {
  std::ostringstream os;
  os.precision(9);
  os << "slice,count,ref_words,edits,corpus_wer,mp_pct\n";
  auto row = [&](std::string_view name, const Aggregate& a) {
    os << name << ',' << a.count << ',' << a.ref_words << ',' << a.edits << ',' << a.corpus_wer() << ',' << a.mp_pct()
       << '\n';
  };
  row("all", report.overall);
  for (const auto& [sev, a] : report.by_severity) row(to_string(sev), a);
  write_text_file(path.string(), os.str());
}

}  // namespace speechrl
