#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "speechrl/metrics.hpp"
#include "speechrl/train_sft.hpp"

namespace speechrl {

struct EvalRecord {
  std::string utt_id;
  std::string ref;
  std::string hyp;
  WerBreakdown wer;
  double mp_model_score = 0.0;
  int mp_oracle_label = 0;
  Domain domain = Domain::kClean;
  Severity severity = Severity::kNone;
};

struct Aggregate {
  std::size_t count = 0;
  long edits = 0;
  long ref_words = 0;
  std::size_t mp_hits = 0;  // records with mp_model_score >= 0.5

  void add(const EvalRecord& r);
  double corpus_wer() const { return ref_words == 0 ? 0.0 : static_cast<double>(edits) / static_cast<double>(ref_words); }
  double mp_pct() const { return count == 0 ? 0.0 : 100.0 * static_cast<double>(mp_hits) / static_cast<double>(count); }
};

struct AggregateReport {
  Aggregate overall;
  std::map<Severity, Aggregate> by_severity;
};

Aggregate aggregate(std::span<const EvalRecord> records);
// Buckets with no records are absent.
std::map<Severity, Aggregate> slice_by_severity(std::span<const EvalRecord> records);
AggregateReport make_report(std::span<const EvalRecord> records);

struct Agreement {
  double accuracy = 0.0;
  std::optional<double> spearman_rho;  // empty when the labels are constant
  std::size_t n = 0;
};

// Accuracy of (score >= 0.5) against the oracle label and Spearman rho between
// scores and labels. Throws ArgumentError on an empty record set.
Agreement agreement(std::span<const EvalRecord> records);

struct MetricsHandles {
  const Lexicon* lexicon = nullptr;
  const MPModel* mp_model = nullptr;
};

// Builds records for given hypotheses (parallel to rows).
std::vector<EvalRecord> score_hypotheses(std::span<const TokenizedUtterance> rows, std::span<const std::string> hyps,
                                         const MetricsHandles& m);

struct EvalResult {
  std::vector<EvalRecord> records;
  AggregateReport report;
};

// Greedy decoding of every utterance of ds, then scoring.
EvalResult evaluate(const PolicyCheckpoint& ckpt, const Dataset& ds, const TextTokenizer& tok, const MetricsHandles& m,
                    int max_new_tokens);

// Hypotheses file: JSONL {utt_id, hyp}. Every manifest row must have a hypothesis.
std::vector<std::string> read_hypotheses(const std::filesystem::path& path, std::span<const ManifestRow> rows);
void write_hypotheses(const std::filesystem::path& path, std::span<const EvalRecord> records);

void write_records_csv(const std::filesystem::path& path, std::span<const EvalRecord> records);
// One row for "all" plus one per severity bucket.
void write_report_csv(const std::filesystem::path& path, const AggregateReport& report);

std::string csv_field(std::string_view s);

}  // namespace speechrl
