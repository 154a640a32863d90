#include "speechrl/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

namespace speechrl {

std::vector<std::string> normalize_text(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (!std::ispunct(c)) {
      cur += static_cast<char>(std::tolower(c));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

WerBreakdown wer_words(std::span<const std::string> ref, std::span<const std::string> hyp) {
  if (ref.empty()) throw ArgumentError("wer: reference is empty after normalization");
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<int> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> int& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      const int sub = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({sub, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }

  WerBreakdown b;
  b.ref_len = static_cast<int>(n);
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const int cost = ref[i - 1] == hyp[j - 1] ? 0 : 1;
      if (at(i, j) == at(i - 1, j - 1) + cost) {
        b.substitutions += cost;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      b.deletions++;
      --i;
    } else {
      b.insertions++;
      --j;
    }
  }
  return b;
}

WerBreakdown wer(std::string_view ref, std::string_view hyp) {
  const auto r = normalize_text(ref);
  const auto h = normalize_text(hyp);
  return wer_words(r, h);
}

namespace {

constexpr int kUnknownClass = -2;

std::vector<int> content_classes(const Lexicon& lex, std::string_view text) {
  std::vector<int> out;
  for (const auto& w : normalize_text(text)) {
    const int idx = lex.index_of(w);
    if (idx < 0) {
      out.push_back(kUnknownClass);
    } else if (!lex.is_function_word(idx)) {
      out.push_back(lex.synonym_class[static_cast<std::size_t>(idx)]);
    }
  }
  return out;
}

std::vector<double> midranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = rank;
    i = j + 1;
  }
  return r;
}

}  // namespace

int mp_oracle(const Lexicon& lex, std::string_view ref, std::string_view hyp) {
  return content_classes(lex, ref) == content_classes(lex, hyp) ? 1 : 0;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ArgumentError("auc: size mismatch");
  const auto ranks = midranks(scores);
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      pos += 1;
      rank_sum += ranks[i];
    } else {
      neg += 1;
    }
  }
  if (pos == 0 || neg == 0) throw DataError("auc: need both labels");
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ArgumentError("spearman: need two equal-length samples of size >= 2");
  const auto ra = midranks(a);
  const auto rb = midranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0 || vb == 0) throw ArgumentError("spearman: undefined for a constant sample");
  return cov / std::sqrt(va * vb);
}

}  // namespace speechrl
