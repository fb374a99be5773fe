// SPDX-License-Identifier: Apache-2.0
#include "mtldr/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <stdexcept>

namespace mtldr {

Words normalize_words(std::string_view text) {
  Words out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

RougeScore make_score(double p, double r) {
  return {p, r, p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0};
}

namespace {

std::map<Words, std::size_t> ngram_counts(const Words& w, std::size_t n) {
  std::map<Words, std::size_t> out;
  for (std::size_t i = 0; i + n <= w.size(); ++i) ++out[Words(w.begin() + static_cast<long>(i), w.begin() + static_cast<long>(i + n))];
  return out;
}

}  // namespace

RougeScore rouge_n(const Words& cand, const Words& ref, std::size_t n) {
  if (n == 0) throw std::invalid_argument("rouge_n: n must be positive");
  const auto c = ngram_counts(cand, n), r = ngram_counts(ref, n);
  std::size_t total_c = 0, total_r = 0, overlap = 0;
  for (const auto& [g, k] : c) total_c += k;
  for (const auto& [g, k] : r) {
    total_r += k;
    auto it = c.find(g);
    if (it != c.end()) overlap += std::min(k, it->second);
  }
  if (total_c == 0 || total_r == 0) return {};
  return make_score(static_cast<double>(overlap) / static_cast<double>(total_c),
                    static_cast<double>(overlap) / static_cast<double>(total_r));
}

RougeScore rouge_n(std::string_view candidate, std::string_view reference, std::size_t n) {
  return rouge_n(normalize_words(candidate), normalize_words(reference), n);
}

std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(const Words& cand, const Words& ref) {
  if (cand.empty() || ref.empty()) return {};
  const double l = static_cast<double>(lcs_length(cand, ref));
  return make_score(l / static_cast<double>(cand.size()), l / static_cast<double>(ref.size()));
}

RougeScore rouge_l(std::string_view candidate, std::string_view reference) {
  return rouge_l(normalize_words(candidate), normalize_words(reference));
}

double novel_ngram_pct(const Words& source, const Words& target, const std::set<std::size_t>& ns) {
  if (target.empty()) throw std::invalid_argument("novel_ngram_pct: empty target");
  std::size_t total = 0, novel = 0;
  for (std::size_t n : ns) {
    if (n == 0) throw std::invalid_argument("novel_ngram_pct: n must be positive");
    const auto src = ngram_counts(source, n);
    for (const auto& [g, k] : ngram_counts(target, n)) {
      ++total;
      novel += src.count(g) == 0;
    }
  }
  if (total == 0) return 0.0;
  return 100.0 * static_cast<double>(novel) / static_cast<double>(total);
}

double novel_ngram_pct(std::string_view source, std::string_view target, const std::set<std::size_t>& ns) {
  return novel_ngram_pct(normalize_words(source), normalize_words(target), ns);
}

double report_pct(double fraction) {
  // 1e-9 absorbs binary representation error at exact halves
  return std::floor(fraction * 10000.0 + 0.5 + 1e-9) / 100.0;
}

RougeTriple rouge_all(std::string_view candidate, std::string_view reference) {
  const Words c = normalize_words(candidate), r = normalize_words(reference);
  return {rouge_n(c, r, 1), rouge_n(c, r, 2), rouge_l(c, r)};
}

RougeMeans mean_rouge(const std::vector<std::pair<std::string, std::string>>& pairs) {
  RougeMeans out;
  out.count = pairs.size();
  if (pairs.empty()) return out;
  std::vector<RougeTriple> scores(pairs.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < static_cast<long>(pairs.size()); ++i) scores[i] = rouge_all(pairs[i].first, pairs[i].second);
  auto acc = [&](RougeScore RougeTriple::*which) {
    RougeScore s;
    for (const auto& t : scores) {
      s.precision += (t.*which).precision;
      s.recall += (t.*which).recall;
      s.f1 += (t.*which).f1;
    }
    const double n = static_cast<double>(scores.size());
    return RougeScore{s.precision / n, s.recall / n, s.f1 / n};
  };
  out.mean = {acc(&RougeTriple::r1), acc(&RougeTriple::r2), acc(&RougeTriple::rl)};
  return out;
}

CorpusStats corpus_stats(const std::vector<std::pair<std::string, std::string>>& source_target) {
  CorpusStats s;
  s.samples = source_target.size();
  if (s.samples == 0) throw std::invalid_argument("corpus_stats: empty corpus");
  for (const auto& [src, tgt] : source_target) {
    const Words a = normalize_words(src), b = normalize_words(tgt);
    s.avg_source_words += static_cast<double>(a.size());
    s.avg_target_words += static_cast<double>(b.size());
    s.novel_pct += b.empty() ? 0.0 : novel_ngram_pct(a, b);
  }
  const double n = static_cast<double>(s.samples);
  s.avg_source_words /= n;
  s.avg_target_words /= n;
  s.novel_pct /= n;
  return s;
}

}  // namespace mtldr
