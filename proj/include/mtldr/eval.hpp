// SPDX-License-Identifier: Apache-2.0
//
// ROUGE-1/2/L and corpus statistics. Text is lowercased and split on
// non-alphanumeric bytes; no stemming, no stopword removal.
#pragma once

#include <cstddef>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace mtldr {

using Words = std::vector<std::string>;

Words normalize_words(std::string_view text);

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

RougeScore make_score(double precision, double recall);

// Clipped n-gram overlap. Empty reference or candidate: all zeros.
RougeScore rouge_n(const Words& candidate, const Words& reference, std::size_t n);
RougeScore rouge_n(std::string_view candidate, std::string_view reference, std::size_t n);

std::size_t lcs_length(const Words& a, const Words& b);
RougeScore rouge_l(const Words& candidate, const Words& reference);
RougeScore rouge_l(std::string_view candidate, std::string_view reference);

// Distinct target n-grams (pooled over ns) missing from the source, as a percentage.
double novel_ngram_pct(const Words& source, const Words& target, const std::set<std::size_t>& ns = {1, 2, 3, 4});
double novel_ngram_pct(std::string_view source, std::string_view target, const std::set<std::size_t>& ns = {1, 2, 3, 4});

// Fraction in [0, 1] to a percentage rounded half-up at 2 decimals.
double report_pct(double fraction);

struct RougeTriple {
  RougeScore r1, r2, rl;
};

RougeTriple rouge_all(std::string_view candidate, std::string_view reference);

// Means over pairs, summed in index order.
struct RougeMeans {
  std::size_t count = 0;
  RougeTriple mean;
};
RougeMeans mean_rouge(const std::vector<std::pair<std::string, std::string>>& candidate_reference);

struct CorpusStats {
  std::size_t samples = 0;
  double avg_source_words = 0.0;
  double avg_target_words = 0.0;
  double novel_pct = 0.0;  // mean over samples
};

CorpusStats corpus_stats(const std::vector<std::pair<std::string, std::string>>& source_target);

}  // namespace mtldr
