#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "snipforge/text.hpp"

namespace snipforge {

// Indices sorted by score descending; equal scores keep the lower index first.
std::vector<std::size_t> rank_by_score(std::span<const double> scores);

// Fraction of examples whose gold index appears among the first k ranked entries.
double precision_at_k(const std::vector<std::vector<std::size_t>>& rankings,
                      const std::vector<std::size_t>& golds, std::size_t k);

struct EvalReport {
    double p_at_1 = 0.0;
    double p_at_3 = 0.0;
    double p_at_5 = 0.0;
    std::optional<double> pairwise_accuracy;
    std::size_t n_examples = 0;
    std::size_t skipped_pairs = 0;

    // Throws if the P@k chain 0 <= P@1 <= P@3 <= P@5 <= 1 is broken.
    void check() const;
    std::string to_json() const;
};

EvalReport report_from_rankings(const std::vector<std::vector<std::size_t>>& rankings,
                                const std::vector<std::size_t>& golds);

using Ranker = std::function<std::vector<std::size_t>(const ExtractionExample&)>;
using Scorer = std::function<std::vector<double>(const ExtractionExample&)>;

Ranker ranker_from_scorer(Scorer scorer);

// Ranks every labeled example, fanning out over `threads` workers. Results are
// merged back in input order, so the report does not depend on the thread count.
EvalReport evaluate(const std::vector<ExtractionExample>& examples, const Ranker& ranker,
                    std::size_t threads = 1);

struct PairRecord {
    std::string query;
    std::string title;
    std::vector<std::string> sentences;
    std::int64_t cand_a = 0;
    std::int64_t cand_b = 0;
    int label = 0;  // 0: cand_a is better, 1: cand_b
};

// JSONL of {query, title, sentences, cand_a, cand_b, label}; malformed lines throw FormatError.
std::vector<PairRecord> load_pairs(const std::string& path);

struct PairwiseResult {
    double accuracy = 0.0;
    std::size_t evaluated = 0;
    std::size_t skipped = 0;  // candidate index not in the document
};

// Scores each document once; predicts the higher-scored candidate, label 0 on ties.
PairwiseResult pairwise_accuracy(const std::vector<PairRecord>& pairs, const Scorer& scorer);

}  // namespace snipforge
