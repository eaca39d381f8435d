#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "snipforge/models.hpp"

namespace snipforge {

// Indices of the K highest scores, ordered by score descending with ties to the
// lower index. Returns min(K, |scores|) distinct indices.
std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k);

struct TwoStageOutput {
    std::vector<double> coarse_scores;     // one per usable sentence
    std::vector<std::size_t> candidates;   // coarse top-K, rank order
    std::vector<double> fine_scores;       // aligned with `candidates`
    std::size_t start = 0;                 // argmax of fine scores, ties to lower index
};

// Fine scores for an arbitrary candidate set. Candidates are scored in ascending
// document order, keeping their original positions, and returned aligned with
// the input order.
std::vector<double> fine_scores_for(const FineReranker& fine, const TokenizedExample& example,
                                    const std::vector<std::size_t>& candidates);

// Picks the candidate with the highest fine score; ties go to the lower document index.
std::size_t choose_start(const std::vector<std::size_t>& candidates, const std::vector<double>& fine_scores);

// Inference-mode coarse top-K followed by fine reranking. Both models must
// share a vocabulary; `example` is tokenized with it.
TwoStageOutput forward_two_stage(const CoarseSelector& coarse, const FineReranker& fine,
                                 const TokenizedExample& example, std::size_t k);

// The same when coarse scores come from elsewhere (e.g. a sentence cache).
TwoStageOutput rerank_two_stage(const FineReranker& fine, const TokenizedExample& example,
                                std::vector<double> coarse_scores, std::size_t k);

// Final ranking of all sentences: candidates by fine score, then the rest by coarse score.
std::vector<std::size_t> two_stage_ranking(const TwoStageOutput& out);

}  // namespace snipforge
