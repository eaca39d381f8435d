#include "snipforge/two_stage.hpp"

#include <algorithm>
#include <numeric>

namespace snipforge {

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    const std::size_t take = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                      });
    idx.resize(take);
    return idx;
}

std::vector<double> fine_scores_for(const FineReranker& fine, const TokenizedExample& example,
                                    const std::vector<std::size_t>& candidates) {
    std::vector<std::size_t> ordered(candidates);
    std::sort(ordered.begin(), ordered.end());
    std::vector<double> by_doc;
    {
        NoGradGuard guard;
        const Tensor scores = fine.score(example, ordered, {});
        by_doc.assign(scores.data().begin(), scores.data().end());
    }
    std::vector<double> out;
    out.reserve(candidates.size());
    for (std::size_t c : candidates) {
        const auto pos = std::lower_bound(ordered.begin(), ordered.end(), c) - ordered.begin();
        out.push_back(by_doc[static_cast<std::size_t>(pos)]);
    }
    return out;
}

std::size_t choose_start(const std::vector<std::size_t>& candidates, const std::vector<double>& fine_scores) {
    if (candidates.empty() || candidates.size() != fine_scores.size()) {
        throw PreconditionError("choose_start: candidates and scores must be non-empty and aligned");
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < candidates.size(); ++i) {
        if (fine_scores[i] > fine_scores[best] ||
            (fine_scores[i] == fine_scores[best] && candidates[i] < candidates[best])) {
            best = i;
        }
    }
    return candidates[best];
}

TwoStageOutput rerank_two_stage(const FineReranker& fine, const TokenizedExample& example,
                                std::vector<double> coarse_scores, std::size_t k) {
    if (k < 1) throw PreconditionError("two-stage: K must be >= 1");
    TwoStageOutput out;
    out.coarse_scores = std::move(coarse_scores);
    out.candidates = top_k(out.coarse_scores, k);
    out.fine_scores = fine_scores_for(fine, example, out.candidates);
    out.start = choose_start(out.candidates, out.fine_scores);
    return out;
}

TwoStageOutput forward_two_stage(const CoarseSelector& coarse, const FineReranker& fine,
                                 const TokenizedExample& example, std::size_t k) {
    if (coarse.vocab().words() != fine.vocab().words()) {
        throw PreconditionError("two-stage: coarse and fine models use different vocabularies");
    }
    return rerank_two_stage(fine, example, coarse.infer(example), k);
}

std::vector<std::size_t> two_stage_ranking(const TwoStageOutput& out) {
    std::vector<std::size_t> order(out.candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double sa = out.fine_scores[a], sb = out.fine_scores[b];
        return sa > sb || (sa == sb && out.candidates[a] < out.candidates[b]);
    });
    std::vector<std::size_t> ranking;
    std::vector<bool> taken(out.coarse_scores.size(), false);
    for (std::size_t i : order) {
        ranking.push_back(out.candidates[i]);
        taken[out.candidates[i]] = true;
    }
    for (std::size_t i : top_k(out.coarse_scores, out.coarse_scores.size())) {
        if (!taken[i]) ranking.push_back(i);
    }
    return ranking;
}

}  // namespace snipforge
