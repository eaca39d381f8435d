#include "snipforge/baselines.hpp"

#include <cmath>
#include <set>

#include "snipforge/text.hpp"

namespace snipforge {

namespace {

std::set<std::string, std::less<>> unique_words(std::string_view text) {
    auto words = split_words(text);
    return {words.begin(), words.end()};
}

}  // namespace

std::vector<double> cts_score(std::string_view query, const std::vector<std::string>& sentences) {
    const auto q = unique_words(query);
    std::vector<double> scores;
    scores.reserve(sentences.size());
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        std::size_t overlap = 0;
        for (const auto& w : unique_words(sentences[i])) overlap += q.count(w);
        scores.push_back(static_cast<double>(overlap) + 1.0 / (1.0 + static_cast<double>(i)));
    }
    return scores;
}

Bm25Stats Bm25Stats::from_sentences(const std::vector<std::string>& sentences) {
    Bm25Stats s;
    s.n_sentences = sentences.size();
    std::size_t total = 0;
    for (const auto& sentence : sentences) {
        const auto words = split_words(sentence);
        total += words.size();
        for (const auto& w : std::set<std::string>(words.begin(), words.end())) ++s.document_frequency[w];
    }
    s.avg_length = s.n_sentences ? static_cast<double>(total) / static_cast<double>(s.n_sentences) : 0.0;
    return s;
}

double Bm25Stats::idf(std::string_view term) const {
    const auto it = document_frequency.find(term);
    const double df = it == document_frequency.end() ? 0.0 : static_cast<double>(it->second);
    const double n = static_cast<double>(n_sentences);
    return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

std::vector<double> bm25_score(std::string_view query, const std::vector<std::string>& sentences,
                               const Bm25Stats& stats, Bm25Params params) {
    const auto terms = split_words(query);
    std::vector<double> scores;
    scores.reserve(sentences.size());
    for (const auto& sentence : sentences) {
        const auto words = split_words(sentence);
        const double dl = static_cast<double>(words.size());
        const double norm =
            stats.avg_length > 0.0 ? params.k1 * (1.0 - params.b + params.b * dl / stats.avg_length) : params.k1;
        double score = 0.0;
        for (const auto& term : terms) {
            std::size_t tf = 0;
            for (const auto& w : words) tf += (w == term);
            if (tf == 0) continue;
            const double f = static_cast<double>(tf);
            score += stats.idf(term) * f * (params.k1 + 1.0) / (f + norm);
        }
        scores.push_back(score);
    }
    return scores;
}

std::vector<double> bm25_score(std::string_view query, const std::vector<std::string>& sentences) {
    return bm25_score(query, sentences, Bm25Stats::from_sentences(sentences));
}

}  // namespace snipforge
