#include "snipforge/eval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <thread>

#include "json.hpp"
#include "snipforge/errors.hpp"

namespace snipforge {

namespace {
using json = nlohmann::ordered_json;
}

std::vector<std::size_t> rank_by_score(std::span<const double> scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

double precision_at_k(const std::vector<std::vector<std::size_t>>& rankings,
                      const std::vector<std::size_t>& golds, std::size_t k) {
    if (k < 1) throw PreconditionError("precision_at_k: k must be >= 1");
    if (rankings.size() != golds.size()) {
        throw DimensionError("precision_at_k: " + std::to_string(rankings.size()) + " rankings vs " +
                             std::to_string(golds.size()) + " golds");
    }
    if (rankings.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < rankings.size(); ++i) {
        const auto& r = rankings[i];
        const auto end = r.begin() + static_cast<std::ptrdiff_t>(std::min(k, r.size()));
        if (std::find(r.begin(), end, golds[i]) != end) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

void EvalReport::check() const {
    if (!(0.0 <= p_at_1 && p_at_1 <= p_at_3 && p_at_3 <= p_at_5 && p_at_5 <= 1.0)) {
        throw Error("eval report violates 0 <= P@1 <= P@3 <= P@5 <= 1");
    }
}

std::string EvalReport::to_json() const {
    json j;
    j["p_at_1"] = p_at_1;
    j["p_at_3"] = p_at_3;
    j["p_at_5"] = p_at_5;
    j["pairwise_accuracy"] = pairwise_accuracy ? json(*pairwise_accuracy) : json(nullptr);
    j["n_examples"] = n_examples;
    j["skipped_pairs"] = skipped_pairs;
    return j.dump();
}

EvalReport report_from_rankings(const std::vector<std::vector<std::size_t>>& rankings,
                                const std::vector<std::size_t>& golds) {
    EvalReport r;
    r.n_examples = rankings.size();
    r.p_at_1 = precision_at_k(rankings, golds, 1);
    r.p_at_3 = precision_at_k(rankings, golds, 3);
    r.p_at_5 = precision_at_k(rankings, golds, 5);
    r.check();
    return r;
}

Ranker ranker_from_scorer(Scorer scorer) {
    return [scorer = std::move(scorer)](const ExtractionExample& ex) {
        const auto scores = scorer(ex);
        return rank_by_score(scores);
    };
}

EvalReport evaluate(const std::vector<ExtractionExample>& examples, const Ranker& ranker,
                    std::size_t threads) {
    std::vector<const ExtractionExample*> labeled;
    for (const auto& ex : examples)
        if (ex.gold_start) labeled.push_back(&ex);

    std::vector<std::vector<std::size_t>> rankings(labeled.size());
    std::vector<std::size_t> golds(labeled.size());
    for (std::size_t i = 0; i < labeled.size(); ++i) golds[i] = *labeled[i]->gold_start;

    threads = std::max<std::size_t>(1, std::min(threads, labeled.size()));
    if (threads == 1) {
        for (std::size_t i = 0; i < labeled.size(); ++i) rankings[i] = ranker(*labeled[i]);
    } else {
        std::vector<std::exception_ptr> errors(threads);
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t i = t; i < labeled.size(); i += threads) {
                        rankings[i] = ranker(*labeled[i]);
                    }
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    return report_from_rankings(rankings, golds);
}

std::vector<PairRecord> load_pairs(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open pair file " + path);
    std::vector<PairRecord> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const json j = json::parse(line);
            PairRecord p;
            p.query = j.at("query").get<std::string>();
            p.title = j.at("title").get<std::string>();
            p.sentences = j.at("sentences").get<std::vector<std::string>>();
            p.cand_a = j.at("cand_a").get<std::int64_t>();
            p.cand_b = j.at("cand_b").get<std::int64_t>();
            p.label = j.at("label").get<int>();
            if (p.label != 0 && p.label != 1) throw FormatError("label must be 0 or 1");
            out.push_back(std::move(p));
        } catch (const json::exception& e) {
            throw FormatError(path + ":" + std::to_string(number) + ": " + e.what());
        } catch (const FormatError& e) {
            throw FormatError(path + ":" + std::to_string(number) + ": " + e.what());
        }
    }
    return out;
}

PairwiseResult pairwise_accuracy(const std::vector<PairRecord>& pairs, const Scorer& scorer) {
    PairwiseResult r;
    std::size_t correct = 0;
    for (const auto& p : pairs) {
        ExtractionExample ex;
        ex.query = p.query;
        ex.title = p.title;
        ex.sentences = p.sentences;
        const auto n = static_cast<std::int64_t>(p.sentences.size());
        if (p.cand_a < 0 || p.cand_b < 0 || p.cand_a >= n || p.cand_b >= n) {
            ++r.skipped;
            continue;
        }
        const auto scores = scorer(ex);
        const auto a = static_cast<std::size_t>(p.cand_a), b = static_cast<std::size_t>(p.cand_b);
        if (a >= scores.size() || b >= scores.size()) {
            ++r.skipped;
            continue;
        }
        const int predicted = scores[b] > scores[a] ? 1 : 0;
        if (predicted == p.label) ++correct;
        ++r.evaluated;
    }
    r.accuracy = r.evaluated ? static_cast<double>(correct) / static_cast<double>(r.evaluated) : 0.0;
    return r;
}

}  // namespace snipforge
