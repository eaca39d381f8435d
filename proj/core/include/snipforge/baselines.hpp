#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace snipforge {

// CTS-style overlap: |unique query words in s_i| + 1 / (1 + i).
std::vector<double> cts_score(std::string_view query, const std::vector<std::string>& sentences);

// Document-level BM25 statistics: each sentence is one "document".
struct Bm25Stats {
    std::size_t n_sentences = 0;
    double avg_length = 0.0;
    std::map<std::string, std::size_t, std::less<>> document_frequency;

    static Bm25Stats from_sentences(const std::vector<std::string>& sentences);
    double idf(std::string_view term) const;
};

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

std::vector<double> bm25_score(std::string_view query, const std::vector<std::string>& sentences,
                               const Bm25Stats& stats, Bm25Params params = {});
std::vector<double> bm25_score(std::string_view query, const std::vector<std::string>& sentences);

}  // namespace snipforge
