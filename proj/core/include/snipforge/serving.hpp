#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "snipforge/models.hpp"

namespace snipforge {

// Offline coarse sentence representations, one [R_d x d] f32 block per document.
//
// File layout (little-endian):
//   "SNIPCACHE1" | version u32 | d u32 | doc count u64 | fingerprint[32]
//   per doc: id length u32 | id bytes | sentence count u32 | R_d * d f32, row-major
class SentenceCache {
public:
    static constexpr std::uint32_t kVersion = 1;

    SentenceCache() = default;
    SentenceCache(std::size_t dim, const Fingerprint& fingerprint);

    // Throws PreconditionError on a duplicate id or a block of the wrong size.
    void insert(std::string id, std::size_t sentences, std::vector<float> rows);

    bool contains(std::string_view id) const;
    std::size_t sentence_count(std::string_view id) const;
    // f64 copy of a document's block, [R_d x d]. NotFoundError for unknown ids.
    Tensor representations(std::string_view id) const;
    std::span<const float> rows(std::string_view id) const;

    std::size_t dim() const { return dim_; }
    const Fingerprint& fingerprint() const { return fingerprint_; }
    std::size_t size() const { return docs_.size(); }
    // Insertion order, which is also file order.
    const std::vector<std::string>& ids() const { return order_; }

    std::string serialize() const;
    static SentenceCache parse(std::string_view bytes);
    void save(const std::string& path) const;
    static SentenceCache load(const std::string& path);

private:
    struct Entry {
        std::size_t sentences = 0;
        std::vector<float> rows;
    };
    const Entry& entry(std::string_view id) const;

    std::size_t dim_ = 0;
    Fingerprint fingerprint_{};
    std::vector<std::string> order_;
    std::unordered_map<std::string, Entry> docs_;
};

// Encodes every (title, sentence) pair of every document, truncated to R.
SentenceCache build_cache(const CoarseSelector& coarse, const std::vector<ExtractionExample>& corpus);

// Writes the cache to `out_path`. An existing file carrying the same
// fingerprint but different contents is a fingerprint collision and throws
// instead of being overwritten.
void build_cache(const CoarseSelector& coarse, const std::vector<ExtractionExample>& corpus,
                 const std::string& out_path);

enum class Provenance { CoarseOnly, TwoStage, SingleStage };
std::string to_string(Provenance p);

struct SnippetResult {
    std::string doc_id;
    std::size_t start = 0;
    std::vector<std::string> snippet;
    // Per usable sentence. Fine scores are null outside the candidate set.
    std::vector<double> scores_coarse;
    std::vector<std::optional<double>> scores_fine;
    Provenance provenance = Provenance::TwoStage;

    std::string to_json() const;
};

struct ServeOptions {
    std::size_t candidates = 20;  // K
    std::size_t snippet_length = 2;  // n
};

// s_k .. s_{k+n-1}, clipped at the end of the document.
std::vector<std::string> snippet_window(const std::vector<std::string>& sentences, std::size_t start,
                                        std::size_t n);

// Online path: h_q is computed, sentence representations come from `cache`.
// `document` supplies the text for the fine stage and the snippet; its query is
// replaced by `query`. Without `fine` the coarse argmax is returned.
SnippetResult extract_snippet(std::string_view query, const ExtractionExample& document,
                              const SentenceCache& cache, const CoarseSelector& coarse,
                              const FineReranker* fine, const ServeOptions& options = {});

// Single-stage DeepQSE over every usable sentence. Scores land in scores_fine.
SnippetResult extract_snippet_single(std::string_view query, const ExtractionExample& document,
                                     const DeepQSEModel& model, std::size_t snippet_length = 2);

}  // namespace snipforge
