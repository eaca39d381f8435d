#include "snipforge/serving.hpp"

#include <algorithm>
#include <bit>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "snipforge/two_stage.hpp"

namespace snipforge {

namespace {

constexpr std::string_view kCacheMagic = "SNIPCACHE1";

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class ByteReader {
public:
    explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

    std::string_view take(std::size_t n) {
        if (n > bytes_.size() - pos_) throw FormatError("cache: truncated file");
        const auto out = bytes_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    std::uint64_t le(int width) {
        const auto b = take(static_cast<std::size_t>(width));
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
        return v;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t argmax_lowest(const std::vector<double>& scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) best = i;
    }
    return best;
}

ExtractionExample with_query(const ExtractionExample& doc, std::string_view query) {
    ExtractionExample ex = doc;
    ex.query = std::string(query);
    ex.gold_start.reset();
    return ex;
}

}  // namespace

SentenceCache::SentenceCache(std::size_t dim, const Fingerprint& fingerprint)
    : dim_(dim), fingerprint_(fingerprint) {
    if (dim == 0) throw PreconditionError("cache: dimension must be positive");
}

void SentenceCache::insert(std::string id, std::size_t sentences, std::vector<float> rows) {
    if (rows.size() != sentences * dim_) {
        throw PreconditionError("cache: document '" + id + "' block has " + std::to_string(rows.size()) +
                                " values, expected " + std::to_string(sentences * dim_));
    }
    if (docs_.count(id)) throw PreconditionError("cache: duplicate document id '" + id + "'");
    order_.push_back(id);
    docs_.emplace(std::move(id), Entry{sentences, std::move(rows)});
}

bool SentenceCache::contains(std::string_view id) const { return docs_.count(std::string(id)) > 0; }

const SentenceCache::Entry& SentenceCache::entry(std::string_view id) const {
    const auto it = docs_.find(std::string(id));
    if (it == docs_.end()) throw NotFoundError("cache: unknown document '" + std::string(id) + "'");
    return it->second;
}

std::size_t SentenceCache::sentence_count(std::string_view id) const { return entry(id).sentences; }

std::span<const float> SentenceCache::rows(std::string_view id) const { return entry(id).rows; }

Tensor SentenceCache::representations(std::string_view id) const {
    const Entry& e = entry(id);
    return Tensor::from({e.sentences, dim_}, std::vector<double>(e.rows.begin(), e.rows.end()));
}

std::string SentenceCache::serialize() const {
    std::string out(kCacheMagic);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(dim_));
    put_u64(out, order_.size());
    out.append(reinterpret_cast<const char*>(fingerprint_.data()), fingerprint_.size());
    for (const auto& id : order_) {
        const Entry& e = docs_.at(id);
        put_u32(out, static_cast<std::uint32_t>(id.size()));
        out += id;
        put_u32(out, static_cast<std::uint32_t>(e.sentences));
        for (float v : e.rows) put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

SentenceCache SentenceCache::parse(std::string_view bytes) {
    ByteReader r(bytes);
    if (bytes.size() < kCacheMagic.size() || r.take(kCacheMagic.size()) != kCacheMagic) {
        throw FormatError("cache: bad magic (expected SNIPCACHE1)");
    }
    const auto version = r.le(4);
    if (version != kVersion) throw FormatError("cache: unsupported version " + std::to_string(version));
    const auto dim = static_cast<std::size_t>(r.le(4));
    const auto count = r.le(8);
    Fingerprint fp{};
    const auto fp_bytes = r.take(fp.size());
    std::copy(fp_bytes.begin(), fp_bytes.end(), reinterpret_cast<char*>(fp.data()));
    if (dim == 0) throw FormatError("cache: zero dimension");
    SentenceCache cache(dim, fp);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string id(r.take(static_cast<std::size_t>(r.le(4))));
        const auto sentences = static_cast<std::size_t>(r.le(4));
        std::vector<float> rows(sentences * dim);
        for (auto& v : rows) v = std::bit_cast<float>(static_cast<std::uint32_t>(r.le(4)));
        try {
            cache.insert(std::move(id), sentences, std::move(rows));
        } catch (const PreconditionError& e) {
            throw FormatError(e.what());
        }
    }
    if (!r.done()) throw FormatError("cache: trailing bytes after the last document");
    return cache;
}

void SentenceCache::save(const std::string& path) const {
    const std::string bytes = serialize();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write cache " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    if (!out) throw Error("write failed for cache " + path);
}

SentenceCache SentenceCache::load(const std::string& path) { return parse(slurp(path)); }

SentenceCache build_cache(const CoarseSelector& coarse, const std::vector<ExtractionExample>& corpus) {
    SentenceCache cache(coarse.config().encoder.dim, coarse.fingerprint());
    NoGradGuard guard;
    for (const auto& doc : corpus) {
        const TokenizedExample t = coarse.prepare(doc);
        const std::size_t r = coarse.usable_sentences(t);
        std::vector<float> rows;
        rows.reserve(r * cache.dim());
        for (std::size_t i = 0; i < r; ++i) {
            const Tensor h = coarse.sentence_representation(t.title, t.sentences[i]);
            for (double v : h.data()) rows.push_back(static_cast<float>(v));
        }
        cache.insert(doc.id, r, std::move(rows));
    }
    return cache;
}

void build_cache(const CoarseSelector& coarse, const std::vector<ExtractionExample>& corpus,
                 const std::string& out_path) {
    const std::string bytes = build_cache(coarse, corpus).serialize();
    if (std::filesystem::exists(out_path)) {
        const std::string existing = slurp(out_path);
        const std::size_t fp_at = kCacheMagic.size() + 4 + 4 + 8;
        const std::size_t fp_end = fp_at + sizeof(Fingerprint);
        if (existing.size() >= fp_end && existing.compare(0, kCacheMagic.size(), kCacheMagic) == 0 &&
            existing.compare(fp_at, sizeof(Fingerprint), bytes, fp_at, sizeof(Fingerprint)) == 0 &&
            existing != bytes) {
            throw StaleCacheError("cache: " + out_path + " carries fingerprint " +
                                  to_hex(coarse.fingerprint()) +
                                  " but different contents (fingerprint collision or changed corpus)");
        }
    }
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write cache " + out_path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    if (!out) throw Error("write failed for cache " + out_path);
}

std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::CoarseOnly: return "coarse-only";
        case Provenance::TwoStage: return "two-stage";
        case Provenance::SingleStage: return "single-stage";
    }
    return "unknown";
}

std::string SnippetResult::to_json() const {
    nlohmann::ordered_json j;
    j["doc_id"] = doc_id;
    j["start"] = start;
    j["snippet"] = snippet;
    j["scores_coarse"] = scores_coarse;
    auto fine = nlohmann::ordered_json::array();
    for (const auto& s : scores_fine) fine.push_back(s ? nlohmann::ordered_json(*s) : nlohmann::ordered_json());
    j["scores_fine"] = std::move(fine);
    j["provenance"] = to_string(provenance);
    return j.dump();
}

std::vector<std::string> snippet_window(const std::vector<std::string>& sentences, std::size_t start,
                                        std::size_t n) {
    if (n < 1) throw PreconditionError("snippet length must be >= 1");
    if (start >= sentences.size()) throw PreconditionError("snippet start beyond the document");
    const std::size_t end = std::min(sentences.size(), start + n);
    return {sentences.begin() + static_cast<std::ptrdiff_t>(start),
            sentences.begin() + static_cast<std::ptrdiff_t>(end)};
}

SnippetResult extract_snippet(std::string_view query, const ExtractionExample& document,
                              const SentenceCache& cache, const CoarseSelector& coarse,
                              const FineReranker* fine, const ServeOptions& options) {
    if (options.candidates < 1) throw PreconditionError("extract: K must be >= 1");
    if (options.snippet_length < 1) throw PreconditionError("extract: n must be >= 1");
    if (cache.fingerprint() != coarse.fingerprint()) {
        throw StaleCacheError("stale cache: built from coarse checkpoint " + to_hex(cache.fingerprint()) +
                              ", serving " + to_hex(coarse.fingerprint()));
    }
    if (cache.dim() != coarse.config().encoder.dim) {
        throw StaleCacheError("stale cache: width " + std::to_string(cache.dim()) + " vs model " +
                              std::to_string(coarse.config().encoder.dim));
    }
    if (fine && coarse.vocab().words() != fine->vocab().words()) {
        throw PreconditionError("extract: coarse and fine models use different vocabularies");
    }
    const TokenizedExample t = coarse.prepare(with_query(document, query));
    const std::size_t r = coarse.usable_sentences(t);
    if (r == 0) throw PreconditionError("extract: document '" + document.id + "' has no sentences");
    if (cache.sentence_count(document.id) != r) {
        throw StaleCacheError("stale cache: document '" + document.id + "' has " + std::to_string(r) +
                              " sentences, cache holds " + std::to_string(cache.sentence_count(document.id)));
    }

    SnippetResult out;
    out.doc_id = document.id;
    {
        NoGradGuard guard;
        std::vector<std::size_t> positions(r);
        std::iota(positions.begin(), positions.end(), 0);
        const Tensor scores = coarse.score_from_representations(coarse.query_representation(t),
                                                                cache.representations(document.id), positions);
        out.scores_coarse.assign(scores.data().begin(), scores.data().end());
    }
    out.scores_fine.assign(r, std::nullopt);

    if (!fine) {
        out.provenance = Provenance::CoarseOnly;
        out.start = argmax_lowest(out.scores_coarse);
    } else {
        out.provenance = Provenance::TwoStage;
        const TwoStageOutput two = rerank_two_stage(*fine, t, out.scores_coarse, options.candidates);
        for (std::size_t i = 0; i < two.candidates.size(); ++i) out.scores_fine[two.candidates[i]] = two.fine_scores[i];
        out.start = two.start;
    }
    if (r == 1) out.start = 0;
    const std::vector<std::string> usable(document.sentences.begin(),
                                          document.sentences.begin() + static_cast<std::ptrdiff_t>(r));
    out.snippet = snippet_window(usable, out.start, options.snippet_length);
    return out;
}

SnippetResult extract_snippet_single(std::string_view query, const ExtractionExample& document,
                                     const DeepQSEModel& model, std::size_t snippet_length) {
    if (document.sentences.empty()) throw PreconditionError("extract: document '" + document.id + "' is empty");
    const TokenizedExample t = model.prepare(with_query(document, query));
    const std::vector<double> scores = model.infer(t);
    SnippetResult out;
    out.doc_id = document.id;
    out.provenance = Provenance::SingleStage;
    out.scores_fine.assign(scores.begin(), scores.end());
    out.start = argmax_lowest(scores);
    const std::vector<std::string> usable(document.sentences.begin(),
                                          document.sentences.begin() + static_cast<std::ptrdiff_t>(scores.size()));
    out.snippet = snippet_window(usable, out.start, snippet_length);
    return out;
}

}  // namespace snipforge
