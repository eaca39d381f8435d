#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "snipforge/corpus.hpp"
#include "snipforge/serving.hpp"
#include "snipforge/two_stage.hpp"
#include "test_support.hpp"

using namespace snipforge;
using snipforge::testing::temp_path;
using snipforge::testing::tiny_config;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct Pipeline {
    std::unique_ptr<SnippetModel> coarse_model;
    std::unique_ptr<SnippetModel> fine_model;
    CoarseSelector& coarse() { return static_cast<CoarseSelector&>(*coarse_model); }
    FineReranker& fine() { return static_cast<FineReranker&>(*fine_model); }
};

Pipeline random_pipeline(std::uint64_t seed = 7) {
    auto cc = tiny_config(ModelKind::Coarse);
    cc.seed = seed;
    auto fc = tiny_config(ModelKind::Fine);
    fc.seed = seed + 1;
    return {make_model(cc, synth_vocab()), make_model(fc, synth_vocab())};
}

}  // namespace

TEST_CASE("cache bytes follow the documented layout") {
    Fingerprint fp{};
    for (std::size_t i = 0; i < fp.size(); ++i) fp[i] = static_cast<std::uint8_t>(i);
    SentenceCache cache(2, fp);
    cache.insert("ab", 1, {1.0f, -2.5f});

    const unsigned char expected_head[] = {
        'S', 'N', 'I', 'P', 'C', 'A', 'C', 'H', 'E', '1',  // magic
        0x01, 0x00, 0x00, 0x00,                            // version
        0x02, 0x00, 0x00, 0x00,                            // d
        0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,    // doc count
    };
    const unsigned char expected_doc[] = {
        0x02, 0x00, 0x00, 0x00, 'a', 'b',  // id
        0x01, 0x00, 0x00, 0x00,            // sentences
        0x00, 0x00, 0x80, 0x3f,            // 1.0f
        0x00, 0x00, 0x20, 0xc0,            // -2.5f
    };
    std::string expected(reinterpret_cast<const char*>(expected_head), sizeof(expected_head));
    for (auto b : fp) expected.push_back(static_cast<char>(b));
    expected.append(reinterpret_cast<const char*>(expected_doc), sizeof(expected_doc));
    CHECK(cache.serialize() == expected);

    auto back = SentenceCache::parse(expected);
    CHECK(back.dim() == 2);
    CHECK(back.fingerprint() == fp);
    CHECK(back.ids() == std::vector<std::string>{"ab"});
    CHECK(back.sentence_count("ab") == 1);
    CHECK(back.representations("ab").at(0, 1) == -2.5);

    CHECK_THROWS_AS(SentenceCache::parse("SNIPCACHE2" + expected.substr(10)), FormatError);
    CHECK_THROWS_AS(SentenceCache::parse(expected + "z"), FormatError);
    CHECK_THROWS_AS(SentenceCache::parse(expected.substr(0, expected.size() - 1)), FormatError);
    auto wrong_version = expected;
    wrong_version[10] = 2;
    CHECK_THROWS_AS(SentenceCache::parse(wrong_version), FormatError);

    CHECK_THROWS_AS(cache.insert("ab", 1, {0.0f, 0.0f}), PreconditionError);
    CHECK_THROWS_AS(cache.insert("cd", 2, {0.0f, 0.0f}), PreconditionError);
    CHECK_THROWS_AS(cache.representations("zz"), NotFoundError);
}

TEST_CASE("build_cache shapes, idempotence and recompute agreement") {
    auto p = random_pipeline();
    auto corpus = synth_examples(3, 12);
    corpus[0].sentences.resize(3);
    auto cache = build_cache(p.coarse(), corpus);
    CHECK(cache.size() == corpus.size());
    CHECK(cache.dim() == p.coarse().config().encoder.dim);
    CHECK(cache.fingerprint() == p.coarse().fingerprint());
    CHECK(cache.representations(corpus[0].id).shape() == Shape{3, cache.dim()});
    CHECK(cache.rows(corpus[0].id).size() == 3 * cache.dim());

    const auto a = temp_path("cache_a.bin");
    std::filesystem::remove(a);
    build_cache(p.coarse(), corpus, a);
    const auto first = read_file(a);
    build_cache(p.coarse(), corpus, a);
    CHECK(read_file(a) == first);
    CHECK(first == cache.serialize());
    CHECK(SentenceCache::load(a).serialize() == first);

    double worst = 0.0;
    for (const auto& doc : corpus) {
        auto ex = p.coarse().prepare(doc);
        auto fresh = p.coarse().sentence_representations(ex, [&] {
            std::vector<std::size_t> all(p.coarse().usable_sentences(ex));
            std::iota(all.begin(), all.end(), 0);
            return all;
        }());
        auto cached = cache.representations(doc.id);
        for (std::size_t i = 0; i < fresh.size(); ++i) worst = std::max(worst, std::abs(fresh[i] - cached[i]));
    }
    CHECK(worst <= 1e-6);

    // Same fingerprint, different contents: refuse to overwrite.
    auto other = corpus;
    other[1].sentences[0] = "w1 w2 w3";
    CHECK_THROWS_AS(build_cache(p.coarse(), other, a), StaleCacheError);
    CHECK(read_file(a) == first);
}

TEST_CASE("cached and recomputed coarse paths agree") {
    auto p = random_pipeline(11);
    auto corpus = synth_examples(5, 60);
    auto cache = build_cache(p.coarse(), corpus);
    std::size_t agree = 0, counted = 0;
    double worst = 0.0;
    for (const auto& doc : corpus) {
        auto cached = extract_snippet(doc.query, doc, cache, p.coarse(), nullptr, {5, 2});
        auto fresh = p.coarse().infer(p.coarse().prepare(doc));
        REQUIRE(cached.scores_coarse.size() == fresh.size());
        for (std::size_t i = 0; i < fresh.size(); ++i) worst = std::max(worst, std::abs(fresh[i] - cached.scores_coarse[i]));
        auto order = top_k(fresh, 2);
        if (order.size() > 1 && std::abs(fresh[order[0]] - fresh[order[1]]) < 1e-4) continue;
        ++counted;
        agree += cached.start == order[0];
    }
    CHECK(worst <= 1e-5);
    CHECK(counted > 50);
    CHECK(agree == counted);
}

TEST_CASE("extract_snippet examples") {
    auto p = random_pipeline();
    auto corpus = synth_examples(9, 30);
    ExtractionExample single{"single", "w1 w2", "w3", {"w4 w5"}, std::nullopt};
    corpus.push_back(single);
    auto cache = build_cache(p.coarse(), corpus);

    auto r1 = extract_snippet("w1 w9", single, cache, p.coarse(), &p.fine(), {20, 2});
    CHECK(r1.start == 0);
    CHECK(r1.snippet == std::vector<std::string>{"w4 w5"});
    CHECK(r1.provenance == Provenance::TwoStage);

    for (const auto& doc : corpus) {
        const std::size_t r = doc.sentences.size();
        auto full = extract_snippet(doc.query, doc, cache, p.coarse(), &p.fine(), {r, 2});
        auto fine_only = p.fine().infer(p.fine().prepare(doc));
        CHECK(full.start == top_k(fine_only, 1)[0]);
        for (const auto& s : full.scores_fine) CHECK(s.has_value());

        auto forced = extract_snippet(doc.query, doc, cache, p.coarse(), &p.fine(), {1, 2});
        CHECK(forced.start == top_k(forced.scores_coarse, 1)[0]);

        auto mid = extract_snippet(doc.query, doc, cache, p.coarse(), &p.fine(), {3, 3});
        auto top = top_k(mid.scores_coarse, 3);
        CHECK(std::find(top.begin(), top.end(), mid.start) != top.end());
        std::size_t scored = 0;
        for (const auto& s : mid.scores_fine) scored += s.has_value();
        CHECK(scored == std::min<std::size_t>(3, r));
        CHECK(mid.start + mid.snippet.size() <= r);
        CHECK(mid.snippet.size() == std::min<std::size_t>(3, r - mid.start));
        CHECK(mid.snippet[0] == doc.sentences[mid.start]);

        auto coarse_only = extract_snippet(doc.query, doc, cache, p.coarse(), nullptr, {3, 2});
        CHECK(coarse_only.provenance == Provenance::CoarseOnly);
        CHECK(coarse_only.start == top_k(coarse_only.scores_coarse, 1)[0]);
    }
}

TEST_CASE("extract_snippet error cases") {
    auto p = random_pipeline();
    auto corpus = synth_examples(9, 5);
    auto cache = build_cache(p.coarse(), corpus);
    ExtractionExample unknown{"nope", "q", "t", {"a"}, std::nullopt};
    CHECK_THROWS_AS(extract_snippet("q", unknown, cache, p.coarse(), nullptr), NotFoundError);

    auto other = random_pipeline(99);
    CHECK_THROWS_AS(extract_snippet("q", corpus[0], cache, other.coarse(), nullptr), StaleCacheError);

    auto shorter = corpus[0];
    shorter.sentences.pop_back();
    CHECK_THROWS_AS(extract_snippet("q", shorter, cache, p.coarse(), nullptr), StaleCacheError);

    CHECK_THROWS_AS(extract_snippet("q", corpus[0], cache, p.coarse(), nullptr, {0, 2}), PreconditionError);
}

TEST_CASE("single-stage extraction") {
    auto model = make_model(tiny_config(ModelKind::DeepQSE), synth_vocab());
    auto& deep = static_cast<DeepQSEModel&>(*model);
    auto doc = synth_examples(4, 1)[0];
    auto res = extract_snippet_single(doc.query, doc, deep, 50);
    CHECK(res.provenance == Provenance::SingleStage);
    CHECK(res.snippet.size() == doc.sentences.size() - res.start);
    CHECK(res.start == top_k(deep.infer(deep.prepare(doc)), 1)[0]);

    ExtractionExample same{"s", "w1", "w2", {"w3 w4", "w3 w4", "w3 w4"}, std::nullopt};
    // Identical sentences can still score differently through position embeddings,
    // so the tie rule is checked directly on the scores.
    auto sres = extract_snippet_single("w1", same, deep, 2);
    std::vector<double> fine;
    for (const auto& s : sres.scores_fine) fine.push_back(*s);
    CHECK(sres.start == top_k(fine, 1)[0]);

    ExtractionExample empty{"e", "q", "t", {}, std::nullopt};
    CHECK_THROWS_AS(extract_snippet_single("q", empty, deep, 2), PreconditionError);
}

TEST_CASE("snippet window clips at the document end") {
    std::vector<std::string> s{"a", "b", "c"};
    CHECK(snippet_window(s, 0, 2) == std::vector<std::string>{"a", "b"});
    CHECK(snippet_window(s, 2, 2) == std::vector<std::string>{"c"});
    CHECK(snippet_window(s, 1, 9) == std::vector<std::string>{"b", "c"});
    CHECK_THROWS_AS(snippet_window(s, 3, 1), PreconditionError);
    CHECK_THROWS_AS(snippet_window(s, 0, 0), PreconditionError);
}

TEST_CASE("snippet result JSON carries every field") {
    SnippetResult r;
    r.doc_id = "d";
    r.start = 1;
    r.snippet = {"x", "y"};
    r.scores_coarse = {0.5, 1.5};
    r.scores_fine = {std::nullopt, 2.0};
    r.provenance = Provenance::TwoStage;
    auto j = nlohmann::json::parse(r.to_json());
    CHECK(j["doc_id"] == "d");
    CHECK(j["start"] == 1);
    CHECK(j["snippet"].size() == 2);
    CHECK(j["scores_coarse"][1] == 1.5);
    CHECK(j["scores_fine"][0].is_null());
    CHECK(j["scores_fine"][1] == 2.0);
    CHECK(j["provenance"] == "two-stage");
    CHECK(to_string(Provenance::CoarseOnly) == "coarse-only");
    CHECK(to_string(Provenance::SingleStage) == "single-stage");
}
