#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "snipforge/corpus.hpp"
#include "snipforge/models.hpp"
#include "snipforge/text.hpp"
#include "test_support.hpp"

using namespace snipforge;
using snipforge::testing::temp_path;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    out << body;
}

std::size_t unique_overlap(const std::string& a, const std::string& b) {
    auto wa = split_words(a);
    auto wb = split_words(b);
    std::set<std::string> sa(wa.begin(), wa.end());
    std::size_t n = 0;
    for (const auto& w : std::set<std::string>(wb.begin(), wb.end())) n += sa.count(w);
    return n;
}

}  // namespace

TEST_CASE("tokenize examples") {
    Vocab vocab({"einstein", "achievement"});
    CHECK(tokenize("", vocab).empty());
    CHECK(tokenize("Einstein achievement", vocab) ==
          std::vector<int>{vocab.id("einstein"), vocab.id("achievement")});
    CHECK(tokenize("zzzunknownzzz", vocab) == std::vector<int>{kUnkId});
    CHECK(tokenize("  EINSTEIN\t\nachievement ", vocab).size() == 2);
}

TEST_CASE("vocab ids are dense with fixed specials") {
    auto vocab = Vocab::from_texts({"b a a", "c b a"});
    CHECK(vocab.size() == kNumSpecialTokens + 3);
    // Frequency order: a(3), b(2), c(1)
    CHECK(vocab.id("a") == 4);
    CHECK(vocab.id("b") == 5);
    CHECK(vocab.id("c") == 6);
    CHECK(vocab.token(kPadId) != vocab.token(kClsId));
    for (int id = 0; id < static_cast<int>(vocab.size()); ++id) {
        if (id >= kNumSpecialTokens) CHECK(vocab.id(vocab.token(id)) == id);
    }

    Vocab hashed({"a"}, 8);
    const int h = hashed.id("never-seen");
    CHECK(h >= kNumSpecialTokens + 1);
    CHECK(h < static_cast<int>(hashed.size()));
    CHECK(hashed.id("never-seen") == h);
}

TEST_CASE("vocab file round trip") {
    auto path = temp_path("vocab.txt");
    Vocab vocab({"x", "y", "z"});
    vocab.save(path);
    auto back = Vocab::load(path);
    CHECK(back.words() == vocab.words());
    CHECK_THROWS_AS(Vocab::load(temp_path("no-such-vocab.txt")), NotFoundError);
}

TEST_CASE("encode_concat examples") {
    auto single = encode_concat({FieldInput{{}, 16, Segment::Query}}, 64);
    CHECK(single.ids == std::vector<int>{kClsId, kSepId});
    CHECK(single.mask == Mask{true, true});

    std::vector<int> query(20);
    for (int i = 0; i < 20; ++i) query[static_cast<std::size_t>(i)] = 100 + i;
    auto q = encode_concat({FieldInput{query, 16, Segment::Query}}, 128);
    CHECK(q.length() == 1 + 16 + 1);
    CHECK(q.ids[16] == 115);
    CHECK(q.ids[17] == kSepId);

    std::vector<int> title(50, 7), sent(90, 8);
    auto joint = encode_concat({FieldInput{title, 32, Segment::Title}, FieldInput{query, 16, Segment::Query},
                                FieldInput{sent, 64, Segment::Sentence}},
                               1000);
    CHECK(joint.length() <= 32 + 16 + 64 + 4);
    CHECK(joint.length() == 32 + 16 + 64 + 4);

    auto cut = encode_concat({FieldInput{sent, 64, Segment::Sentence}}, 10);
    CHECK(cut.length() == 10);
    CHECK(cut.ids[0] == kClsId);

    CHECK_THROWS_AS(encode_concat({FieldInput{{}, 4, Segment::Query}}, 0), PreconditionError);
    CHECK_THROWS_AS(encode_concat(std::vector<FieldInput>{}, 8), PreconditionError);
}

TEST_CASE("encoded fields keep CLS first and padding last") {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<FieldInput> fields;
        const auto n_fields = static_cast<std::size_t>(rng.uniform_int(1, 3));
        for (std::size_t f = 0; f < n_fields; ++f) {
            std::vector<int> ids(static_cast<std::size_t>(rng.uniform_int(0, 20)));
            for (auto& id : ids) id = static_cast<int>(rng.uniform_int(4, 50));
            fields.push_back({ids, static_cast<std::size_t>(rng.uniform_int(1, 12)), Segment::Sentence});
        }
        const auto cap = static_cast<std::size_t>(rng.uniform_int(1, 40));
        const auto pad = static_cast<std::size_t>(rng.uniform_int(0, 50));
        auto enc = encode_concat(fields, cap, pad);
        REQUIRE(enc.ids.size() == enc.mask.size());
        REQUIRE(enc.ids.size() == enc.segments.size());
        CHECK(enc.ids[0] == kClsId);
        CHECK(enc.mask[0]);
        bool seen_pad = false;
        for (std::size_t i = 0; i < enc.length(); ++i) {
            if (enc.ids[i] == kPadId) {
                CHECK_FALSE(enc.mask[i]);
                seen_pad = true;
            } else {
                CHECK_FALSE(seen_pad);
            }
        }
        CHECK(enc.valid_length() <= cap);

        // Re-encoding the surviving field contents never grows the sequence.
        std::vector<FieldInput> again;
        std::vector<int> current;
        std::size_t f = 0;
        for (std::size_t i = 1; i < enc.valid_length(); ++i) {
            if (enc.ids[i] == kSepId) {
                again.push_back({current, fields[f].cap, fields[f].segment});
                current.clear();
                ++f;
            } else {
                current.push_back(enc.ids[i]);
            }
        }
        if (!current.empty() || again.empty()) again.push_back({current, fields[std::min(f, fields.size() - 1)].cap, Segment::Sentence});
        CHECK(encode_concat(again, cap).valid_length() <= enc.valid_length());
    }
}

TEST_CASE("load_corpus examples") {
    const auto path = temp_path("corpus_examples.jsonl");
    std::string body =
        R"({"id":"a","query":"q","title":"t","sentences":["s0","s1","s2"],"label":1})"
        "\n\n";
    std::string long_doc = R"({"id":"b","query":"q","title":"t","sentences":[)";
    for (int i = 0; i < 200; ++i) long_doc += (i ? ",\"x" : "\"x") + std::to_string(i) + "\"";
    long_doc += R"(],"label":180})";
    body += long_doc + "\n";
    body += R"({"id":"c","query":"q","title":"t","sentences":["s0","","s2"],"label":2})"
            "\n";
    write_file(path, body);

    CorpusStats stats;
    auto docs = load_corpus(path, 160, &stats);
    REQUIRE(docs.size() == 2);
    CHECK(docs[0].gold_start == std::optional<std::size_t>(1));
    CHECK(docs[0].sentences.size() == 3);
    CHECK(stats.skipped_label_out_of_range == 1);
    CHECK(docs[1].id == "c");
    CHECK(docs[1].sentences == std::vector<std::string>{"s0", "s2"});
    CHECK(docs[1].gold_start == std::optional<std::size_t>(1));
    CHECK(stats.dropped_empty_sentences == 1);

    write_file(path, "");
    CorpusStats empty_stats;
    CHECK(load_corpus(path, 160, &empty_stats).empty());
    CHECK(empty_stats.loaded == 0);

    write_file(path, R"({"id":"a","query":"q","title":"t","sentences":["s"]})" "\n{not json\n");
    try {
        load_corpus(path, 160);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }

    CHECK_THROWS_AS(load_corpus(temp_path("missing.jsonl"), 160), NotFoundError);
}

TEST_CASE("unlabeled records load without a gold start") {
    const auto path = temp_path("unlabeled.jsonl");
    write_file(path, R"({"id":"u","query":"q","title":"t","sentences":["a","b"]})" "\n");
    auto docs = load_corpus(path, 160);
    REQUIRE(docs.size() == 1);
    CHECK_FALSE(docs[0].gold_start.has_value());
}

TEST_CASE("synth_corpus examples") {
    SynthConfig plain;
    plain.query_decoy_rate = 0.0;
    plain.title_decoy_rate = 0.0;
    plain.echo_rate = 0.0;
    auto one = synth_examples(7, 1, plain);
    REQUIRE(one.size() == 1);
    const auto& doc = one[0];
    const std::size_t gold = *doc.gold_start;
    const std::size_t gold_overlap = unique_overlap(doc.query, doc.sentences[gold]);
    for (std::size_t i = 0; i < doc.sentences.size(); ++i) {
        if (i != gold) CHECK(unique_overlap(doc.query, doc.sentences[i]) < gold_overlap);
    }

    const auto a = temp_path("synth_a.jsonl");
    const auto b = temp_path("synth_b.jsonl");
    synth_corpus(7, 25, a);
    synth_corpus(7, 25, b);
    CHECK(read_file(a) == read_file(b));
    CHECK(sha256(read_file(a)) == sha256(read_file(b)));

    CHECK_THROWS_AS(synth_examples(7, 0), PreconditionError);
    SynthConfig tiny;
    tiny.vocab_size = 6;
    CHECK_THROWS_AS(synth_examples(7, 3, tiny), PreconditionError);
}

TEST_CASE("synthetic label is the earliest sentence with query and title overlap") {
    for (std::uint64_t seed : {1u, 7u, 19u}) {
        for (const auto& doc : synth_examples(seed, 150)) {
            REQUIRE(doc.gold_start.has_value());
            std::optional<std::size_t> first;
            for (std::size_t i = 0; i < doc.sentences.size() && !first; ++i) {
                if (unique_overlap(doc.query, doc.sentences[i]) >= 2 &&
                    unique_overlap(doc.title, doc.sentences[i]) >= 1)
                    first = i;
            }
            CHECK(first == doc.gold_start);
        }
    }
}

TEST_CASE("load_corpus(synth_corpus(s, n)) yields n labeled examples") {
    const auto path = temp_path("synth_roundtrip.jsonl");
    synth_corpus(3, 40, path);
    CorpusStats stats;
    auto docs = load_corpus(path, 160, &stats);
    CHECK(docs.size() == 40);
    CHECK(stats.loaded == 40);
    for (const auto& d : docs) {
        REQUIRE(d.gold_start.has_value());
        CHECK(*d.gold_start < d.sentences.size());
    }
    CHECK(docs[5].sentences == synth_examples(3, 40)[5].sentences);
}

TEST_CASE("synthetic vocabulary covers every generated word") {
    auto vocab = synth_vocab();
    for (const auto& doc : synth_examples(2, 30)) {
        auto t = tokenize_example(doc, vocab);
        for (int id : t.query) CHECK(id != kUnkId);
        for (const auto& s : t.sentences)
            for (int id : s) CHECK(id != kUnkId);
    }
}
