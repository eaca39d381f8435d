#include "snipforge/corpus.hpp"

#include <algorithm>
#include <numeric>

#include "json.hpp"
#include "snipforge/rng.hpp"

namespace snipforge {

namespace {

using json = nlohmann::ordered_json;

bool is_blank(const std::string& s) { return split_words(s).empty(); }

[[noreturn]] void fail(const std::string& path, std::size_t line, const std::string& what) {
    throw FormatError(path + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

CorpusReader::CorpusReader(const std::string& path, std::size_t max_sentences)
    : in_(path, std::ios::binary), path_(path), max_sentences_(max_sentences) {
    if (!in_) throw NotFoundError("cannot open corpus " + path);
    if (max_sentences_ == 0) throw PreconditionError("max_sentences must be positive");
}

std::optional<ExtractionExample> CorpusReader::next() {
    std::string line;
    while (std::getline(in_, line)) {
        ++line_number_;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;

        json record;
        try {
            record = json::parse(line);
        } catch (const json::parse_error& e) {
            fail(path_, line_number_, std::string("malformed JSON: ") + e.what());
        }
        if (!record.is_object()) fail(path_, line_number_, "record is not a JSON object");
        for (const char* key : {"id", "query", "title"}) {
            if (!record.contains(key) || !record[key].is_string()) {
                fail(path_, line_number_, std::string("missing or non-string field '") + key + "'");
            }
        }
        if (!record.contains("sentences") || !record["sentences"].is_array()) {
            fail(path_, line_number_, "missing or non-array field 'sentences'");
        }

        ExtractionExample example;
        example.id = record["id"].get<std::string>();
        example.query = record["query"].get<std::string>();
        example.title = record["title"].get<std::string>();

        std::optional<std::int64_t> label;
        if (record.contains("label") && !record["label"].is_null()) {
            if (!record["label"].is_number_integer()) {
                fail(path_, line_number_, "field 'label' must be an integer");
            }
            label = record["label"].get<std::int64_t>();
        }

        // Drop empty sentences, remapping the label onto the surviving indices.
        std::optional<std::int64_t> remapped;
        bool label_dropped = false;
        std::int64_t index = 0;
        for (const auto& s : record["sentences"]) {
            if (!s.is_string()) fail(path_, line_number_, "sentences must be strings");
            auto text = s.get<std::string>();
            if (is_blank(text)) {
                ++stats_.dropped_empty_sentences;
                if (label && *label == index) label_dropped = true;
            } else {
                if (label && *label == index) remapped = static_cast<std::int64_t>(example.sentences.size());
                example.sentences.push_back(std::move(text));
            }
            ++index;
        }
        if (example.sentences.empty()) {
            ++stats_.skipped_empty_documents;
            continue;
        }
        if (example.sentences.size() > max_sentences_) {
            example.sentences.resize(max_sentences_);
            ++stats_.truncated_documents;
        }
        if (label) {
            if (label_dropped || !remapped ||
                static_cast<std::size_t>(*remapped) >= example.sentences.size()) {
                ++stats_.skipped_label_out_of_range;
                continue;
            }
            example.gold_start = static_cast<std::size_t>(*remapped);
        }
        ++stats_.loaded;
        return example;
    }
    return std::nullopt;
}

std::vector<ExtractionExample> load_corpus(const std::string& path, std::size_t max_sentences,
                                           CorpusStats* stats) {
    CorpusReader reader(path, max_sentences);
    std::vector<ExtractionExample> out;
    while (auto ex = reader.next()) out.push_back(std::move(*ex));
    if (stats) *stats = reader.stats();
    return out;
}

std::string to_json_line(const ExtractionExample& example) {
    json record;
    record["id"] = example.id;
    record["query"] = example.query;
    record["title"] = example.title;
    record["sentences"] = example.sentences;
    if (example.gold_start) record["label"] = *example.gold_start;
    return record.dump();
}

void write_corpus(const std::string& path, const std::vector<ExtractionExample>& examples) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write corpus " + path);
    for (const auto& ex : examples) out << to_json_line(ex) << '\n';
    if (!out) throw Error("write failed for " + path);
}

void SynthConfig::validate() const {
    if (vocab_size <= static_cast<std::size_t>(kNumSpecialTokens)) {
        throw PreconditionError("synth: vocab too small");
    }
    const std::size_t words = vocab_size - kNumSpecialTokens;
    if (min_query_words < 2 || min_query_words > max_query_words) {
        throw PreconditionError("synth: query word range must satisfy 2 <= min <= max");
    }
    if (title_words < 1) throw PreconditionError("synth: title needs at least one word");
    if (min_sentences < 4 || min_sentences > max_sentences) {
        throw PreconditionError("synth: sentence count range must satisfy 4 <= min <= max");
    }
    if (min_sentence_words < 1 || min_sentence_words > max_sentence_words) {
        throw PreconditionError("synth: sentence length range invalid");
    }
    // Query and title words are disjoint; fillers come from the rest and one
    // sentence may need max_sentence_words distinct fillers.
    if (words < max_query_words + title_words + max_sentence_words) {
        throw PreconditionError("synth: vocab of " + std::to_string(vocab_size) +
                                " cannot hold query, title and filler words");
    }
    for (double r : {query_decoy_rate, title_decoy_rate, echo_rate, filler_query_word_rate,
                     title_decoy_query_word_rate}) {
        if (r < 0.0 || r > 1.0) throw PreconditionError("synth: rates must lie in [0, 1]");
    }
}

Vocab synth_vocab(const SynthConfig& config) {
    config.validate();
    std::vector<std::string> words;
    for (std::size_t i = 0; i + kNumSpecialTokens < config.vocab_size; ++i) {
        words.push_back("w" + std::to_string(i));
    }
    return Vocab(std::move(words));
}

namespace {

enum class Kind { Label, QueryDecoy, TitleDecoy, Echo, Filler };

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(v[i - 1], v[j]);
    }
}

// `count` distinct picks from `pool`.
std::vector<std::string> sample(const std::vector<std::string>& pool, std::size_t count, Rng& rng) {
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < count; ++i) {
        const auto j = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(pool.size()) - 1));
        std::swap(idx[i], idx[j]);
    }
    std::vector<std::string> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(pool[idx[i]]);
    return out;
}

std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out.push_back(' ');
        out += w;
    }
    return out;
}

}  // namespace

std::vector<ExtractionExample> synth_examples(std::uint64_t seed, std::size_t n_docs,
                                              const SynthConfig& config) {
    if (n_docs < 1) throw PreconditionError("synth: n_docs must be >= 1");
    config.validate();
    const Vocab vocab = synth_vocab(config);
    const auto& all_words = vocab.words();
    const Rng root = Rng(seed).split("synth");

    auto pick = [](Rng& rng, std::size_t lo, std::size_t hi) {
        return static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
    };

    std::vector<ExtractionExample> docs;
    docs.reserve(n_docs);
    for (std::size_t d = 0; d < n_docs; ++d) {
        Rng rng = root.split(static_cast<std::uint64_t>(d));
        const std::size_t n_sent = pick(rng, config.min_sentences, config.max_sentences);
        const std::size_t n_query = pick(rng, config.min_query_words, config.max_query_words);

        auto chosen = sample(all_words, n_query + config.title_words, rng);
        std::vector<std::string> query(chosen.begin(), chosen.begin() + static_cast<std::ptrdiff_t>(n_query));
        std::vector<std::string> title(chosen.begin() + static_cast<std::ptrdiff_t>(n_query), chosen.end());
        std::vector<std::string> fillers;
        for (const auto& w : all_words)
            if (std::find(chosen.begin(), chosen.end(), w) == chosen.end()) fillers.push_back(w);

        std::vector<Kind> kinds{Kind::Label};
        if (rng.bernoulli(config.query_decoy_rate)) kinds.push_back(Kind::QueryDecoy);
        if (rng.bernoulli(config.title_decoy_rate)) kinds.push_back(Kind::TitleDecoy);
        if (rng.bernoulli(config.echo_rate)) kinds.push_back(Kind::Echo);
        while (kinds.size() < n_sent) kinds.push_back(Kind::Filler);
        shuffle(kinds, rng);
        const auto label_pos = static_cast<std::size_t>(
            std::find(kinds.begin(), kinds.end(), Kind::Label) - kinds.begin());
        const auto echo_it = std::find(kinds.begin(), kinds.end(), Kind::Echo);
        if (echo_it != kinds.end() && static_cast<std::size_t>(echo_it - kinds.begin()) < label_pos) {
            std::iter_swap(echo_it, kinds.begin() + static_cast<std::ptrdiff_t>(label_pos));
        }

        const std::size_t label_query_words = pick(rng, 2, n_query);
        const std::size_t max_title_hits = std::min<std::size_t>(2, title.size());

        ExtractionExample ex;
        ex.id = "synth-" + std::to_string(seed) + "-" + std::to_string(d);
        ex.query = join(query);
        ex.title = join(title);
        for (std::size_t pos = 0; pos < kinds.size(); ++pos) {
            std::size_t n_q = 0, n_t = 0;
            switch (kinds[pos]) {
                case Kind::Label:
                    n_q = label_query_words;
                    n_t = pick(rng, 1, max_title_hits);
                    ex.gold_start = pos;
                    break;
                case Kind::QueryDecoy:
                    n_q = pick(rng, label_query_words, n_query);
                    break;
                case Kind::TitleDecoy:
                    n_q = rng.bernoulli(config.title_decoy_query_word_rate) ? 1 : 0;
                    n_t = pick(rng, 1, max_title_hits);
                    break;
                case Kind::Echo:
                    n_q = pick(rng, 2, n_query);
                    n_t = pick(rng, 1, max_title_hits);
                    break;
                case Kind::Filler:
                    n_q = rng.bernoulli(config.filler_query_word_rate) ? 1 : 0;
                    break;
            }
            const std::size_t length =
                std::max(pick(rng, config.min_sentence_words, config.max_sentence_words), n_q + n_t);
            std::vector<std::string> words = sample(query, n_q, rng);
            for (auto& w : sample(title, n_t, rng)) words.push_back(std::move(w));
            for (auto& w : sample(fillers, length - n_q - n_t, rng)) words.push_back(std::move(w));
            shuffle(words, rng);
            ex.sentences.push_back(join(words));
        }
        docs.push_back(std::move(ex));
    }
    return docs;
}

void synth_corpus(std::uint64_t seed, std::size_t n_docs, const std::string& path,
                  const SynthConfig& config) {
    write_corpus(path, synth_examples(seed, n_docs, config));
}

}  // namespace snipforge
