#include "snipforge/text.hpp"

#include <algorithm>
#include <fstream>
#include <map>

namespace snipforge {

namespace {

bool is_unicode_space(char32_t cp) {
    switch (cp) {
        case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
        case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
        case 0x202F: case 0x205F: case 0x3000:
            return true;
        default:
            return cp >= 0x2000 && cp <= 0x200A;
    }
}

// Decodes one UTF-8 sequence at `pos`; malformed bytes decode as themselves.
char32_t decode_utf8(std::string_view s, std::size_t pos, std::size_t& length) {
    const auto b0 = static_cast<unsigned char>(s[pos]);
    auto cont = [&](std::size_t k) -> int {
        if (pos + k >= s.size()) return -1;
        const auto b = static_cast<unsigned char>(s[pos + k]);
        return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
    };
    if (b0 < 0x80) {
        length = 1;
        return b0;
    }
    if ((b0 & 0xE0) == 0xC0) {
        const int c1 = cont(1);
        if (c1 >= 0) {
            length = 2;
            return static_cast<char32_t>(((b0 & 0x1F) << 6) | c1);
        }
    } else if ((b0 & 0xF0) == 0xE0) {
        const int c1 = cont(1), c2 = cont(2);
        if (c1 >= 0 && c2 >= 0) {
            length = 3;
            return static_cast<char32_t>(((b0 & 0x0F) << 12) | (c1 << 6) | c2);
        }
    } else if ((b0 & 0xF8) == 0xF0) {
        const int c1 = cont(1), c2 = cont(2), c3 = cont(3);
        if (c1 >= 0 && c2 >= 0 && c3 >= 0) {
            length = 4;
            return static_cast<char32_t>(((b0 & 0x07) << 18) | (c1 << 12) | (c2 << 6) | c3);
        }
    }
    length = 1;
    return b0;
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t len = 1;
        const char32_t cp = decode_utf8(text, pos, len);
        if (is_unicode_space(cp)) {
            if (!current.empty()) words.push_back(std::move(current));
            current.clear();
        } else if (len == 1) {
            char c = text[pos];
            if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
            current.push_back(c);
        } else {
            current.append(text.substr(pos, len));
        }
        pos += len;
    }
    if (!current.empty()) words.push_back(std::move(current));
    return words;
}

Vocab::Vocab(std::vector<std::string> words, std::size_t hash_buckets)
    : words_(std::move(words)), hash_buckets_(hash_buckets) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (words_[i].empty()) throw FormatError("vocab: empty token at line " + std::to_string(i + 1));
        if (!index_.emplace(words_[i], kNumSpecialTokens + static_cast<int>(i)).second) {
            throw FormatError("vocab: duplicate token '" + words_[i] + "'");
        }
    }
}

Vocab Vocab::from_texts(const std::vector<std::string>& texts, std::size_t max_words,
                        std::size_t hash_buckets) {
    std::map<std::string, std::size_t> counts;
    for (const auto& t : texts)
        for (auto& w : split_words(t)) ++counts[w];
    std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(), counts.end());
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    if (max_words && ordered.size() > max_words) ordered.resize(max_words);
    std::vector<std::string> words;
    words.reserve(ordered.size());
    for (auto& [w, c] : ordered) words.push_back(w);
    return Vocab(std::move(words), hash_buckets);
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("cannot open vocab file " + path);
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        words.push_back(line);
    }
    return Vocab(std::move(words));
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write vocab file " + path);
    for (const auto& w : words_) out << w << '\n';
}

int Vocab::id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it != index_.end()) return it->second;
    if (hash_buckets_ == 0) return kUnkId;
    return kNumSpecialTokens + static_cast<int>(words_.size()) +
           static_cast<int>(fnv1a(word) % hash_buckets_);
}

std::string Vocab::token(int id) const {
    switch (id) {
        case kPadId: return "[PAD]";
        case kClsId: return "[CLS]";
        case kSepId: return "[SEP]";
        case kUnkId: return "[UNK]";
        default: break;
    }
    const auto idx = static_cast<std::size_t>(id - kNumSpecialTokens);
    if (id < 0 || static_cast<std::size_t>(id) >= size()) {
        throw DimensionError("vocab: id " + std::to_string(id) + " out of range");
    }
    if (idx < words_.size()) return words_[idx];
    return "[HASH" + std::to_string(idx - words_.size()) + "]";
}

std::vector<int> tokenize(std::string_view text, const Vocab& vocab) {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
    return ids;
}

void LengthBudget::validate() const {
    if (max_query == 0 || max_title == 0 || max_sentence == 0 || max_sentences == 0) {
        throw PreconditionError("length budget entries must all be positive");
    }
}

TokenizedExample tokenize_example(const ExtractionExample& example, const Vocab& vocab) {
    TokenizedExample out;
    out.id = example.id;
    out.query = tokenize(example.query, vocab);
    out.title = tokenize(example.title, vocab);
    out.sentences.reserve(example.sentences.size());
    for (const auto& s : example.sentences) out.sentences.push_back(tokenize(s, vocab));
    out.gold_start = example.gold_start;
    return out;
}

std::size_t EncodedField::valid_length() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

EncodedField encode_concat(const std::vector<FieldInput>& fields, std::size_t total_cap,
                           std::size_t pad_to) {
    if (fields.empty()) throw PreconditionError("encode_concat: no fields");
    if (total_cap < 1) throw PreconditionError("encode_concat: total_cap must be >= 1");
    EncodedField out;
    out.ids.push_back(kClsId);
    out.segments.push_back(static_cast<int>(fields.front().segment));
    for (const auto& f : fields) {
        const std::size_t keep = std::min(f.cap, f.ids.size());
        out.ids.insert(out.ids.end(), f.ids.begin(), f.ids.begin() + static_cast<std::ptrdiff_t>(keep));
        out.ids.push_back(kSepId);
        out.segments.insert(out.segments.end(), keep + 1, static_cast<int>(f.segment));
    }
    if (out.ids.size() > total_cap) {
        out.ids.resize(total_cap);
        out.segments.resize(total_cap);
    }
    out.mask.assign(out.ids.size(), true);
    if (pad_to > out.ids.size()) {
        const std::size_t extra = pad_to - out.ids.size();
        out.ids.insert(out.ids.end(), extra, kPadId);
        out.segments.insert(out.segments.end(), extra, out.segments.back());
        out.mask.insert(out.mask.end(), extra, false);
    }
    return out;
}

EncodedField encode_concat(const std::vector<TextField>& fields, const Vocab& vocab,
                           std::size_t total_cap, std::size_t pad_to) {
    std::vector<FieldInput> inputs;
    inputs.reserve(fields.size());
    for (const auto& f : fields) inputs.push_back({tokenize(f.text, vocab), f.cap, f.segment});
    return encode_concat(inputs, total_cap, pad_to);
}

}  // namespace snipforge
