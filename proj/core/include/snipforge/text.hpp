#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "snipforge/tensor.hpp"

namespace snipforge {

inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kSepId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumSpecialTokens = 4;

enum class Segment : int { Query = 0, Title = 1, Sentence = 2 };
inline constexpr std::size_t kNumSegments = 3;

// Lowercases ASCII letters and splits on Unicode whitespace (UTF-8 input).
std::vector<std::string> split_words(std::string_view text);

// Token <-> id map with fixed special ids PAD=0, CLS=1, SEP=2, UNK=3. Regular
// tokens occupy [4, 4 + words). With hash buckets enabled, unknown words map
// to one of `hash_buckets` ids after the regular range instead of UNK.
class Vocab {
public:
    Vocab() = default;
    explicit Vocab(std::vector<std::string> words, std::size_t hash_buckets = 0);

    // Words ordered by descending frequency then lexicographically.
    static Vocab from_texts(const std::vector<std::string>& texts, std::size_t max_words = 0,
                            std::size_t hash_buckets = 0);
    static Vocab load(const std::string& path);
    void save(const std::string& path) const;

    int id(std::string_view word) const;
    std::string token(int id) const;
    std::size_t size() const { return kNumSpecialTokens + words_.size() + hash_buckets_; }
    std::size_t hash_buckets() const { return hash_buckets_; }
    const std::vector<std::string>& words() const { return words_; }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
    std::size_t hash_buckets_ = 0;
};

std::vector<int> tokenize(std::string_view text, const Vocab& vocab);

struct LengthBudget {
    std::size_t max_query = 16;
    std::size_t max_title = 32;
    std::size_t max_sentence = 64;
    std::size_t max_sentences = 160;

    void validate() const;
};

struct ExtractionExample {
    std::string id;
    std::string query;
    std::string title;
    std::vector<std::string> sentences;
    std::optional<std::size_t> gold_start;
};

// Pre-tokenized example; what the models consume.
struct TokenizedExample {
    std::string id;
    std::vector<int> query;
    std::vector<int> title;
    std::vector<std::vector<int>> sentences;
    std::optional<std::size_t> gold_start;
};

TokenizedExample tokenize_example(const ExtractionExample& example, const Vocab& vocab);

struct FieldInput {
    std::vector<int> ids;
    std::size_t cap;
    Segment segment;
};

struct EncodedField {
    std::vector<int> ids;
    Mask mask;
    std::vector<int> segments;

    std::size_t length() const { return ids.size(); }
    // Number of true mask entries.
    std::size_t valid_length() const;
};

// [CLS] f1 [SEP] f2 [SEP] ... with every field cut to its own cap first, then the
// whole sequence cut to `total_cap` (CLS always survives). When `pad_to` exceeds
// the length, PAD positions with a false mask are appended.
EncodedField encode_concat(const std::vector<FieldInput>& fields, std::size_t total_cap,
                           std::size_t pad_to = 0);

struct TextField {
    std::string text;
    std::size_t cap;
    Segment segment;
};
EncodedField encode_concat(const std::vector<TextField>& fields, const Vocab& vocab,
                           std::size_t total_cap, std::size_t pad_to = 0);

}  // namespace snipforge
