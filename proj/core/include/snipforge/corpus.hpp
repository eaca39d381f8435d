#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "snipforge/text.hpp"

namespace snipforge {

struct CorpusStats {
    std::size_t loaded = 0;
    std::size_t truncated_documents = 0;      // more than R sentences, cut to R
    std::size_t skipped_label_out_of_range = 0;
    std::size_t skipped_empty_documents = 0;  // no sentence left after dropping empties
    std::size_t dropped_empty_sentences = 0;
};

// Streams ExtractionExample records from a JSONL file:
//   {"id": str, "query": str, "title": str, "sentences": [str], "label": int?}
// Blank lines are ignored; any other malformed line throws FormatError naming it.
class CorpusReader {
public:
    CorpusReader(const std::string& path, std::size_t max_sentences);

    std::optional<ExtractionExample> next();
    const CorpusStats& stats() const { return stats_; }

private:
    std::ifstream in_;
    std::string path_;
    std::size_t max_sentences_;
    std::size_t line_number_ = 0;
    CorpusStats stats_;
};

std::vector<ExtractionExample> load_corpus(const std::string& path, std::size_t max_sentences,
                                           CorpusStats* stats = nullptr);

std::string to_json_line(const ExtractionExample& example);
void write_corpus(const std::string& path, const std::vector<ExtractionExample>& examples);

// Generator for the synthetic snippet task. Words are "w0".."w{N-1}" with
// N = vocab_size - special tokens. Each document has one labeled sentence that
// carries >= 2 query words and >= 1 title word. Optional decoys make purely
// lexical or purely local scoring insufficient:
//   query decoy: as many or more query words than the label, no title word
//   title decoy: title words and at most one query word
//   echo: a later sentence that also qualifies; the label is the earliest one
// With all decoy rates at zero every distractor holds at most one query word.
struct SynthConfig {
    std::size_t vocab_size = 200;
    std::size_t min_sentences = 4;
    std::size_t max_sentences = 12;
    std::size_t min_query_words = 2;
    std::size_t max_query_words = 3;
    std::size_t title_words = 3;
    std::size_t min_sentence_words = 5;
    std::size_t max_sentence_words = 9;
    double query_decoy_rate = 0.5;
    double title_decoy_rate = 0.5;
    double echo_rate = 0.25;
    double filler_query_word_rate = 0.3;
    double title_decoy_query_word_rate = 0.0;

    void validate() const;
};

std::vector<ExtractionExample> synth_examples(std::uint64_t seed, std::size_t n_docs,
                                              const SynthConfig& config = {});
void synth_corpus(std::uint64_t seed, std::size_t n_docs, const std::string& path,
                  const SynthConfig& config = {});

// Vocabulary covering every synthetic word, in generator id order.
Vocab synth_vocab(const SynthConfig& config = {});

}  // namespace snipforge
