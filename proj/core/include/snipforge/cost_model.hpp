#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "snipforge/encoders.hpp"
#include "snipforge/text.hpp"

namespace snipforge {

enum class PipelineKind { DeepQSE, Efficient, EfficientNoCoarse, EfficientNoFine, EfficientNoCross };

std::string to_string(PipelineKind kind);
PipelineKind parse_pipeline_kind(std::string_view name);

// Inputs of the closed-form cost. Token counts are raw word counts; the field
// caps in `lengths` and `encoder.max_positions` are applied as the encoders do.
struct FlopsQuery {
    EncoderConfig encoder;
    LengthBudget lengths;
    std::size_t query_tokens = 0;
    std::size_t title_tokens = 0;
    std::size_t sentence_tokens = 0;  // every sentence
    std::size_t sentences = 0;        // R, capped by lengths.max_sentences
    std::size_t candidates = 0;       // K, capped by R; 0 drops the fine stage

    // Every field filled to its cap.
    static FlopsQuery at_caps(const EncoderConfig& encoder, const LengthBudget& lengths, std::size_t r,
                              std::size_t k);
};

struct FlopsEstimate {
    std::uint64_t online = 0;
    std::uint64_t offline = 0;  // cached coarse sentence encoding, excluded from `online`
    std::map<std::string, std::uint64_t> components;

    std::string to_json() const;
};

FlopsEstimate flops_estimate(PipelineKind kind, const FlopsQuery& query);

// One encoder pass over `tokens` rows attending to `extra_keys` additional
// query-side keys per layer (0 for a plain pass).
std::uint64_t encoder_pass_flops(const EncoderConfig& cfg, std::size_t tokens, std::size_t extra_keys = 0);
std::uint64_t relevance_flops(const EncoderConfig& cfg, std::size_t sentences, bool with_context = true);

struct LatencyReport {
    double p50_ms = 0.0;
    double p95_ms = 0.0;
    std::size_t requests = 0;     // per repetition
    std::size_t repetitions = 0;
    std::size_t warmup = 0;
    std::vector<double> samples_ms;  // mean ms per request, one per repetition

    std::string to_json() const;
};

using Request = std::function<void(const ExtractionExample&)>;

// Times `repetitions` passes over `sample` after `warmup` untimed passes on the
// calling thread. Each pass yields one mean-ms-per-request sample; percentiles
// are nearest-rank over those samples.
LatencyReport latency_bench(const Request& request, const std::vector<ExtractionExample>& sample,
                            std::size_t repetitions, std::size_t warmup = 3);

double nearest_rank_percentile(std::vector<double> values, double p);

}  // namespace snipforge
