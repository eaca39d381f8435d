#include "snipforge/cost_model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "json.hpp"
#include "snipforge/flops.hpp"

namespace snipforge {

namespace {

using u64 = std::uint64_t;

// [CLS] f1 [SEP] f2 [SEP] ..., each field cut to its cap, the whole cut to max_positions.
u64 field_length(std::initializer_list<std::pair<std::size_t, std::size_t>> fields, std::size_t total_cap) {
    u64 n = 1;
    for (const auto& [tokens, cap] : fields) n += std::min(tokens, cap) + 1;
    return std::min<u64>(n, total_cap);
}

u64 attention_flops(u64 n, u64 m, u64 d, u64 h) {
    return 2 * n * m * d + flops::kAttentionScalePerElement * n * m * h + flops::kSoftmaxPerElement * n * m * h +
           2 * n * m * d;
}

u64 block_flops(const EncoderConfig& cfg, u64 n, u64 m) {
    const u64 d = cfg.dim, f = cfg.ff_dim, h = cfg.heads;
    const u64 ln = flops::kLayerNormPerElement * n * d;
    const u64 linear_dd = 2 * n * d * d + n * d;
    return ln + 3 * linear_dd + attention_flops(n, m, d, h) + linear_dd + n * d  // attention half
           + ln + (2 * n * d * f + n * f) + flops::kGeluPerElement * n * f + (2 * n * f * d + n * d) + n * d;
}

}  // namespace

std::string to_string(PipelineKind kind) {
    switch (kind) {
        case PipelineKind::DeepQSE: return "deepqse";
        case PipelineKind::Efficient: return "efficient";
        case PipelineKind::EfficientNoCoarse: return "efficient_no_coarse";
        case PipelineKind::EfficientNoFine: return "efficient_no_fine";
        case PipelineKind::EfficientNoCross: return "efficient_no_cross";
    }
    return "unknown";
}

PipelineKind parse_pipeline_kind(std::string_view name) {
    for (auto k : {PipelineKind::DeepQSE, PipelineKind::Efficient, PipelineKind::EfficientNoCoarse,
                   PipelineKind::EfficientNoFine, PipelineKind::EfficientNoCross}) {
        if (to_string(k) == name) return k;
    }
    throw PreconditionError("unknown pipeline '" + std::string(name) +
                            "' (expected deepqse, efficient, efficient_no_coarse, efficient_no_fine or "
                            "efficient_no_cross)");
}

FlopsQuery FlopsQuery::at_caps(const EncoderConfig& encoder, const LengthBudget& lengths, std::size_t r,
                               std::size_t k) {
    FlopsQuery q;
    q.encoder = encoder;
    q.lengths = lengths;
    q.query_tokens = lengths.max_query;
    q.title_tokens = lengths.max_title;
    q.sentence_tokens = lengths.max_sentence;
    q.sentences = r;
    q.candidates = k;
    return q;
}

std::uint64_t encoder_pass_flops(const EncoderConfig& cfg, std::size_t tokens, std::size_t extra_keys) {
    const u64 n = tokens, d = cfg.dim;
    u64 total = 2 * n * d;  // token + position + segment sums
    for (std::size_t l = 0; l < cfg.layers; ++l) total += block_flops(cfg, n, n + extra_keys);
    return total + flops::kLayerNormPerElement * n * d;
}

std::uint64_t relevance_flops(const EncoderConfig& cfg, std::size_t sentences, bool with_context) {
    const u64 m = sentences, d = cfg.dim;
    u64 total = 0;
    if (with_context) {
        const u64 rows = m + 1;
        total += rows * d;
        for (std::size_t l = 0; l < cfg.relevance_layers; ++l) total += block_flops(cfg, rows, rows);
        total += flops::kLayerNormPerElement * rows * d;
    }
    total += 2 * m * d * d + m * d + flops::kGeluPerElement * m * d;
    total += 2 * m * d + m;
    return total;
}

FlopsEstimate flops_estimate(PipelineKind kind, const FlopsQuery& q) {
    q.encoder.validate();
    const std::size_t r = std::min(q.sentences, q.lengths.max_sentences);
    if (r == 0) throw PreconditionError("flops: R must be >= 1");
    const std::size_t k = std::min(q.candidates, r);
    const std::size_t cap = q.encoder.max_positions;
    const auto& L = q.lengths;
    const u64 qt = field_length({{q.query_tokens, L.max_query}, {q.title_tokens, L.max_title}}, cap);
    const u64 joint = field_length(
        {{q.title_tokens, L.max_title}, {q.query_tokens, L.max_query}, {q.sentence_tokens, L.max_sentence}}, cap);
    const u64 title_sentence = field_length({{q.title_tokens, L.max_title}, {q.sentence_tokens, L.max_sentence}}, cap);
    const u64 sentence = field_length({{q.sentence_tokens, L.max_sentence}}, cap);

    FlopsEstimate e;
    auto& c = e.components;
    const auto& enc = q.encoder;
    auto coarse_stage = [&] {
        c["coarse_query_encoder"] = encoder_pass_flops(enc, qt);
        c["coarse_relevance"] = relevance_flops(enc, r);
        c["offline_sentence_encoder"] = r * encoder_pass_flops(enc, title_sentence);
    };
    auto fine_stage = [&](std::size_t m, bool cross) {
        if (m == 0) return;
        c["fine_query_encoder"] = encoder_pass_flops(enc, qt);
        c["fine_sentence_encoder"] = m * (cross ? encoder_pass_flops(enc, sentence, qt) : encoder_pass_flops(enc, joint));
        c["fine_relevance"] = relevance_flops(enc, m);
    };
    switch (kind) {
        case PipelineKind::DeepQSE:
            c["query_encoder"] = encoder_pass_flops(enc, qt);
            c["sentence_encoder"] = r * encoder_pass_flops(enc, joint);
            c["relevance"] = relevance_flops(enc, r);
            break;
        case PipelineKind::Efficient:
            coarse_stage();
            fine_stage(k, true);
            break;
        case PipelineKind::EfficientNoCoarse: fine_stage(r, true); break;
        case PipelineKind::EfficientNoFine: coarse_stage(); break;
        case PipelineKind::EfficientNoCross:
            coarse_stage();
            fine_stage(k, false);
            break;
    }
    for (const auto& [name, v] : c) (name.rfind("offline_", 0) == 0 ? e.offline : e.online) += v;
    return e;
}

std::string FlopsEstimate::to_json() const {
    nlohmann::ordered_json j;
    j["online"] = online;
    j["offline"] = offline;
    j["components"] = components;
    return j.dump();
}

double nearest_rank_percentile(std::vector<double> values, double p) {
    if (values.empty()) throw PreconditionError("percentile of an empty sample");
    std::sort(values.begin(), values.end());
    const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(values.size())));
    return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

LatencyReport latency_bench(const Request& request, const std::vector<ExtractionExample>& sample,
                            std::size_t repetitions, std::size_t warmup) {
    if (sample.empty()) throw PreconditionError("latency bench: empty sample");
    if (repetitions < 1) throw PreconditionError("latency bench: repetitions must be >= 1");
    if (warmup < 3) throw PreconditionError("latency bench: at least 3 warmup passes");
    for (std::size_t w = 0; w < warmup; ++w) {
        for (const auto& ex : sample) request(ex);
    }
    LatencyReport report;
    report.requests = sample.size();
    report.repetitions = repetitions;
    report.warmup = warmup;
    using clock = std::chrono::steady_clock;
    for (std::size_t rep = 0; rep < repetitions; ++rep) {
        const auto t0 = clock::now();
        for (const auto& ex : sample) request(ex);
        const std::chrono::duration<double, std::milli> elapsed = clock::now() - t0;
        report.samples_ms.push_back(elapsed.count() / static_cast<double>(sample.size()));
    }
    report.p50_ms = nearest_rank_percentile(report.samples_ms, 50.0);
    report.p95_ms = nearest_rank_percentile(report.samples_ms, 95.0);
    return report;
}

std::string LatencyReport::to_json() const {
    nlohmann::ordered_json j;
    j["p50_ms"] = p50_ms;
    j["p95_ms"] = p95_ms;
    j["requests"] = requests;
    j["repetitions"] = repetitions;
    j["warmup"] = warmup;
    j["samples_ms"] = samples_ms;
    return j.dump();
}

}  // namespace snipforge
