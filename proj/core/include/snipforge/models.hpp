#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "snipforge/encoders.hpp"
#include "snipforge/text.hpp"

namespace snipforge {

enum class ModelKind { DeepQSE, Coarse, Fine };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);

// Input-removal switches. no_dare swaps the document-aware relevance encoder
// for a per-sentence score head.
struct Ablation {
    bool no_title = false;
    bool no_query = false;
    bool no_dare = false;
};

struct ModelConfig {
    ModelKind kind = ModelKind::DeepQSE;
    EncoderConfig encoder;
    LengthBudget lengths;
    Ablation ablation;
    // Fine stage only: false replaces the Cross Transformer with the joint
    // (title, query, sentence) encoder applied to each candidate.
    bool cross_transformer = true;
    std::size_t candidates = 20;  // K
    std::uint64_t seed = 7;

    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(std::string_view text);
};

using Fingerprint = std::array<std::uint8_t, 32>;
std::string to_hex(const Fingerprint& fp);
Fingerprint sha256(std::string_view bytes);

// Common surface of the three trainable scorers. Scores are produced for a
// subset of document sentences (ascending indices); each keeps its original
// document position in the relevance encoder.
class SnippetModel {
public:
    SnippetModel(ModelConfig config, Vocab vocab);
    virtual ~SnippetModel() = default;
    SnippetModel(const SnippetModel&) = delete;
    SnippetModel& operator=(const SnippetModel&) = delete;

    virtual Tensor score(const TokenizedExample& example, const std::vector<std::size_t>& sentences,
                         const ForwardContext& ctx) const = 0;

    Tensor score_all(const TokenizedExample& example, const ForwardContext& ctx = {}) const;
    // Gradient-free scores over every usable sentence.
    std::vector<double> infer(const TokenizedExample& example) const;

    // Tokenizes with this model's vocabulary and truncates to R sentences.
    TokenizedExample prepare(const ExtractionExample& example) const;
    std::size_t usable_sentences(const TokenizedExample& example) const;

    ModelKind kind() const { return config_.kind; }
    const ModelConfig& config() const { return config_; }
    const Vocab& vocab() const { return vocab_; }
    // Mutable access drops any cached fingerprint.
    ParamStore& params() {
        fingerprint_.reset();
        return params_;
    }
    const ParamStore& params() const { return params_; }

    // SHA-256 of the checkpoint bytes this model was loaded from or saved to;
    // otherwise of its canonical serialization.
    Fingerprint fingerprint() const;
    void set_fingerprint(const Fingerprint& fp) { fingerprint_ = fp; }

protected:
    EncodedField query_title_field(const TokenizedExample& example) const;
    EncodedField joint_field(const TokenizedExample& example, std::size_t sentence) const;
    EncodedField title_sentence_field(const std::vector<int>& title,
                                      const std::vector<int>& sentence) const;
    EncodedField sentence_field(const std::vector<int>& sentence) const;
    Rng init_rng() const;

    ModelConfig config_;
    Vocab vocab_;
    ParamStore params_;
    std::optional<Fingerprint> fingerprint_;
};

// Query encoder over (query, title), joint encoder over (title, query, s_i),
// document-aware relevance encoder over [g_q; g_s^1..R].
class DeepQSEModel : public SnippetModel {
public:
    DeepQSEModel(ModelConfig config, Vocab vocab);

    Tensor score(const TokenizedExample& example, const std::vector<std::size_t>& sentences,
                 const ForwardContext& ctx) const override;

    const TextEncoder& query_encoder() const { return query_encoder_; }
    const TextEncoder& sentence_encoder() const { return sentence_encoder_; }
    const RelevanceEncoder& relevance() const { return relevance_; }

private:
    TextEncoder query_encoder_;
    TextEncoder sentence_encoder_;
    RelevanceEncoder relevance_;
};

// Bi-encoder: sentence representations depend on (title, sentence) only and can be cached.
class CoarseSelector : public SnippetModel {
public:
    CoarseSelector(ModelConfig config, Vocab vocab);

    Tensor score(const TokenizedExample& example, const std::vector<std::size_t>& sentences,
                 const ForwardContext& ctx) const override;

    Tensor query_representation(const TokenizedExample& example, const ForwardContext& ctx = {}) const;
    Tensor sentence_representation(const std::vector<int>& title, const std::vector<int>& sentence,
                                   const ForwardContext& ctx = {}) const;
    // [m x d] for the given sentences.
    Tensor sentence_representations(const TokenizedExample& example,
                                    const std::vector<std::size_t>& sentences,
                                    const ForwardContext& ctx = {}) const;
    Tensor score_from_representations(const Tensor& query_rep, const Tensor& sentence_reps,
                                      const std::vector<std::size_t>& positions,
                                      const ForwardContext& ctx = {}) const;

    const TextEncoder& query_encoder() const { return query_encoder_; }
    const TextEncoder& sentence_encoder() const { return sentence_encoder_; }

private:
    TextEncoder query_encoder_;
    TextEncoder sentence_encoder_;
    RelevanceEncoder relevance_;
};

// Query encoder emitting per-layer K/V, Cross Transformer sentence encoder, relevance encoder.
class FineReranker : public SnippetModel {
public:
    FineReranker(ModelConfig config, Vocab vocab);

    Tensor score(const TokenizedExample& example, const std::vector<std::size_t>& sentences,
                 const ForwardContext& ctx) const override;

    QueryKV query_kv(const TokenizedExample& example, const ForwardContext& ctx = {}) const;
    std::size_t candidates() const { return config_.candidates; }

    const TextEncoder& query_encoder() const { return query_encoder_; }
    const TextEncoder& sentence_encoder() const { return sentence_encoder_; }

private:
    TextEncoder query_encoder_;
    TextEncoder sentence_encoder_;
    RelevanceEncoder relevance_;
};

std::unique_ptr<SnippetModel> make_model(const ModelConfig& config, const Vocab& vocab);

// Softmax cross-entropy of the gold sentence against one document's valid sentences.
Tensor loss_softmax_ce(const Tensor& scores, std::size_t gold, const Mask& valid = {});

// Checkpoint: "SNIPCKPT1", u64 LE manifest length, JSON manifest
// {format_version, config, vocab, tensors: [{name, shape, dtype, offset}], blob_bytes},
// then the little-endian f64 blob.
std::string serialize_checkpoint(const SnippetModel& model);
void save_checkpoint(SnippetModel& model, const std::string& path);
std::unique_ptr<SnippetModel> load_checkpoint_bytes(const std::string& bytes);
std::unique_ptr<SnippetModel> load_checkpoint(const std::string& path);

}  // namespace snipforge
