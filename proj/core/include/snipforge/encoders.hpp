#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "snipforge/params.hpp"
#include "snipforge/tensor.hpp"
#include "snipforge/text.hpp"

namespace snipforge {

class Rng;

struct EncoderConfig {
    std::size_t dim = 32;
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t ff_dim = 64;
    std::size_t max_positions = 128;
    std::size_t vocab_size = 0;
    // Document-aware relevance encoder depth and position table size (max(R, K) + 1).
    std::size_t relevance_layers = 1;
    std::size_t relevance_positions = 161;
    double dropout = 0.1;

    void validate() const;
};

// Training-time knobs threaded through a forward pass. The default is inference:
// no dropout, fully deterministic.
struct ForwardContext {
    bool training = false;
    double dropout = 0.0;
    Rng* rng = nullptr;
    // When set, every attention call records its probabilities here (last call wins).
    AttentionTrace* trace = nullptr;
};

struct Linear {
    Tensor weight;  // [in x out]
    Tensor bias;    // [out]

    static Linear create(ParamStore& store, const std::string& name, std::size_t in,
                         std::size_t out, Rng& rng);
    Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;

    static LayerNormParams create(ParamStore& store, const std::string& name, std::size_t dim);
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

// Pre-LN block: h + Attn(LN(h)), then h + FFN(LN(h)).
struct BlockParams {
    LayerNormParams attn_norm;
    Linear query;
    Linear key;
    Linear value;
    Linear output;
    LayerNormParams ff_norm;
    Linear ff_in;
    Linear ff_out;

    static BlockParams create(ParamStore& store, const std::string& prefix,
                              const EncoderConfig& cfg, Rng& rng);
};

// Keys and values one attention layer exposes to a Cross Transformer block.
struct LayerKV {
    Tensor keys;    // [q_len x d]
    Tensor values;  // [q_len x d]
};

struct QueryKV {
    std::vector<LayerKV> layers;
    Tensor representation;  // final hidden state of the first token, [d]
    Mask mask;              // per query token

    std::size_t length() const { return mask.size(); }
    // q_len = 0 stand-in: the Cross Transformer then reduces to plain self-attention.
    static QueryKV empty(std::size_t layers, std::size_t dim);
};

// Standard block. When `capture` is set, the block's own K/V projections are stored there.
Tensor transformer_block(const BlockParams& block, const Tensor& hidden, const Mask& mask,
                         std::size_t heads, const ForwardContext& ctx, LayerKV* capture = nullptr);

// Queries from the sentence only; keys/values are query-side K/V concatenated with the
// sentence's own projections. Query tokens are attended to but produce no rows.
Tensor cross_transformer_block(const BlockParams& block, const Tensor& sentence_hidden,
                               const LayerKV& query_kv, const Mask& sentence_mask,
                               const Mask& query_mask, std::size_t heads,
                               const ForwardContext& ctx);

// Token + position + segment embeddings followed by L blocks and a final LayerNorm.
class TextEncoder {
public:
    TextEncoder() = default;
    TextEncoder(ParamStore& store, const std::string& prefix, const EncoderConfig& cfg, Rng& rng);

    // Token + position + segment embeddings. Dropout is applied inside the blocks only.
    Tensor embed(const EncodedField& field) const;
    // Final hidden states [n x d]. With `kv`, layer i's K/V (from its normalized input) are appended.
    Tensor encode(const EncodedField& field, const ForwardContext& ctx,
                  std::vector<LayerKV>* kv = nullptr) const;
    // Final hidden states of a sentence run through Cross Transformer blocks.
    Tensor encode_cross(const EncodedField& field, const QueryKV& query_kv,
                        const ForwardContext& ctx) const;

    const EncoderConfig& config() const { return cfg_; }
    const std::vector<BlockParams>& blocks() const { return blocks_; }

private:
    EncoderConfig cfg_;
    Tensor token_embeddings_;
    Tensor position_embeddings_;
    Tensor segment_embeddings_;
    std::vector<BlockParams> blocks_;
    LayerNormParams final_norm_;
};

// Transformer over [query rep; sentence reps] + learned positions, then a
// d -> d -> 1 GELU head per sentence. Without context it reduces to the head
// applied to each sentence representation alone.
class RelevanceEncoder {
public:
    RelevanceEncoder() = default;
    RelevanceEncoder(ParamStore& store, const std::string& prefix, const EncoderConfig& cfg,
                     Rng& rng, bool with_context = true);

    // `positions[i]` is the original document index of sentence row i; the
    // query sits at position 0 and sentence i at positions[i] + 1.
    Tensor score(const Tensor& query_rep, const Tensor& sentence_reps,
                 const std::vector<std::size_t>& positions, const Mask& valid,
                 const ForwardContext& ctx) const;

    bool with_context() const { return with_context_; }

private:
    EncoderConfig cfg_;
    bool with_context_ = true;
    Tensor position_embeddings_;
    std::vector<BlockParams> blocks_;
    LayerNormParams final_norm_;
    Linear head_hidden_;
    Linear head_out_;
};

// The named encoder entry points.
QueryKV encode_query(const TextEncoder& encoder, const EncodedField& query_title,
                     const ForwardContext& ctx = {});
Tensor encode_sentence_cross(const TextEncoder& encoder, const EncodedField& sentence,
                             const QueryKV& query_kv, const ForwardContext& ctx = {});
Tensor encode_sentence_joint(const TextEncoder& encoder, const EncodedField& title_query_sentence,
                             const ForwardContext& ctx = {});
Tensor encode_sentence_plain(const TextEncoder& encoder, const EncodedField& title_sentence,
                             const ForwardContext& ctx = {});

struct RelevanceInput {
    Tensor query_rep;                    // [d]
    Tensor sentence_reps;                // [m x d]
    std::vector<std::size_t> positions;  // original sentence indices
    Mask valid;                          // length m
};
Tensor relevance_encode(const RelevanceEncoder& encoder, const RelevanceInput& input,
                        const ForwardContext& ctx = {});

}  // namespace snipforge
