#include "snipforge/encoders.hpp"

#include <algorithm>
#include <cmath>

#include "snipforge/rng.hpp"

namespace snipforge {

namespace {

constexpr double kTokenEmbeddingStd = 1.0;
constexpr double kPositionEmbeddingStd = 0.1;
constexpr double kSegmentEmbeddingStd = 1.0;
constexpr double kQueryKeyInitGain = 2.0;
constexpr double kRelevancePositionScale = 0.3;

// Query and key projections start identical so attention initially favours matching tokens.
void tie_query_key_init(BlockParams& b) {
    auto q = b.query.weight.mutable_data();
    for (auto& x : q) x *= kQueryKeyInitGain;
    auto k = b.key.weight.mutable_data();
    std::copy(q.begin(), q.end(), k.begin());
}

void fill_sinusoidal(Tensor& table, std::size_t rows, std::size_t dim, double scale) {
    auto d = table.mutable_data();
    for (std::size_t p = 0; p < rows; ++p) {
        for (std::size_t i = 0; i < dim; ++i) {
            const double freq = std::pow(1000.0, -static_cast<double>(i / 2 * 2) / static_cast<double>(dim));
            const double angle = static_cast<double>(p) * freq;
            d[p * dim + i] = scale * (i % 2 ? std::cos(angle) : std::sin(angle));
        }
    }
}

Tensor maybe_dropout(const Tensor& x, const ForwardContext& ctx) {
    if (!ctx.training || ctx.dropout <= 0.0) return x;
    if (!ctx.rng) throw PreconditionError("training forward pass requires an rng for dropout");
    return dropout(x, ctx.dropout, *ctx.rng);
}

Tensor feed_forward_residual(const BlockParams& block, const Tensor& hidden,
                             const ForwardContext& ctx) {
    Tensor f = block.ff_out(gelu(block.ff_in(block.ff_norm(hidden))));
    return add(hidden, maybe_dropout(f, ctx));
}

Mask concat_masks(const Mask& a, const Mask& b) {
    Mask out(a);
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

}  // namespace

void EncoderConfig::validate() const {
    if (dim == 0 || heads == 0 || layers == 0 || ff_dim == 0 || max_positions == 0 ||
        vocab_size == 0 || relevance_positions < 2) {
        throw PreconditionError("encoder config: all sizes must be positive");
    }
    if (dim % heads != 0) {
        throw PreconditionError("encoder config: dim " + std::to_string(dim) +
                                " not divisible by heads " + std::to_string(heads));
    }
    if (dropout < 0.0 || dropout >= 1.0) throw PreconditionError("encoder config: dropout in [0, 1)");
}

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in,
                      std::size_t out, Rng& rng) {
    Linear l;
    l.weight = store.xavier(name + ".weight", in, out, rng);
    l.bias = store.constant(name + ".bias", {out}, 0.0);
    return l;
}

LayerNormParams LayerNormParams::create(ParamStore& store, const std::string& name,
                                        std::size_t dim) {
    return {store.constant(name + ".gain", {dim}, 1.0), store.constant(name + ".bias", {dim}, 0.0)};
}

BlockParams BlockParams::create(ParamStore& store, const std::string& prefix,
                                const EncoderConfig& cfg, Rng& rng) {
    BlockParams b;
    b.attn_norm = LayerNormParams::create(store, prefix + ".attn_norm", cfg.dim);
    b.query = Linear::create(store, prefix + ".attn.query", cfg.dim, cfg.dim, rng);
    b.key = Linear::create(store, prefix + ".attn.key", cfg.dim, cfg.dim, rng);
    tie_query_key_init(b);
    b.value = Linear::create(store, prefix + ".attn.value", cfg.dim, cfg.dim, rng);
    b.output = Linear::create(store, prefix + ".attn.output", cfg.dim, cfg.dim, rng);
    b.ff_norm = LayerNormParams::create(store, prefix + ".ff_norm", cfg.dim);
    b.ff_in = Linear::create(store, prefix + ".ff.in", cfg.dim, cfg.ff_dim, rng);
    b.ff_out = Linear::create(store, prefix + ".ff.out", cfg.ff_dim, cfg.dim, rng);
    return b;
}

QueryKV QueryKV::empty(std::size_t layers, std::size_t dim) {
    QueryKV kv;
    for (std::size_t i = 0; i < layers; ++i) {
        kv.layers.push_back({Tensor::zeros({0, dim}), Tensor::zeros({0, dim})});
    }
    kv.representation = Tensor::zeros({dim});
    return kv;
}

Tensor transformer_block(const BlockParams& block, const Tensor& hidden, const Mask& mask,
                         std::size_t heads, const ForwardContext& ctx, LayerKV* capture) {
    if (hidden.rank() != 2 || hidden.rows() == 0) {
        throw PreconditionError("transformer_block: empty input " + shape_to_string(hidden.shape()));
    }
    const Tensor x = block.attn_norm(hidden);
    const Tensor q = block.query(x);
    const Tensor k = block.key(x);
    const Tensor v = block.value(x);
    if (capture) *capture = {k, v};
    const Tensor attended = block.output(multi_head_attention(q, k, v, heads, mask, mask, ctx.trace));
    const Tensor h1 = add(hidden, maybe_dropout(attended, ctx));
    return feed_forward_residual(block, h1, ctx);
}

Tensor cross_transformer_block(const BlockParams& block, const Tensor& sentence_hidden,
                               const LayerKV& query_kv, const Mask& sentence_mask,
                               const Mask& query_mask, std::size_t heads,
                               const ForwardContext& ctx) {
    if (sentence_hidden.rank() != 2 || sentence_hidden.rows() == 0) {
        throw PreconditionError("cross_transformer_block: empty sentence input");
    }
    const std::size_t d = sentence_hidden.cols();
    if (query_kv.keys.cols() != d || query_kv.values.cols() != d ||
        query_kv.keys.rows() != query_kv.values.rows()) {
        throw DimensionError("cross_transformer_block: query K " +
                             shape_to_string(query_kv.keys.shape()) + ", V " +
                             shape_to_string(query_kv.values.shape()) + " vs width " +
                             std::to_string(d));
    }
    const std::size_t q_len = query_kv.keys.rows();
    Mask q_mask = query_mask.empty() ? Mask(q_len, true) : query_mask;
    Mask s_mask = sentence_mask.empty() ? Mask(sentence_hidden.rows(), true) : sentence_mask;
    if (q_mask.size() != q_len || s_mask.size() != sentence_hidden.rows()) {
        throw DimensionError("cross_transformer_block: mask lengths disagree with inputs");
    }

    const Tensor x = block.attn_norm(sentence_hidden);
    const Tensor q = block.query(x);
    const Tensor keys = concat_rows({query_kv.keys, block.key(x)});
    const Tensor values = concat_rows({query_kv.values, block.value(x)});
    const Tensor attended = block.output(multi_head_attention(
        q, keys, values, heads, s_mask, concat_masks(q_mask, s_mask), ctx.trace));
    const Tensor h1 = add(sentence_hidden, maybe_dropout(attended, ctx));
    return feed_forward_residual(block, h1, ctx);
}

TextEncoder::TextEncoder(ParamStore& store, const std::string& prefix, const EncoderConfig& cfg,
                         Rng& rng)
    : cfg_(cfg) {
    cfg_.validate();
    token_embeddings_ =
        store.normal(prefix + ".embed.tokens", {cfg.vocab_size, cfg.dim}, kTokenEmbeddingStd, rng);
    position_embeddings_ = store.normal(prefix + ".embed.positions", {cfg.max_positions, cfg.dim},
                                        kPositionEmbeddingStd, rng);
    segment_embeddings_ =
        store.normal(prefix + ".embed.segments", {kNumSegments, cfg.dim}, kSegmentEmbeddingStd, rng);
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        blocks_.push_back(BlockParams::create(store, prefix + ".layer" + std::to_string(i), cfg, rng));
    }
    final_norm_ = LayerNormParams::create(store, prefix + ".final_norm", cfg.dim);
}

Tensor TextEncoder::embed(const EncodedField& field) const {
    const std::size_t n = field.length();
    if (n == 0) throw PreconditionError("encoder: empty field");
    if (n > cfg_.max_positions) {
        throw DimensionError("encoder: sequence of " + std::to_string(n) +
                             " tokens exceeds max positions " + std::to_string(cfg_.max_positions));
    }
    if (field.mask.size() != n || field.segments.size() != n) {
        throw DimensionError("encoder: field ids/mask/segments lengths differ");
    }
    std::vector<int> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(i);
    Tensor h = add(add(embedding_lookup(token_embeddings_, field.ids),
                       embedding_lookup(position_embeddings_, positions)),
                   embedding_lookup(segment_embeddings_, field.segments));
    return h;
}

Tensor TextEncoder::encode(const EncodedField& field, const ForwardContext& ctx,
                           std::vector<LayerKV>* kv) const {
    Tensor h = embed(field);
    for (const auto& block : blocks_) {
        LayerKV captured;
        h = transformer_block(block, h, field.mask, cfg_.heads, ctx, kv ? &captured : nullptr);
        if (kv) kv->push_back(std::move(captured));
    }
    return final_norm_(h);
}

Tensor TextEncoder::encode_cross(const EncodedField& field, const QueryKV& query_kv,
                                 const ForwardContext& ctx) const {
    if (query_kv.layers.size() != blocks_.size()) {
        throw PreconditionError("encode_cross: query K/V has " +
                                std::to_string(query_kv.layers.size()) + " layers, encoder has " +
                                std::to_string(blocks_.size()));
    }
    Tensor h = embed(field);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        h = cross_transformer_block(blocks_[i], h, query_kv.layers[i], field.mask, query_kv.mask,
                                    cfg_.heads, ctx);
    }
    return final_norm_(h);
}

RelevanceEncoder::RelevanceEncoder(ParamStore& store, const std::string& prefix,
                                   const EncoderConfig& cfg, Rng& rng, bool with_context)
    : cfg_(cfg), with_context_(with_context) {
    cfg_.validate();
    if (with_context_) {
        position_embeddings_ = store.normal(prefix + ".positions",
                                            {cfg.relevance_positions, cfg.dim},
                                            kPositionEmbeddingStd, rng);
        fill_sinusoidal(position_embeddings_, cfg.relevance_positions, cfg.dim, kRelevancePositionScale);
        for (std::size_t i = 0; i < cfg.relevance_layers; ++i) {
            blocks_.push_back(
                BlockParams::create(store, prefix + ".layer" + std::to_string(i), cfg, rng));
        }
        final_norm_ = LayerNormParams::create(store, prefix + ".final_norm", cfg.dim);
    }
    head_hidden_ = Linear::create(store, prefix + ".head.hidden", cfg.dim, cfg.dim, rng);
    head_out_ = Linear::create(store, prefix + ".head.out", cfg.dim, 1, rng);
}

Tensor RelevanceEncoder::score(const Tensor& query_rep, const Tensor& sentence_reps,
                               const std::vector<std::size_t>& positions, const Mask& valid,
                               const ForwardContext& ctx) const {
    const std::size_t m = sentence_reps.rank() == 2 ? sentence_reps.rows() : 0;
    if (m == 0) throw PreconditionError("relevance_encode: no sentences");
    if (sentence_reps.cols() != cfg_.dim) {
        throw DimensionError("relevance_encode: sentence reps " +
                             shape_to_string(sentence_reps.shape()) + " for width " +
                             std::to_string(cfg_.dim));
    }
    const Mask mask = valid.empty() ? Mask(m, true) : valid;
    if (mask.size() != m || positions.size() != m) {
        throw DimensionError("relevance_encode: positions/mask length disagree with " +
                             std::to_string(m) + " sentences");
    }
    if (std::find(mask.begin(), mask.end(), true) == mask.end()) {
        throw DegenerateInputError("relevance_encode: every sentence is masked");
    }

    Tensor hidden = sentence_reps;
    if (with_context_) {
        if (query_rep.size() != cfg_.dim) {
            throw DimensionError("relevance_encode: query rep " + shape_to_string(query_rep.shape()));
        }
        std::vector<int> ids{0};
        for (std::size_t p : positions) {
            if (p + 1 >= cfg_.relevance_positions) {
                throw DimensionError("relevance_encode: sentence position " + std::to_string(p) +
                                     " beyond table of " +
                                     std::to_string(cfg_.relevance_positions));
            }
            ids.push_back(static_cast<int>(p + 1));
        }
        Tensor seq = add(concat_rows({query_rep, sentence_reps}),
                         embedding_lookup(position_embeddings_, ids));
        Mask seq_mask{true};
        seq_mask.insert(seq_mask.end(), mask.begin(), mask.end());
        for (const auto& block : blocks_) {
            seq = transformer_block(block, seq, seq_mask, cfg_.heads, ctx);
        }
        hidden = slice_rows(final_norm_(seq), 1, m);
    }
    return reshape(head_out_(gelu(head_hidden_(hidden))), {m});
}

QueryKV encode_query(const TextEncoder& encoder, const EncodedField& query_title,
                     const ForwardContext& ctx) {
    QueryKV out;
    const Tensor hidden = encoder.encode(query_title, ctx, &out.layers);
    out.representation = row(hidden, 0);
    out.mask = query_title.mask;
    return out;
}

Tensor encode_sentence_cross(const TextEncoder& encoder, const EncodedField& sentence,
                             const QueryKV& query_kv, const ForwardContext& ctx) {
    return row(encoder.encode_cross(sentence, query_kv, ctx), 0);
}

Tensor encode_sentence_joint(const TextEncoder& encoder, const EncodedField& title_query_sentence,
                             const ForwardContext& ctx) {
    return row(encoder.encode(title_query_sentence, ctx), 0);
}

Tensor encode_sentence_plain(const TextEncoder& encoder, const EncodedField& title_sentence,
                             const ForwardContext& ctx) {
    return row(encoder.encode(title_sentence, ctx), 0);
}

Tensor relevance_encode(const RelevanceEncoder& encoder, const RelevanceInput& input,
                        const ForwardContext& ctx) {
    return encoder.score(input.query_rep, input.sentence_reps, input.positions, input.valid, ctx);
}

}  // namespace snipforge
