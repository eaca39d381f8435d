#include <doctest.h>

#include <cmath>

#include "snipforge/corpus.hpp"
#include "snipforge/encoders.hpp"
#include "snipforge/models.hpp"
#include "snipforge/rng.hpp"
#include "test_support.hpp"

using namespace snipforge;
using snipforge::testing::max_abs_diff;
using snipforge::testing::random_tensor;
using snipforge::testing::tiny_config;

namespace {

EncoderConfig small_encoder(std::size_t dim = 8, std::size_t heads = 2, std::size_t layers = 2) {
    EncoderConfig cfg;
    cfg.dim = dim;
    cfg.heads = heads;
    cfg.layers = layers;
    cfg.ff_dim = 2 * dim;
    cfg.vocab_size = 60;
    cfg.max_positions = 64;
    cfg.relevance_positions = 13;
    cfg.dropout = 0.0;
    return cfg;
}

EncodedField field_of(std::vector<int> ids, std::size_t pad_to = 0) {
    return encode_concat({FieldInput{std::move(ids), 64, Segment::Sentence}}, 128, pad_to);
}

}  // namespace

TEST_CASE("cross block with empty query KV equals the standard block") {
    Rng rng(100);
    for (int trial = 0; trial < 25; ++trial) {
        auto cfg = small_encoder(8, trial % 2 ? 2 : 4, 1);
        ParamStore store;
        auto block = BlockParams::create(store, "b", cfg, rng);
        const auto n = static_cast<std::size_t>(rng.uniform_int(1, 6));
        auto h = random_tensor({n, cfg.dim}, rng);
        auto plain = transformer_block(block, h, {}, cfg.heads, {});
        LayerKV empty{Tensor::zeros({0, cfg.dim}), Tensor::zeros({0, cfg.dim})};
        auto cross = cross_transformer_block(block, h, empty, {}, {}, cfg.heads, {});
        CHECK(max_abs_diff(plain, cross) < 1e-9);

        // Masking every query token collapses to the same result.
        const auto q_len = static_cast<std::size_t>(rng.uniform_int(1, 4));
        LayerKV kv{random_tensor({q_len, cfg.dim}, rng), random_tensor({q_len, cfg.dim}, rng)};
        auto masked = cross_transformer_block(block, h, kv, {}, Mask(q_len, false), cfg.heads, {});
        CHECK(max_abs_diff(plain, masked) < 1e-9);
    }
}

TEST_CASE("cross attention probabilities span query and sentence keys") {
    Rng rng(3);
    auto cfg = small_encoder(8, 2, 1);
    ParamStore store;
    auto block = BlockParams::create(store, "b", cfg, rng);
    auto h = random_tensor({5, 8}, rng);
    LayerKV kv{random_tensor({3, 8}, rng), random_tensor({3, 8}, rng)};
    AttentionTrace trace;
    ForwardContext ctx;
    ctx.trace = &trace;
    cross_transformer_block(block, h, kv, {}, Mask{true, false, true}, cfg.heads, ctx);
    REQUIRE(trace.probabilities.size() == cfg.heads);
    for (const auto& p : trace.probabilities) {
        CHECK(p.shape() == Shape{5, 8});
        for (std::size_t i = 0; i < 5; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 8; ++j) s += p.at(i, j);
            CHECK(std::abs(s - 1.0) <= 1e-12);
            CHECK(p.at(i, 1) == 0.0);
        }
    }
}

TEST_CASE("transformer block contracts") {
    Rng rng(8);
    auto cfg = small_encoder(8, 2, 1);
    ParamStore store;
    auto block = BlockParams::create(store, "b", cfg, rng);

    AttentionTrace trace;
    ForwardContext ctx;
    ctx.trace = &trace;
    auto one = transformer_block(block, random_tensor({1, 8}, rng), {}, cfg.heads, ctx);
    CHECK(one.shape() == Shape{1, 8});
    for (const auto& p : trace.probabilities) CHECK(p[0] == 1.0);

    for (std::size_t n : {2u, 7u, 64u}) {
        CHECK(transformer_block(block, random_tensor({n, 8}, rng), {}, cfg.heads, {}).shape() == Shape{n, 8});
    }
    CHECK_THROWS_AS(transformer_block(block, Tensor::zeros({0, 8}), {}, cfg.heads, {}), PreconditionError);

    // Swapping two rows of the input swaps the same rows of the output.
    auto x = random_tensor({4, 8}, rng);
    auto y = transformer_block(block, x, {}, cfg.heads, {});
    auto xp = gather_rows(x, {2, 1, 0, 3});
    auto yp = transformer_block(block, xp, {}, cfg.heads, {});
    CHECK(max_abs_diff(gather_rows(yp, {2, 1, 0, 3}), y) < 1e-12);
}

TEST_CASE("masked rows attend nowhere and are ignored") {
    Rng rng(12);
    auto cfg = small_encoder(8, 2, 1);
    ParamStore store;
    auto block = BlockParams::create(store, "b", cfg, rng);
    auto x = random_tensor({4, 8}, rng);
    Mask mask{true, true, false, true};
    auto y = transformer_block(block, x, mask, cfg.heads, {});
    auto x2 = x.clone();
    for (std::size_t j = 0; j < 8; ++j) x2.mutable_data()[2 * 8 + j] += 5.0;
    auto y2 = transformer_block(block, x2, mask, cfg.heads, {});
    for (std::size_t r : {0u, 1u, 3u})
        for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(y.at(r, j) - y2.at(r, j)) < 1e-12);
}

TEST_CASE("encode_query captures one K/V pair per layer") {
    Rng rng(21);
    auto cfg = small_encoder(8, 2, 3);
    ParamStore store;
    TextEncoder enc(store, "q", cfg, rng);
    auto field = field_of({5, 6, 7, 8});
    auto kv = encode_query(enc, field);
    REQUIRE(kv.layers.size() == cfg.layers);
    for (const auto& layer : kv.layers) {
        CHECK(layer.keys.shape() == Shape{field.length(), cfg.dim});
        CHECK(layer.values.shape() == Shape{field.length(), cfg.dim});
    }
    CHECK(kv.representation.shape() == Shape{cfg.dim});
    CHECK(kv.length() == field.length());

    auto again = encode_query(enc, field);
    CHECK(max_abs_diff(again.representation, kv.representation) == 0.0);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        CHECK(max_abs_diff(again.layers[l].keys, kv.layers[l].keys) == 0.0);
        CHECK(max_abs_diff(again.layers[l].values, kv.layers[l].values) == 0.0);
    }
}

TEST_CASE("first-layer query keys unroll to a direct projection") {
    Rng rng(5);
    auto cfg = small_encoder(8, 2, 1);
    ParamStore store;
    TextEncoder enc(store, "q", cfg, rng);
    auto field = field_of({9, 10, 11});
    auto kv = encode_query(enc, field);
    const auto h = enc.embed(field);
    const auto& block = enc.blocks()[0];
    const std::size_t n = h.rows(), d = cfg.dim;
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += h.at(i, j);
        mean /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) var += (h.at(i, j) - mean) * (h.at(i, j) - mean);
        var /= static_cast<double>(d);
        std::vector<double> x(d);
        for (std::size_t j = 0; j < d; ++j)
            x[j] = (h.at(i, j) - mean) / std::sqrt(var + 1e-5) * block.attn_norm.gain[j] + block.attn_norm.bias[j];
        for (std::size_t c = 0; c < d; ++c) {
            double k = block.key.bias[c];
            for (std::size_t j = 0; j < d; ++j) k += x[j] * block.key.weight.at(j, c);
            worst = std::max(worst, std::abs(k - kv.layers[0].keys.at(i, c)));
        }
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("sentence encoders") {
    Rng rng(31);
    auto cfg = small_encoder(8, 2, 2);
    ParamStore store;
    TextEncoder query_enc(store, "q", cfg, rng);
    TextEncoder cross_enc(store, "c", cfg, rng);
    TextEncoder joint_enc(store, "j", cfg, rng);

    auto qkv = encode_query(query_enc, field_of({4, 5, 6}));
    auto s = field_of({7, 8, 9, 10});
    auto a = encode_sentence_cross(cross_enc, s, qkv);
    auto b = encode_sentence_cross(cross_enc, s, qkv);
    CHECK(a.shape() == Shape{cfg.dim});
    CHECK(max_abs_diff(a, b) == 0.0);

    // A masked PAD position can hold any id.
    auto padded = field_of({7, 8, 9, 10}, 9);
    REQUIRE_FALSE(padded.mask.back());
    auto p1 = encode_sentence_cross(cross_enc, padded, qkv);
    padded.ids.back() = 42;
    auto p2 = encode_sentence_cross(cross_enc, padded, qkv);
    CHECK(max_abs_diff(p1, p2) < 1e-12);
    CHECK(max_abs_diff(p1, a) < 1e-12);

    auto empty = QueryKV::empty(cfg.layers, cfg.dim);
    CHECK(max_abs_diff(encode_sentence_cross(cross_enc, s, empty), encode_sentence_plain(cross_enc, s)) < 1e-9);

    QueryKV short_kv = qkv;
    short_kv.layers.pop_back();
    CHECK_THROWS(encode_sentence_cross(cross_enc, s, short_kv));

    auto joint_field = encode_concat({FieldInput{{5, 6}, 32, Segment::Title}, FieldInput{{4, 5, 6}, 16, Segment::Query},
                                      FieldInput{{7, 8, 9, 10}, 64, Segment::Sentence}},
                                     128);
    auto g = encode_sentence_joint(joint_enc, joint_field);
    CHECK(g.shape() == Shape{cfg.dim});
    CHECK(max_abs_diff(g, a) > 1e-6);

    auto jp = encode_concat({FieldInput{{5, 6, 7}, 64, Segment::Sentence}}, 128, 10);
    auto j1 = encode_sentence_joint(joint_enc, jp);
    std::swap(jp.ids[8], jp.ids[9]);
    jp.ids[8] = 17;
    CHECK(max_abs_diff(j1, encode_sentence_joint(joint_enc, jp)) < 1e-12);

    auto h1 = encode_sentence_plain(joint_enc, s);
    CHECK(max_abs_diff(h1, encode_sentence_plain(joint_enc, s)) == 0.0);
    double quant = 0.0;
    for (std::size_t i = 0; i < h1.size(); ++i)
        quant = std::max(quant, std::abs(static_cast<double>(static_cast<float>(h1[i])) - h1[i]));
    CHECK(quant <= 1e-6);
}

TEST_CASE("relevance_encode contracts") {
    Rng rng(77);
    auto cfg = small_encoder(8, 2, 1);
    ParamStore store;
    RelevanceEncoder rel(store, "r", cfg, rng);

    RelevanceInput one{random_tensor({8}, rng), random_tensor({1, 8}, rng), {0}, Mask{true}};
    auto s1 = relevance_encode(rel, one);
    REQUIRE(s1.size() == 1);
    CHECK(std::isfinite(s1[0]));

    auto rep = random_tensor({1, 8}, rng);
    RelevanceInput dup{random_tensor({8}, rng), concat_rows({rep, rep}), {0, 1}, Mask{true, true}};
    auto sd = relevance_encode(rel, dup);
    CHECK(std::abs(sd[0] - sd[1]) > 1e-9);

    auto reps = random_tensor({4, 8}, rng);
    RelevanceInput masked{random_tensor({8}, rng), reps, {0, 1, 2, 3}, Mask{true, false, true, true}};
    auto base = relevance_encode(rel, masked);
    auto perturbed = reps.clone();
    for (std::size_t j = 0; j < 8; ++j) perturbed.mutable_data()[8 + j] += 3.0;
    masked.sentence_reps = perturbed;
    auto moved = relevance_encode(rel, masked);
    for (std::size_t i : {0u, 2u, 3u}) CHECK(std::abs(base[i] - moved[i]) < 1e-12);

    auto probs = softmax_rows(reshape(base, {1, 4}), masked.valid);
    CHECK(probs[1] == 0.0);
    CHECK(std::abs(probs[0] + probs[2] + probs[3] - 1.0) < 1e-12);

    masked.valid = Mask(4, false);
    CHECK_THROWS(relevance_encode(rel, masked));
}

TEST_CASE("gradient reaches every parameter") {
    auto docs = synth_examples(5, 4);
    for (auto kind : {ModelKind::DeepQSE, ModelKind::Coarse, ModelKind::Fine}) {
        CAPTURE(to_string(kind));
        auto model = make_model(tiny_config(kind), synth_vocab());
        model->params().zero_grad();
        for (const auto& doc : docs) {
            auto ex = model->prepare(doc);
            auto loss = loss_softmax_ce(model->score_all(ex), *ex.gold_start);
            loss.backward();
        }
        const auto& names = model->params().names();
        const auto& tensors = model->params().tensors();
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            CAPTURE(names[i]);
            double norm = 0.0;
            for (double g : tensors[i].grad()) norm += g * g;
            CHECK(norm > 0.0);
        }
    }
}

TEST_CASE("encoder outputs are finite") {
    Rng rng(2);
    auto cfg = small_encoder(16, 4, 2);
    ParamStore store;
    TextEncoder enc(store, "e", cfg, rng);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<int> ids(static_cast<std::size_t>(rng.uniform_int(0, 30)));
        for (auto& id : ids) id = static_cast<int>(rng.uniform_int(0, 59));
        auto out = enc.encode(field_of(ids), {});
        for (double v : out.data()) CHECK(std::isfinite(v));
    }
}

TEST_CASE("encoder config validation") {
    auto cfg = small_encoder(8, 3, 1);
    CHECK_THROWS(cfg.validate());
    cfg = small_encoder();
    cfg.layers = 0;
    CHECK_THROWS(cfg.validate());
}
