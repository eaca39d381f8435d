#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "snipforge/corpus.hpp"
#include "snipforge/models.hpp"
#include "snipforge/params.hpp"
#include "snipforge/training.hpp"
#include "snipforge/two_stage.hpp"
#include "test_support.hpp"

using namespace snipforge;
using snipforge::testing::max_abs_diff;
using snipforge::testing::random_tensor;
using snipforge::testing::temp_path;
using snipforge::testing::tiny_config;

TEST_CASE("softmax cross-entropy loss examples") {
    CHECK(std::abs(loss_softmax_ce(Tensor::from({2}, {0, 0}), 0).item() - std::log(2.0)) <= 1e-12);

    const double expected = std::log1p(std::exp(-20.0));
    CHECK(std::abs(loss_softmax_ce(Tensor::from({2}, {10, -10}), 0).item() - expected) <= 1e-6 * expected);
    CHECK(loss_softmax_ce(Tensor::from({2}, {10, -10}), 0).item() == doctest::Approx(2.06e-9).epsilon(1e-2));

    auto masked = loss_softmax_ce(Tensor::from({3}, {1, 1, 99}), 0, Mask{true, true, false});
    CHECK(std::abs(masked.item() - std::log(2.0)) <= 1e-12);

    // Hand-computed masked softmax on uneven scores.
    const std::vector<double> s{0.3, -1.2, 2.0, 0.7};
    const Mask m{true, false, true, true};
    const double z = std::exp(0.3) + std::exp(2.0) + std::exp(0.7);
    CHECK(std::abs(loss_softmax_ce(Tensor::from({4}, s), 3, m).item() - (std::log(z) - 0.7)) <= 1e-12);

    CHECK_THROWS_AS(loss_softmax_ce(Tensor::from({3}, {1, 1, 1}), 2, Mask{true, true, false}), PreconditionError);
}

TEST_CASE("loss is unchanged when (sentence, position) pairs are permuted together") {
    Rng rng(4);
    EncoderConfig cfg;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.ff_dim = 16;
    cfg.vocab_size = 10;
    cfg.relevance_positions = 13;
    ParamStore store;
    RelevanceEncoder rel(store, "r", cfg, rng);
    auto q = random_tensor({8}, rng);
    auto reps = random_tensor({5, 8}, rng);
    std::vector<std::size_t> pos{0, 1, 2, 3, 4};
    auto base = relevance_encode(rel, {q, reps, pos, Mask(5, true)});
    const std::vector<std::size_t> perm{3, 0, 4, 2, 1};
    std::vector<std::size_t> ppos;
    for (auto p : perm) ppos.push_back(pos[p]);
    auto permuted = relevance_encode(rel, {q, gather_rows(reps, perm), ppos, Mask(5, true)});
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(permuted[i] - base[perm[i]]) < 1e-12);
    const std::size_t gold = 2;
    const std::size_t pgold = static_cast<std::size_t>(std::find(perm.begin(), perm.end(), gold) - perm.begin());
    CHECK(std::abs(loss_softmax_ce(base, gold).item() - loss_softmax_ce(permuted, pgold).item()) < 1e-12);
}

TEST_CASE("argmax is invariant to a constant shift of all scores") {
    Rng rng(6);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> s(6);
        for (auto& v : s) v = rng.normal();
        const double c = rng.normal(0, 50);
        std::vector<double> shifted(s);
        for (auto& v : shifted) v += c;
        CHECK(top_k(s, 1) == top_k(shifted, 1));
    }
}

TEST_CASE("DeepQSE forward contracts") {
    auto vocab = synth_vocab();
    auto model = make_model(tiny_config(ModelKind::DeepQSE), vocab);
    ExtractionExample one{"x", "w1 w2", "w3", {"w1 w2 w3"}, 0};
    CHECK(model->infer(model->prepare(one)).size() == 1);

    // Sentences past R never influence the scores.
    auto doc = synth_examples(2, 1)[0];
    while (doc.sentences.size() < 12) doc.sentences.push_back("w5 w6");
    auto longer = doc;
    longer.sentences.push_back("w1 w2 w3 w4");
    longer.sentences.push_back("w9");
    CHECK(model->infer(model->prepare(doc)) == model->infer(model->prepare(longer)));

    auto cfg = tiny_config(ModelKind::DeepQSE);
    cfg.ablation.no_dare = true;
    auto plain = make_model(cfg, vocab);
    auto full_scores = model->infer(model->prepare(doc));
    auto plain_scores = plain->infer(plain->prepare(doc));
    CHECK(max_abs_diff(full_scores, plain_scores) > 1e-6);

    ExtractionExample empty{"e", "q", "t", {}, std::nullopt};
    CHECK_THROWS(model->infer(model->prepare(empty)));
}

TEST_CASE("ablation switches remove inputs") {
    auto vocab = synth_vocab();
    auto doc = synth_examples(9, 1)[0];
    auto changed_query = doc;
    changed_query.query = "w150 w151";
    auto changed_title = doc;
    changed_title.title = "w160 w161 w162";

    auto no_query_cfg = tiny_config(ModelKind::DeepQSE);
    no_query_cfg.ablation.no_query = true;
    auto nq = make_model(no_query_cfg, vocab);
    CHECK(nq->infer(nq->prepare(doc)) == nq->infer(nq->prepare(changed_query)));

    auto no_title_cfg = tiny_config(ModelKind::DeepQSE);
    no_title_cfg.ablation.no_title = true;
    auto nt = make_model(no_title_cfg, vocab);
    CHECK(nt->infer(nt->prepare(doc)) == nt->infer(nt->prepare(changed_title)));

    auto full = make_model(tiny_config(ModelKind::DeepQSE), vocab);
    CHECK(full->infer(full->prepare(doc)) != full->infer(full->prepare(changed_query)));
}

TEST_CASE("toy models pass gradient checks") {
    SynthConfig sc;
    sc.vocab_size = 30;
    sc.min_sentences = 4;
    sc.max_sentences = 4;
    sc.max_sentence_words = 6;
    auto doc = synth_examples(3, 1, sc)[0];
    for (auto kind : {ModelKind::DeepQSE, ModelKind::Coarse, ModelKind::Fine}) {
        CAPTURE(to_string(kind));
        auto cfg = tiny_config(kind);
        cfg.lengths.max_sentences = 3;
        cfg.encoder.relevance_positions = 4;
        auto model = make_model(cfg, synth_vocab(sc));
        auto ex = model->prepare(doc);
        const std::size_t gold = std::min<std::size_t>(*ex.gold_start, 2);
        auto result = grad_check([&] { return loss_softmax_ce(model->score_all(ex), gold); },
                                 model->params().tensors());
        CHECK(result.max_relative_error < 1e-4);
        CHECK(result.elements_checked == model->params().parameter_count());
    }
}

TEST_CASE("model config JSON round trip and validation") {
    auto cfg = tiny_config(ModelKind::Fine);
    cfg.ablation.no_title = true;
    cfg.cross_transformer = false;
    cfg.candidates = 7;
    auto back = ModelConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK(back.kind == ModelKind::Fine);
    CHECK(back.candidates == 7);
    CHECK(back.ablation.no_title);
    CHECK_FALSE(back.cross_transformer);

    CHECK_THROWS_AS(ModelConfig::from_json(R"({"bogus": 1})"), FormatError);
    CHECK_THROWS_AS(ModelConfig::from_json("[1,2]"), FormatError);
    CHECK(parse_model_kind("coarse") == ModelKind::Coarse);
    CHECK_THROWS_AS(parse_model_kind("bert"), PreconditionError);

    auto bad = cfg;
    bad.candidates = 0;
    CHECK_THROWS_AS(bad.validate(), PreconditionError);

    auto tc = TrainConfig::from_json(R"({"learning_rate": 0.01, "epochs": 2})");
    CHECK(tc.learning_rate == 0.01);
    CHECK(tc.epochs == 2);
    CHECK(tc.batch_size == 64);
    CHECK_THROWS_AS(TrainConfig::from_json(R"({"lr": 1})"), FormatError);
}

TEST_CASE("model config defaults") {
    TrainConfig tc;
    CHECK(tc.learning_rate == 1e-4);
    CHECK(tc.batch_size == 64);
    CHECK(tc.patience == 2);
    ModelConfig mc;
    CHECK(mc.candidates == 20);
    LengthBudget lb;
    CHECK(lb.max_query == 16);
    CHECK(lb.max_title == 32);
    CHECK(lb.max_sentence == 64);
    CHECK(lb.max_sentences == 160);
    AdamOptions ao;
    CHECK(ao.beta1 == 0.9);
    CHECK(ao.beta2 == 0.999);
    CHECK(ao.epsilon == 1e-8);
}

TEST_CASE("checkpoint round trip preserves scores and fingerprint") {
    auto doc = synth_examples(4, 1)[0];
    for (auto kind : {ModelKind::DeepQSE, ModelKind::Coarse, ModelKind::Fine}) {
        CAPTURE(to_string(kind));
        auto model = make_model(tiny_config(kind), synth_vocab());
        const auto path = temp_path("roundtrip_" + to_string(kind) + ".ckpt");
        save_checkpoint(*model, path);
        auto loaded = load_checkpoint(path);
        CHECK(loaded->kind() == kind);
        CHECK(loaded->config().to_json() == model->config().to_json());
        CHECK(loaded->vocab().words() == model->vocab().words());
        CHECK(loaded->fingerprint() == model->fingerprint());
        if (kind != ModelKind::Fine) CHECK(loaded->infer(loaded->prepare(doc)) == model->infer(model->prepare(doc)));

        std::ifstream in(path, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        CHECK(ss.str().rfind("SNIPCKPT1", 0) == 0);
        CHECK(sha256(ss.str()) == loaded->fingerprint());
    }
}

TEST_CASE("any single-bit change to checkpoint bytes changes the fingerprint") {
    auto model = make_model(tiny_config(ModelKind::Coarse), synth_vocab());
    const auto bytes = serialize_checkpoint(*model);
    const auto fp = sha256(bytes);
    Rng rng(13);
    for (int t = 0; t < 300; ++t) {
        auto flipped = bytes;
        const auto pos = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(bytes.size()) - 1));
        flipped[pos] = static_cast<char>(flipped[pos] ^ (1 << rng.uniform_int(0, 7)));
        CHECK(sha256(flipped) != fp);
    }
    CHECK(to_hex(fp).size() == 64);
}

TEST_CASE("malformed checkpoints are rejected") {
    auto model = make_model(tiny_config(ModelKind::Coarse), synth_vocab());
    auto bytes = serialize_checkpoint(*model);
    CHECK_THROWS_AS(load_checkpoint_bytes("NOTACKPT" + bytes), FormatError);
    CHECK_THROWS_AS(load_checkpoint_bytes(bytes.substr(0, bytes.size() - 8)), FormatError);
    CHECK_THROWS_AS(load_checkpoint_bytes(bytes + "x"), FormatError);
    CHECK_THROWS_AS(load_checkpoint(temp_path("absent.ckpt")), NotFoundError);
}

TEST_CASE("two-stage top-K example with ties") {
    const std::vector<double> s{0.1, 0.9, 0.3, 0.9, 0.2};
    CHECK(top_k(s, 3) == std::vector<std::size_t>{1, 3, 2});
    CHECK(top_k(s, 10).size() == 5);
    CHECK(top_k(s, 0).empty());
}

TEST_CASE("top_k returns min(K, R) distinct valid indices") {
    Rng rng(17);
    for (int t = 0; t < 300; ++t) {
        const auto r = static_cast<std::size_t>(rng.uniform_int(1, 15));
        const auto k = static_cast<std::size_t>(rng.uniform_int(1, 20));
        std::vector<double> s(r);
        for (auto& v : s) v = static_cast<double>(rng.uniform_int(0, 4));
        auto idx = top_k(s, k);
        CHECK(idx.size() == std::min(k, r));
        CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            CHECK(idx[i] < r);
            if (i > 0) {
                const bool ordered = s[idx[i - 1]] > s[idx[i]] || (s[idx[i - 1]] == s[idx[i]] && idx[i - 1] < idx[i]);
                CHECK(ordered);
            }
        }
    }
}

TEST_CASE("fine training candidates force the gold in") {
    const std::vector<double> s{0.1, 0.9, 0.3, 0.8, 0.2};
    CHECK(fine_training_candidates(s, 3, 3) == std::vector<std::size_t>{1, 2, 3});
    // Gold 0 replaces the K-th coarse pick (index 2).
    CHECK(fine_training_candidates(s, 0, 3) == std::vector<std::size_t>{0, 1, 3});
    CHECK(fine_training_candidates(s, 4, 10) == std::vector<std::size_t>{0, 1, 2, 3, 4});
    CHECK_THROWS_AS(fine_training_candidates(s, 5, 3), PreconditionError);
}

TEST_CASE("choose_start breaks ties toward the lower document index") {
    CHECK(choose_start({4, 1, 3}, {0.5, 0.5, 0.2}) == 1);
    CHECK(choose_start({2}, {-3.0}) == 2);
    CHECK_THROWS_AS(choose_start({}, {}), PreconditionError);
}

TEST_CASE("two-stage saturation and forcing on random models") {
    auto vocab = synth_vocab();
    auto coarse_model = make_model(tiny_config(ModelKind::Coarse), vocab);
    auto fine_model = make_model(tiny_config(ModelKind::Fine), vocab);
    auto& coarse = static_cast<CoarseSelector&>(*coarse_model);
    auto& fine = static_cast<FineReranker&>(*fine_model);
    for (const auto& doc : synth_examples(12, 20)) {
        auto ex = coarse.prepare(doc);
        const std::size_t r = coarse.usable_sentences(ex);
        auto full = forward_two_stage(coarse, fine, ex, r);
        auto fine_all = fine.infer(ex);
        CHECK(full.start == top_k(fine_all, 1)[0]);
        auto one = forward_two_stage(coarse, fine, ex, 1);
        CHECK(one.start == top_k(one.coarse_scores, 1)[0]);
        auto some = forward_two_stage(coarse, fine, ex, 3);
        CHECK(std::find(some.candidates.begin(), some.candidates.end(), some.start) != some.candidates.end());
        auto ranking = two_stage_ranking(some);
        CHECK(ranking.size() == r);
        CHECK(ranking[0] == some.start);
        CHECK(std::set<std::size_t>(ranking.begin(), ranking.end()).size() == r);
    }
    CHECK_THROWS_AS(forward_two_stage(coarse, fine, coarse.prepare(synth_examples(1, 1)[0]), 0), PreconditionError);
}

TEST_CASE("fine scores keep original positions") {
    auto vocab = synth_vocab();
    auto fine_model = make_model(tiny_config(ModelKind::Fine), vocab);
    auto& fine = static_cast<FineReranker&>(*fine_model);
    auto ex = fine.prepare(synth_examples(8, 1)[0]);
    auto all = fine.score_all(ex);
    auto subset = fine_scores_for(fine, ex, {3, 0});
    auto direct = fine.score(ex, {0, 3}, {});
    CHECK(subset[0] == direct[1]);
    CHECK(subset[1] == direct[0]);
    CHECK(all.size() == fine.usable_sentences(ex));
}

TEST_CASE("training is deterministic and rejects empty corpora") {
    auto split = split_corpus(synth_examples(7, 60), 40, 10);
    TrainConfig tc;
    tc.learning_rate = 2e-3;
    tc.batch_size = 8;
    tc.epochs = 2;
    tc.patience = 10;
    auto run = [&] {
        auto model = make_model(tiny_config(ModelKind::DeepQSE), synth_vocab());
        auto result = train(*model, split.train, split.validation, tc);
        return std::make_pair(result, serialize_checkpoint(*model));
    };
    auto [a, bytes_a] = run();
    auto [b, bytes_b] = run();
    CHECK(a.step_losses == b.step_losses);
    CHECK(bytes_a == bytes_b);
    CHECK(a.epochs_run == 2);
    CHECK(a.history.size() == 4);
    for (const auto& m : a.history) {
        if (m.split == "train") {
            CHECK_FALSE(m.p_at_1.has_value());
            continue;
        }
        REQUIRE(m.p_at_1.has_value());
        CHECK(*m.p_at_1 <= *m.p_at_3);
        CHECK(*m.p_at_3 <= *m.p_at_5);
    }

    auto model = make_model(tiny_config(ModelKind::DeepQSE), synth_vocab());
    CHECK_THROWS_AS(train(*model, {}, split.validation, tc), PreconditionError);
    auto fine = make_model(tiny_config(ModelKind::Fine), synth_vocab());
    CHECK_THROWS_AS(train(*fine, split.train, split.validation, tc), PreconditionError);

    auto bad = tc;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), PreconditionError);
}

TEST_CASE("first-epoch loss trends down on the synthetic task") {
    auto split = split_corpus(synth_examples(7, 400), 320, 40);
    TrainConfig tc;
    tc.learning_rate = 2e-3;
    tc.batch_size = 8;
    tc.epochs = 1;
    auto model = make_model(snipforge::testing::toy_config(ModelKind::DeepQSE), synth_vocab());
    auto result = train(*model, split.train, split.validation, tc);
    const auto& s = result.step_losses;
    REQUIRE(s.size() == 40);
    const double head = std::accumulate(s.begin(), s.begin() + 10, 0.0) / 10;
    const double tail = std::accumulate(s.end() - 10, s.end(), 0.0) / 10;
    CHECK(tail < head);
}

TEST_CASE("split_corpus is contiguous") {
    auto docs = synth_examples(1, 10);
    auto split = split_corpus(docs, 6, 2);
    CHECK(split.train.size() == 6);
    CHECK(split.validation.size() == 2);
    CHECK(split.test.size() == 2);
    CHECK(split.validation[0].id == docs[6].id);
    CHECK_THROWS_AS(split_corpus(docs, 8, 5), PreconditionError);
}
