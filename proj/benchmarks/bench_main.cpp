#include <benchmark/benchmark.h>

#include <memory>
#include <vector>

#include "snipforge/corpus.hpp"
#include "snipforge/models.hpp"
#include "snipforge/rng.hpp"
#include "snipforge/serving.hpp"
#include "snipforge/tensor.hpp"
#include "snipforge/two_stage.hpp"

namespace {

using namespace snipforge;

Tensor random_tensor(Shape shape, Rng& rng) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    std::vector<double> values(n);
    for (auto& v : values) v = rng.normal(0.0, 1.0);
    return Tensor::from(std::move(shape), std::move(values));
}

ModelConfig bench_config(ModelKind kind, std::size_t candidates) {
    ModelConfig mc;
    mc.kind = kind;
    mc.encoder.dim = 32;
    mc.encoder.heads = 4;
    mc.encoder.layers = 2;
    mc.encoder.ff_dim = 64;
    mc.encoder.relevance_positions = 13;
    mc.encoder.dropout = 0.0;
    mc.lengths.max_sentences = 12;
    mc.candidates = candidates;
    return mc;
}

struct Fixture {
    std::vector<ExtractionExample> docs = synth_examples(7, 64);
    Vocab vocab = synth_vocab();
    std::unique_ptr<SnippetModel> deepqse = make_model(bench_config(ModelKind::DeepQSE, 5), vocab);
    std::unique_ptr<SnippetModel> coarse = make_model(bench_config(ModelKind::Coarse, 5), vocab);
    std::unique_ptr<SnippetModel> fine = make_model(bench_config(ModelKind::Fine, 5), vocab);
    SentenceCache cache = build_cache(static_cast<const CoarseSelector&>(*coarse), docs);

    // Loaded checkpoints carry their fingerprint; freshly built models would rehash per call.
    Fixture() {
        for (auto* m : {deepqse.get(), coarse.get(), fine.get()}) m->set_fingerprint(m->fingerprint());
    }

    static const Fixture& get() {
        static const Fixture f;
        return f;
    }
};

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    Tensor a = random_tensor({n, n}, rng);
    Tensor b = random_tensor({n, n}, rng);
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(32)->Arg(64)->Arg(128);

void BM_Attention(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(2);
    Tensor q = random_tensor({n, 32}, rng);
    Tensor k = random_tensor({n, 32}, rng);
    Tensor v = random_tensor({n, 32}, rng);
    Mask mask(n, true);
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(multi_head_attention(q, k, v, 4, mask, mask));
}
BENCHMARK(BM_Attention)->Arg(16)->Arg(32)->Arg(64);

void BM_MatmulBackward(benchmark::State& state) {
    Rng rng(3);
    Tensor a = random_tensor({32, 32}, rng);
    Tensor b = random_tensor({32, 32}, rng);
    for (auto _ : state) {
        Tensor a2 = Tensor::from({32, 32}, {a.data().begin(), a.data().end()}, true);
        Tensor loss = sum(matmul(a2, b));
        loss.backward();
        benchmark::DoNotOptimize(a2.grad());
    }
}
BENCHMARK(BM_MatmulBackward);

void BM_CoarseDocumentEncode(benchmark::State& state) {
    const auto& f = Fixture::get();
    const auto& coarse = static_cast<const CoarseSelector&>(*f.coarse);
    std::size_t i = 0;
    for (auto _ : state) {
        auto example = coarse.prepare(f.docs[i++ % f.docs.size()]);
        std::vector<std::size_t> all(coarse.usable_sentences(example));
        for (std::size_t j = 0; j < all.size(); ++j) all[j] = j;
        benchmark::DoNotOptimize(coarse.sentence_representations(example, all));
    }
}
BENCHMARK(BM_CoarseDocumentEncode)->Unit(benchmark::kMicrosecond);

void BM_DeepQSEExtract(benchmark::State& state) {
    const auto& f = Fixture::get();
    const auto& model = static_cast<const DeepQSEModel&>(*f.deepqse);
    std::size_t i = 0;
    for (auto _ : state) {
        const auto& doc = f.docs[i++ % f.docs.size()];
        benchmark::DoNotOptimize(extract_snippet_single(doc.query, doc, model));
    }
}
BENCHMARK(BM_DeepQSEExtract)->Unit(benchmark::kMicrosecond);

void BM_TwoStageExtract(benchmark::State& state) {
    const auto& f = Fixture::get();
    const auto& coarse = static_cast<const CoarseSelector&>(*f.coarse);
    const auto& fine = static_cast<const FineReranker&>(*f.fine);
    ServeOptions options;
    options.candidates = static_cast<std::size_t>(state.range(0));
    std::size_t i = 0;
    for (auto _ : state) {
        const auto& doc = f.docs[i++ % f.docs.size()];
        benchmark::DoNotOptimize(extract_snippet(doc.query, doc, f.cache, coarse, &fine, options));
    }
}
BENCHMARK(BM_TwoStageExtract)->Arg(1)->Arg(3)->Arg(5)->Arg(12)->Unit(benchmark::kMicrosecond);

void BM_CoarseOnlyExtract(benchmark::State& state) {
    const auto& f = Fixture::get();
    const auto& coarse = static_cast<const CoarseSelector&>(*f.coarse);
    std::size_t i = 0;
    for (auto _ : state) {
        const auto& doc = f.docs[i++ % f.docs.size()];
        benchmark::DoNotOptimize(extract_snippet(doc.query, doc, f.cache, coarse, nullptr));
    }
}
BENCHMARK(BM_CoarseOnlyExtract)->Unit(benchmark::kMicrosecond);

}  // namespace
BENCHMARK_MAIN();
