#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "snipforge/baselines.hpp"
#include "snipforge/corpus.hpp"
#include "snipforge/cost_model.hpp"
#include "snipforge/flops.hpp"
#include "snipforge/serving.hpp"
#include "snipforge/training.hpp"

namespace {

using json = nlohmann::ordered_json;
using namespace snipforge;

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kMissingFile = 3, kFingerprint = 4 };

class UsageError : public Error {
public:
    using Error::Error;
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void require_file(const std::string& path, const char* what) {
    if (path.empty()) throw UsageError(std::string("missing required ") + what);
    if (!std::filesystem::is_regular_file(path)) throw NotFoundError(std::string(what) + " not found: " + path);
}

// Copies `src` keys onto `dst`, recursing into objects; unknown keys are a usage error.
void overlay(json& dst, const json& src, const std::string& where) {
    if (!src.is_object()) throw UsageError(where + ": expected a JSON object");
    for (auto it = src.begin(); it != src.end(); ++it) {
        if (!dst.contains(it.key())) throw UsageError(where + ": unknown key '" + it.key() + "'");
        json& slot = dst[it.key()];
        if (slot.is_object() && it->is_object()) {
            overlay(slot, *it, where + "." + it.key());
        } else {
            slot = *it;
        }
    }
}

void overlay_file(json& config, const std::string& path) {
    if (path.empty()) return;
    require_file(path, "config file");
    json file;
    try {
        file = json::parse(slurp(path));
    } catch (const json::parse_error& e) {
        throw UsageError("config " + path + ": " + e.what());
    }
    overlay(config, file, "config");
}

std::uint64_t default_seed() {
    if (const char* env = std::getenv("SNIPFORGE_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw UsageError(std::string("SNIPFORGE_SEED is not an unsigned integer: ") + env);
        }
    }
    return 7;
}

std::string sha256_file(const std::string& path) { return to_hex(sha256(slurp(path))); }

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out << text;
    if (!out) throw Error("write failed for " + path);
}

template <typename T>
T take(const json& config, const char* key) {
    try {
        return config.at(key).get<T>();
    } catch (const json::exception& e) {
        throw UsageError(std::string("config key '") + key + "': " + e.what());
    }
}

std::string take_path(const json& config, const char* key) {
    return config.at(key).is_null() ? std::string() : take<std::string>(config, key);
}

// --pretty: one "key  value" line per leaf.
void print_pretty(const json& j, const std::string& prefix = "") {
    if (j.is_object()) {
        for (auto it = j.begin(); it != j.end(); ++it) {
            print_pretty(*it, prefix.empty() ? it.key() : prefix + "." + it.key());
        }
        return;
    }
    if (j.is_array() && !j.empty() && (j.front().is_object() || j.front().is_array())) {
        for (std::size_t i = 0; i < j.size(); ++i) print_pretty(j[i], prefix + "[" + std::to_string(i) + "]");
        return;
    }
    std::cout << std::left << std::setw(36) << prefix << ' ' << j.dump() << '\n';
}

struct Output {
    bool pretty = false;
    void emit(const json& j) const {
        if (pretty) {
            print_pretty(j);
        } else {
            std::cout << j.dump() << '\n';
        }
    }
};

std::unique_ptr<SnippetModel> load_model(const std::string& path, const char* what,
                                         std::optional<ModelKind> expected = std::nullopt) {
    require_file(path, what);
    auto model = load_checkpoint(path);
    if (expected && model->kind() != *expected) {
        throw UsageError(std::string(what) + " " + path + " holds a " + to_string(model->kind()) +
                         " model, expected " + to_string(*expected));
    }
    return model;
}

json synth_config_json(const SynthConfig& c) {
    return {{"vocab_size", c.vocab_size},
            {"min_sentences", c.min_sentences},
            {"max_sentences", c.max_sentences},
            {"min_query_words", c.min_query_words},
            {"max_query_words", c.max_query_words},
            {"title_words", c.title_words},
            {"min_sentence_words", c.min_sentence_words},
            {"max_sentence_words", c.max_sentence_words},
            {"query_decoy_rate", c.query_decoy_rate},
            {"title_decoy_rate", c.title_decoy_rate},
            {"echo_rate", c.echo_rate},
            {"filler_query_word_rate", c.filler_query_word_rate},
            {"title_decoy_query_word_rate", c.title_decoy_query_word_rate}};
}

SynthConfig synth_config_from(const json& j) {
    SynthConfig c;
    c.vocab_size = take<std::size_t>(j, "vocab_size");
    c.min_sentences = take<std::size_t>(j, "min_sentences");
    c.max_sentences = take<std::size_t>(j, "max_sentences");
    c.min_query_words = take<std::size_t>(j, "min_query_words");
    c.max_query_words = take<std::size_t>(j, "max_query_words");
    c.title_words = take<std::size_t>(j, "title_words");
    c.min_sentence_words = take<std::size_t>(j, "min_sentence_words");
    c.max_sentence_words = take<std::size_t>(j, "max_sentence_words");
    c.query_decoy_rate = take<double>(j, "query_decoy_rate");
    c.title_decoy_rate = take<double>(j, "title_decoy_rate");
    c.echo_rate = take<double>(j, "echo_rate");
    c.filler_query_word_rate = take<double>(j, "filler_query_word_rate");
    c.title_decoy_query_word_rate = take<double>(j, "title_decoy_query_word_rate");
    return c;
}

// Corpus split shared by train and eval: contiguous, train then validation then test.
DataSplit split_from(std::vector<ExtractionExample> docs, const json& split) {
    const std::size_t n = docs.size();
    auto size_of = [&](const char* key, double fraction) {
        const json& v = split.at(key);
        return v.is_null() ? static_cast<std::size_t>(static_cast<double>(n) * fraction) : take<std::size_t>(split, key);
    };
    const std::size_t train = size_of("train", 0.8);
    const std::size_t validation = size_of("validation", 0.1);
    try {
        return split_corpus(std::move(docs), train, validation);
    } catch (const PreconditionError& e) {
        throw UsageError(e.what());
    }
}

json split_defaults() { return {{"train", nullptr}, {"validation", nullptr}}; }

// ---------------------------------------------------------------- synth

struct SynthFlags {
    std::string config_path;
    std::uint64_t seed = 0;
    std::size_t docs = 0;
    std::string out;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* docs_opt = nullptr;
    CLI::Option* out_opt = nullptr;
};

json cmd_synth(const SynthFlags& f) {
    json config = {{"seed", default_seed()}, {"docs", 2000}, {"out", nullptr}, {"generator", synth_config_json({})}};
    overlay_file(config, f.config_path);
    if (f.seed_opt->count()) config["seed"] = f.seed;
    if (f.docs_opt->count()) config["docs"] = f.docs;
    if (f.out_opt->count()) config["out"] = f.out;
    const std::string out = take_path(config, "out");
    if (out.empty()) throw UsageError("synth: --out is required");
    SynthConfig generator = synth_config_from(config.at("generator"));
    try {
        generator.validate();
    } catch (const PreconditionError& e) {
        throw UsageError(e.what());
    }
    synth_corpus(take<std::uint64_t>(config, "seed"), take<std::size_t>(config, "docs"), out, generator);
    return {{"command", "synth"}, {"config", config}, {"documents", config["docs"]}, {"sha256", sha256_file(out)}};
}

// ---------------------------------------------------------------- train

struct TrainFlags {
    std::string config_path;
    std::string model;
    std::string corpus;
    std::string out;
    std::string coarse_ckpt;
    std::string metrics_out;
    std::uint64_t seed = 0;
    std::size_t epochs = 0;
    double lr = 0.0;
    std::size_t batch = 0;
    std::size_t threads = 1;
    CLI::Option* model_opt = nullptr;
    CLI::Option* corpus_opt = nullptr;
    CLI::Option* out_opt = nullptr;
    CLI::Option* coarse_opt = nullptr;
    CLI::Option* metrics_opt = nullptr;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* epochs_opt = nullptr;
    CLI::Option* lr_opt = nullptr;
    CLI::Option* batch_opt = nullptr;
    CLI::Option* threads_opt = nullptr;
};

json cmd_train(const TrainFlags& f) {
    const std::uint64_t seed = default_seed();
    ModelConfig model_defaults;
    model_defaults.seed = seed;
    TrainConfig train_defaults;
    train_defaults.seed = seed;
    json config = {{"corpus", nullptr},
                   {"out", nullptr},
                   {"coarse_ckpt", nullptr},
                   {"metrics_out", nullptr},
                   {"model", json::parse(model_defaults.to_json())},
                   {"train", json::parse(train_defaults.to_json())},
                   {"split", split_defaults()}};
    overlay_file(config, f.config_path);
    if (f.model_opt->count()) config["model"]["kind"] = f.model;
    if (f.corpus_opt->count()) config["corpus"] = f.corpus;
    if (f.out_opt->count()) config["out"] = f.out;
    if (f.coarse_opt->count()) config["coarse_ckpt"] = f.coarse_ckpt;
    if (f.metrics_opt->count()) config["metrics_out"] = f.metrics_out;
    if (f.seed_opt->count()) {
        config["model"]["seed"] = f.seed;
        config["train"]["seed"] = f.seed;
    }
    if (f.epochs_opt->count()) config["train"]["epochs"] = f.epochs;
    if (f.lr_opt->count()) config["train"]["learning_rate"] = f.lr;
    if (f.batch_opt->count()) config["train"]["batch_size"] = f.batch;
    if (f.threads_opt->count()) config["train"]["eval_threads"] = f.threads;

    ModelConfig model_config;
    TrainConfig train_config;
    try {
        model_config = ModelConfig::from_json(config["model"].dump());
        train_config = TrainConfig::from_json(config["train"].dump());
        train_config.validate();
    } catch (const FormatError& e) {
        throw UsageError(e.what());
    } catch (const PreconditionError& e) {
        throw UsageError(e.what());
    }
    const std::string corpus = take_path(config, "corpus");
    const std::string out = take_path(config, "out");
    require_file(corpus, "corpus");
    if (out.empty()) throw UsageError("train: --out is required");

    std::unique_ptr<SnippetModel> coarse;
    if (model_config.kind == ModelKind::Fine) {
        coarse = load_model(take_path(config, "coarse_ckpt"), "coarse checkpoint", ModelKind::Coarse);
    }
    CorpusStats stats;
    DataSplit split = split_from(load_corpus(corpus, model_config.lengths.max_sentences, &stats), config["split"]);
    config["split"] = {{"train", split.train.size()}, {"validation", split.validation.size()}};

    // A fine reranker shares the coarse vocabulary; otherwise it comes from the training split.
    Vocab vocab;
    if (coarse) {
        vocab = coarse->vocab();
    } else {
        std::vector<std::string> texts;
        for (const auto& d : split.train) {
            texts.push_back(d.query);
            texts.push_back(d.title);
            texts.insert(texts.end(), d.sentences.begin(), d.sentences.end());
        }
        const std::size_t cap = model_config.encoder.vocab_size;
        vocab = Vocab::from_texts(texts, cap > kNumSpecialTokens ? cap - kNumSpecialTokens : 0);
    }
    std::unique_ptr<SnippetModel> model;
    try {
        model = make_model(model_config, vocab);
    } catch (const PreconditionError& e) {
        throw UsageError(e.what());
    }
    config["model"] = json::parse(model->config().to_json());

    const std::string metrics_out = take_path(config, "metrics_out");
    std::ofstream metrics;
    if (!metrics_out.empty()) {
        metrics.open(metrics_out, std::ios::trunc);
        if (!metrics) throw Error("cannot write " + metrics_out);
    }
    const TrainResult result =
        train(*model, split.train, split.validation, train_config, static_cast<const CoarseSelector*>(coarse.get()),
              [&](const EpochMetrics& m) {
                  std::cerr << m.to_json() << '\n';
                  if (metrics) metrics << m.to_json() << '\n';
              });
    save_checkpoint(*model, out);

    json history = json::array();
    for (const auto& m : result.history) history.push_back(json::parse(m.to_json()));
    return {{"command", "train"},
            {"config", config},
            {"checkpoint", out},
            {"fingerprint", to_hex(model->fingerprint())},
            {"best_epoch", result.best_epoch},
            {"best_validation_p_at_1", result.best_p_at_1},
            {"epochs_run", result.epochs_run},
            {"stopped_early", result.stopped_early},
            {"corpus_stats",
             {{"loaded", stats.loaded},
              {"truncated_documents", stats.truncated_documents},
              {"skipped_label_out_of_range", stats.skipped_label_out_of_range},
              {"skipped_empty_documents", stats.skipped_empty_documents}}},
            {"history", history}};
}

// ---------------------------------------------------------------- index

struct IndexFlags {
    std::string config_path;
    std::string coarse_ckpt;
    std::string corpus;
    std::string out;
    CLI::Option* coarse_opt = nullptr;
    CLI::Option* corpus_opt = nullptr;
    CLI::Option* out_opt = nullptr;
};

json cmd_index(const IndexFlags& f) {
    json config = {{"coarse_ckpt", nullptr}, {"corpus", nullptr}, {"out", nullptr}};
    overlay_file(config, f.config_path);
    if (f.coarse_opt->count()) config["coarse_ckpt"] = f.coarse_ckpt;
    if (f.corpus_opt->count()) config["corpus"] = f.corpus;
    if (f.out_opt->count()) config["out"] = f.out;
    const auto model = load_model(take_path(config, "coarse_ckpt"), "coarse checkpoint", ModelKind::Coarse);
    const std::string corpus = take_path(config, "corpus");
    require_file(corpus, "corpus");
    const std::string out = take_path(config, "out");
    if (out.empty()) throw UsageError("index: --out is required");
    const auto& coarse = static_cast<const CoarseSelector&>(*model);
    const auto docs = load_corpus(corpus, coarse.config().lengths.max_sentences);
    build_cache(coarse, docs, out);
    return {{"command", "index"},
            {"config", config},
            {"documents", docs.size()},
            {"fingerprint", to_hex(coarse.fingerprint())},
            {"bytes", std::filesystem::file_size(out)},
            {"sha256", sha256_file(out)}};
}

// ---------------------------------------------------------------- extract

struct ExtractFlags {
    std::string config_path;
    std::string query;
    std::string doc_id;
    std::string corpus;
    std::string cache;
    std::string coarse_ckpt;
    std::string fine_ckpt;
    std::string deepqse_ckpt;
    std::size_t k = 0;
    std::size_t n = 0;
    bool single = false;
};

const ExtractionExample& find_document(const std::vector<ExtractionExample>& docs, const std::string& id) {
    for (const auto& d : docs) {
        if (d.id == id) return d;
    }
    throw NotFoundError("document '" + id + "' not in corpus");
}

json cmd_extract(const ExtractFlags& f, const json& flag_values) {
    json config = {{"query", nullptr},       {"doc_id", nullptr},    {"corpus", nullptr},
                   {"cache", nullptr},       {"coarse_ckpt", nullptr}, {"fine_ckpt", nullptr},
                   {"deepqse_ckpt", nullptr}, {"single", false},      {"k", nullptr},
                   {"n", 2}};
    overlay_file(config, f.config_path);
    for (auto it = flag_values.begin(); it != flag_values.end(); ++it) config[it.key()] = *it;

    if (config["query"].is_null() || config["doc_id"].is_null()) {
        throw UsageError("extract: --query and --doc-id are required");
    }
    const auto query = take<std::string>(config, "query");
    const auto doc_id = take<std::string>(config, "doc_id");
    const auto n = take<std::size_t>(config, "n");
    if (n < 1) throw UsageError("extract: --n must be >= 1");
    const std::string corpus = take_path(config, "corpus");
    require_file(corpus, "corpus");

    SnippetResult result;
    if (take<bool>(config, "single")) {
        const auto model = load_model(take_path(config, "deepqse_ckpt"), "DeepQSE checkpoint", ModelKind::DeepQSE);
        const auto docs = load_corpus(corpus, model->config().lengths.max_sentences);
        result = extract_snippet_single(query, find_document(docs, doc_id),
                                        static_cast<const DeepQSEModel&>(*model), n);
    } else {
        const auto coarse = load_model(take_path(config, "coarse_ckpt"), "coarse checkpoint", ModelKind::Coarse);
        std::unique_ptr<SnippetModel> fine;
        if (!config["fine_ckpt"].is_null()) {
            fine = load_model(take_path(config, "fine_ckpt"), "fine checkpoint", ModelKind::Fine);
        }
        const std::string cache_path = take_path(config, "cache");
        require_file(cache_path, "cache");
        const SentenceCache cache = SentenceCache::load(cache_path);
        ServeOptions options;
        options.snippet_length = n;
        options.candidates = config["k"].is_null() ? (fine ? fine->config().candidates : 1)
                                                   : take<std::size_t>(config, "k");
        if (options.candidates < 1) throw UsageError("extract: --k must be >= 1");
        config["k"] = options.candidates;
        const auto docs = load_corpus(corpus, coarse->config().lengths.max_sentences);
        result = extract_snippet(query, find_document(docs, doc_id), cache,
                                 static_cast<const CoarseSelector&>(*coarse),
                                 static_cast<const FineReranker*>(fine.get()), options);
    }
    json out = json::parse(result.to_json());
    out["config"] = config;
    return out;
}

// ---------------------------------------------------------------- eval

struct EvalFlags {
    std::string config_path;
    std::string model_ckpt;
    std::string coarse_ckpt;
    std::string baseline;
    std::string corpus;
    std::string pairs;
    std::string split;
    std::string report_out;
    std::size_t threads = 1;
};

json cmd_eval(const json& config_flags, const std::string& config_path) {
    json config = {{"model_ckpt", nullptr}, {"coarse_ckpt", nullptr}, {"baseline", nullptr},
                   {"corpus", nullptr},     {"pairs", nullptr},       {"split", "all"},
                   {"split_sizes", split_defaults()}, {"threads", 1}, {"report_out", nullptr}};
    overlay_file(config, config_path);
    for (auto it = config_flags.begin(); it != config_flags.end(); ++it) config[it.key()] = *it;

    const bool have_model = !config["model_ckpt"].is_null();
    const bool have_baseline = !config["baseline"].is_null();
    if (have_model == have_baseline) throw UsageError("eval: give exactly one of --model or --baseline");
    const std::string corpus = take_path(config, "corpus");
    const std::string pairs_path = take_path(config, "pairs");
    if (corpus.empty() && pairs_path.empty()) throw UsageError("eval: give --corpus and/or --pairs");
    const auto threads = take<std::size_t>(config, "threads");
    if (threads < 1) throw UsageError("eval: --threads must be >= 1");

    std::unique_ptr<SnippetModel> model, coarse;
    Scorer scorer;
    Ranker ranker;
    std::size_t max_sentences = LengthBudget{}.max_sentences;
    if (have_model) {
        model = load_model(take_path(config, "model_ckpt"), "model checkpoint");
        max_sentences = model->config().lengths.max_sentences;
        if (model->kind() == ModelKind::Fine) {
            coarse = load_model(take_path(config, "coarse_ckpt"), "coarse checkpoint", ModelKind::Coarse);
        }
        ranker = model_ranker(*model, static_cast<const CoarseSelector*>(coarse.get()));
        const SnippetModel* m = model.get();
        scorer = [m](const ExtractionExample& ex) { return m->infer(m->prepare(ex)); };
    } else {
        const auto name = take<std::string>(config, "baseline");
        if (name == "bm25") {
            scorer = [](const ExtractionExample& ex) { return bm25_score(ex.query, ex.sentences); };
        } else if (name == "cts") {
            scorer = [](const ExtractionExample& ex) { return cts_score(ex.query, ex.sentences); };
        } else {
            throw UsageError("eval: unknown baseline '" + name + "' (expected bm25 or cts)");
        }
        ranker = ranker_from_scorer(scorer);
    }

    EvalReport report;
    if (!corpus.empty()) {
        require_file(corpus, "corpus");
        auto docs = load_corpus(corpus, max_sentences);
        const auto which = take<std::string>(config, "split");
        if (which != "all") {
            DataSplit s = split_from(std::move(docs), config["split_sizes"]);
            if (which == "train") docs = std::move(s.train);
            else if (which == "validation") docs = std::move(s.validation);
            else if (which == "test") docs = std::move(s.test);
            else throw UsageError("eval: --split must be all, train, validation or test");
        }
        report = evaluate(docs, ranker, threads);
        report.check();
    }
    if (!pairs_path.empty()) {
        require_file(pairs_path, "pairs file");
        const PairwiseResult pr = pairwise_accuracy(load_pairs(pairs_path), scorer);
        report.pairwise_accuracy = pr.accuracy;
        report.skipped_pairs = pr.skipped;
    }
    json out = {{"command", "eval"}, {"config", config}, {"report", json::parse(report.to_json())}};
    const std::string report_out = take_path(config, "report_out");
    if (!report_out.empty()) write_text(report_out, out.dump(2) + "\n");
    return out;
}

// ---------------------------------------------------------------- bench

json cmd_bench(const json& config_flags, const std::string& config_path) {
    json config = {{"pipeline", "efficient"}, {"deepqse_ckpt", nullptr}, {"coarse_ckpt", nullptr},
                   {"fine_ckpt", nullptr},    {"corpus", nullptr},       {"sample", 20},
                   {"reps", 10},              {"warmup", 3},             {"k", nullptr},
                   {"report_out", nullptr}};
    overlay_file(config, config_path);
    for (auto it = config_flags.begin(); it != config_flags.end(); ++it) config[it.key()] = *it;

    PipelineKind kind;
    try {
        kind = parse_pipeline_kind(take<std::string>(config, "pipeline"));
    } catch (const PreconditionError& e) {
        throw UsageError(e.what());
    }
    const std::string corpus = take_path(config, "corpus");
    require_file(corpus, "corpus");
    const auto reps = take<std::size_t>(config, "reps");
    const auto warmup = take<std::size_t>(config, "warmup");
    if (reps < 1 || warmup < 3) throw UsageError("bench: need --reps >= 1 and --warmup >= 3");

    std::unique_ptr<SnippetModel> deep, coarse, fine;
    const SnippetModel* reference = nullptr;
    if (kind == PipelineKind::DeepQSE) {
        deep = load_model(take_path(config, "deepqse_ckpt"), "DeepQSE checkpoint", ModelKind::DeepQSE);
        reference = deep.get();
    } else {
        if (kind != PipelineKind::EfficientNoCoarse) {
            coarse = load_model(take_path(config, "coarse_ckpt"), "coarse checkpoint", ModelKind::Coarse);
            reference = coarse.get();
        }
        if (kind != PipelineKind::EfficientNoFine) {
            fine = load_model(take_path(config, "fine_ckpt"), "fine checkpoint", ModelKind::Fine);
            if (!reference) reference = fine.get();
            const bool cross = fine->config().cross_transformer;
            if ((kind == PipelineKind::EfficientNoCross) == cross) {
                throw UsageError("bench: pipeline " + to_string(kind) + " needs a fine checkpoint with cross_transformer=" +
                                 (cross ? "false" : "true"));
            }
        }
    }
    const std::size_t k = config["k"].is_null() ? (fine ? fine->config().candidates : 0) : take<std::size_t>(config, "k");
    config["k"] = k;
    if (fine && k < 1) throw UsageError("bench: --k must be >= 1");

    auto docs = load_corpus(corpus, reference->config().lengths.max_sentences);
    const auto sample_size = take<std::size_t>(config, "sample");
    if (docs.size() > sample_size) docs.resize(sample_size);

    std::optional<SentenceCache> cache;
    if (coarse) cache = build_cache(static_cast<const CoarseSelector&>(*coarse), docs);
    ServeOptions options;
    options.candidates = std::max<std::size_t>(k, 1);
    Request request;
    switch (kind) {
        case PipelineKind::DeepQSE:
            request = [&](const ExtractionExample& ex) {
                extract_snippet_single(ex.query, ex, static_cast<const DeepQSEModel&>(*deep));
            };
            break;
        case PipelineKind::EfficientNoCoarse:
            request = [&](const ExtractionExample& ex) { fine->infer(fine->prepare(ex)); };
            break;
        default:
            request = [&](const ExtractionExample& ex) {
                extract_snippet(ex.query, ex, *cache, static_cast<const CoarseSelector&>(*coarse),
                                static_cast<const FineReranker*>(fine.get()), options);
            };
    }
    const LatencyReport latency = latency_bench(request, docs, reps, warmup);

    FlopsMeter meter;
    {
        MeterScope scope(meter);
        for (const auto& ex : docs) request(ex);
    }
    const ModelConfig& mc = reference->config();
    const FlopsEstimate analytic =
        flops_estimate(kind, FlopsQuery::at_caps(mc.encoder, mc.lengths, mc.lengths.max_sentences, k));
    json out = {{"command", "bench"},
                {"config", config},
                {"latency", json::parse(latency.to_json())},
                {"measured_flops_per_request", meter.total() / std::max<std::size_t>(docs.size(), 1)},
                {"analytic_flops_at_caps", json::parse(analytic.to_json())}};
    const std::string report_out = take_path(config, "report_out");
    if (!report_out.empty()) write_text(report_out, out.dump(2) + "\n");
    return out;
}

// Flags given on the command line, keyed by config name.
json given(const std::vector<std::pair<std::string, CLI::Option*>>& opts,
           const std::function<json(const std::string&)>& value) {
    json j = json::object();
    for (const auto& [key, opt] : opts) {
        if (opt->count()) j[key] = value(key);
    }
    return j;
}

void print_error(int code, const std::string& type, const std::string& message) {
    std::cerr << json{{"error", {{"code", code}, {"type", type}, {"message", message}}}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"snipforge: query-aware snippet extraction"};
    app.require_subcommand(1);
    Output output;
    app.add_flag("--pretty", output.pretty, "Human-readable key/value output instead of JSON");

    SynthFlags synth;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic labeled corpus (JSONL)");
    synth_cmd->add_option("--config", synth.config_path, "JSON config overlay");
    synth.seed_opt = synth_cmd->add_option("--seed", synth.seed, "Seed (default: SNIPFORGE_SEED or 7)");
    synth.docs_opt = synth_cmd->add_option("--docs", synth.docs, "Number of documents");
    synth.out_opt = synth_cmd->add_option("--out", synth.out, "Output corpus path");

    TrainFlags tr;
    auto* train_cmd = app.add_subcommand("train", "Train a deepqse, coarse or fine model");
    train_cmd->add_option("--config", tr.config_path, "JSON config overlay");
    tr.model_opt = train_cmd->add_option("--model", tr.model, "deepqse | coarse | fine")
                       ->check(CLI::IsMember({"deepqse", "coarse", "fine"}));
    tr.corpus_opt = train_cmd->add_option("--corpus", tr.corpus, "Training corpus (JSONL)");
    tr.out_opt = train_cmd->add_option("--out", tr.out, "Checkpoint output path");
    tr.coarse_opt = train_cmd->add_option("--coarse-ckpt", tr.coarse_ckpt, "Coarse checkpoint (fine only)");
    tr.metrics_opt = train_cmd->add_option("--metrics-out", tr.metrics_out, "Per-epoch metrics JSONL");
    tr.seed_opt = train_cmd->add_option("--seed", tr.seed, "Seed for init, shuffling and dropout");
    tr.epochs_opt = train_cmd->add_option("--epochs", tr.epochs);
    tr.lr_opt = train_cmd->add_option("--lr", tr.lr);
    tr.batch_opt = train_cmd->add_option("--batch-size", tr.batch);
    tr.threads_opt = train_cmd->add_option("--threads", tr.threads, "Validation threads");

    IndexFlags ix;
    auto* index_cmd = app.add_subcommand("index", "Build the offline coarse sentence cache");
    index_cmd->add_option("--config", ix.config_path, "JSON config overlay");
    ix.coarse_opt = index_cmd->add_option("--coarse-ckpt", ix.coarse_ckpt);
    ix.corpus_opt = index_cmd->add_option("--corpus", ix.corpus);
    ix.out_opt = index_cmd->add_option("--out", ix.out);

    ExtractFlags ex;
    auto* extract_cmd = app.add_subcommand("extract", "Extract a snippet for one (query, document)");
    extract_cmd->add_option("--config", ex.config_path, "JSON config overlay");
    std::vector<std::pair<std::string, CLI::Option*>> ex_opts = {
        {"query", extract_cmd->add_option("--query", ex.query)},
        {"doc_id", extract_cmd->add_option("--doc-id", ex.doc_id)},
        {"corpus", extract_cmd->add_option("--corpus", ex.corpus, "Corpus holding the document text")},
        {"cache", extract_cmd->add_option("--cache", ex.cache)},
        {"coarse_ckpt", extract_cmd->add_option("--coarse-ckpt", ex.coarse_ckpt)},
        {"fine_ckpt", extract_cmd->add_option("--fine-ckpt", ex.fine_ckpt, "Omit for coarse-only")},
        {"deepqse_ckpt", extract_cmd->add_option("--deepqse-ckpt", ex.deepqse_ckpt)},
        {"k", extract_cmd->add_option("--k", ex.k, "Candidates (default: fine checkpoint's K)")},
        {"n", extract_cmd->add_option("--n", ex.n, "Snippet length in sentences (default 2)")},
        {"single", extract_cmd->add_flag("--single", ex.single, "Single-stage DeepQSE path")},
    };

    EvalFlags ev;
    auto* eval_cmd = app.add_subcommand("eval", "P@k and pairwise accuracy of a model or baseline");
    eval_cmd->add_option("--config", ev.config_path, "JSON config overlay");
    std::vector<std::pair<std::string, CLI::Option*>> ev_opts = {
        {"model_ckpt", eval_cmd->add_option("--model", ev.model_ckpt, "Checkpoint to evaluate")},
        {"coarse_ckpt", eval_cmd->add_option("--coarse-ckpt", ev.coarse_ckpt, "Coarse stage for a fine model")},
        {"baseline", eval_cmd->add_option("--baseline", ev.baseline, "bm25 | cts")},
        {"corpus", eval_cmd->add_option("--corpus", ev.corpus)},
        {"pairs", eval_cmd->add_option("--pairs", ev.pairs, "Pairwise-label JSONL")},
        {"split", eval_cmd->add_option("--split", ev.split, "all | train | validation | test")},
        {"threads", eval_cmd->add_option("--threads", ev.threads)},
        {"report_out", eval_cmd->add_option("--report-out", ev.report_out)},
    };

    std::string bench_config, bench_pipeline, bench_deep, bench_coarse, bench_fine, bench_corpus, bench_report;
    std::size_t bench_sample = 0, bench_reps = 0, bench_warmup = 0, bench_k = 0;
    auto* bench_cmd = app.add_subcommand("bench", "Latency and FLOPs of a serving pipeline");
    bench_cmd->add_option("--config", bench_config, "JSON config overlay");
    std::vector<std::pair<std::string, CLI::Option*>> bench_opts = {
        {"pipeline", bench_cmd->add_option("--pipeline", bench_pipeline,
                                           "deepqse | efficient | efficient_no_coarse | efficient_no_fine | "
                                           "efficient_no_cross")},
        {"deepqse_ckpt", bench_cmd->add_option("--deepqse-ckpt", bench_deep)},
        {"coarse_ckpt", bench_cmd->add_option("--coarse-ckpt", bench_coarse)},
        {"fine_ckpt", bench_cmd->add_option("--fine-ckpt", bench_fine)},
        {"corpus", bench_cmd->add_option("--corpus", bench_corpus)},
        {"sample", bench_cmd->add_option("--sample", bench_sample, "Documents per pass")},
        {"reps", bench_cmd->add_option("--reps", bench_reps, "Timed passes")},
        {"warmup", bench_cmd->add_option("--warmup", bench_warmup, "Untimed passes (>= 3)")},
        {"k", bench_cmd->add_option("--k", bench_k)},
        {"report_out", bench_cmd->add_option("--report-out", bench_report)},
    };

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error(kUsage, "usage", e.what());
        return kUsage;
    }

    try {
        json result;
        if (*synth_cmd) {
            result = cmd_synth(synth);
        } else if (*train_cmd) {
            result = cmd_train(tr);
        } else if (*index_cmd) {
            result = cmd_index(ix);
        } else if (*extract_cmd) {
            result = cmd_extract(ex, given(ex_opts, [&](const std::string& key) -> json {
                                     if (key == "query") return ex.query;
                                     if (key == "doc_id") return ex.doc_id;
                                     if (key == "corpus") return ex.corpus;
                                     if (key == "cache") return ex.cache;
                                     if (key == "coarse_ckpt") return ex.coarse_ckpt;
                                     if (key == "fine_ckpt") return ex.fine_ckpt;
                                     if (key == "deepqse_ckpt") return ex.deepqse_ckpt;
                                     if (key == "k") return ex.k;
                                     if (key == "n") return ex.n;
                                     return ex.single;
                                 }));
        } else if (*eval_cmd) {
            result = cmd_eval(given(ev_opts,
                                    [&](const std::string& key) -> json {
                                        if (key == "model_ckpt") return ev.model_ckpt;
                                        if (key == "coarse_ckpt") return ev.coarse_ckpt;
                                        if (key == "baseline") return ev.baseline;
                                        if (key == "corpus") return ev.corpus;
                                        if (key == "pairs") return ev.pairs;
                                        if (key == "split") return ev.split;
                                        if (key == "threads") return ev.threads;
                                        return ev.report_out;
                                    }),
                              ev.config_path);
        } else {
            result = cmd_bench(given(bench_opts,
                                     [&](const std::string& key) -> json {
                                         if (key == "pipeline") return bench_pipeline;
                                         if (key == "deepqse_ckpt") return bench_deep;
                                         if (key == "coarse_ckpt") return bench_coarse;
                                         if (key == "fine_ckpt") return bench_fine;
                                         if (key == "corpus") return bench_corpus;
                                         if (key == "sample") return bench_sample;
                                         if (key == "reps") return bench_reps;
                                         if (key == "warmup") return bench_warmup;
                                         if (key == "k") return bench_k;
                                         return bench_report;
                                     }),
                               bench_config);
        }
        output.emit(result);
        return kOk;
    } catch (const UsageError& e) {
        print_error(kUsage, "usage", e.what());
        return kUsage;
    } catch (const NotFoundError& e) {
        print_error(kMissingFile, "not_found", e.what());
        return kMissingFile;
    } catch (const StaleCacheError& e) {
        print_error(kFingerprint, "fingerprint_mismatch", e.what());
        return kFingerprint;
    } catch (const FormatError& e) {
        print_error(kFailure, "format", e.what());
        return kFailure;
    } catch (const std::exception& e) {
        print_error(kFailure, "error", e.what());
        return kFailure;
    }
}
