#include "snipforge/models.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "snipforge/rng.hpp"

namespace snipforge {

namespace {

using json = nlohmann::ordered_json;

constexpr std::string_view kCheckpointMagic = "SNIPCKPT1";
constexpr int kCheckpointVersion = 1;

template <typename T>
void overlay(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; })) {
            throw FormatError(where + ": unknown key '" + it.key() + "'");
        }
    }
}

json config_to_json(const ModelConfig& c) {
    json j;
    j["kind"] = to_string(c.kind);
    j["encoder"] = {{"dim", c.encoder.dim},
                    {"heads", c.encoder.heads},
                    {"layers", c.encoder.layers},
                    {"ff_dim", c.encoder.ff_dim},
                    {"max_positions", c.encoder.max_positions},
                    {"vocab_size", c.encoder.vocab_size},
                    {"relevance_layers", c.encoder.relevance_layers},
                    {"relevance_positions", c.encoder.relevance_positions},
                    {"dropout", c.encoder.dropout}};
    j["lengths"] = {{"max_query", c.lengths.max_query},
                    {"max_title", c.lengths.max_title},
                    {"max_sentence", c.lengths.max_sentence},
                    {"max_sentences", c.lengths.max_sentences}};
    j["ablation"] = {{"no_title", c.ablation.no_title},
                     {"no_query", c.ablation.no_query},
                     {"no_dare", c.ablation.no_dare}};
    j["cross_transformer"] = c.cross_transformer;
    j["candidates"] = c.candidates;
    j["seed"] = c.seed;
    return j;
}

ModelConfig config_from_json(const json& j) {
    if (!j.is_object()) throw FormatError("model config: expected a JSON object");
    reject_unknown(j, {"kind", "encoder", "lengths", "ablation", "cross_transformer", "candidates", "seed"},
                   "model config");
    ModelConfig c;
    try {
        if (j.contains("kind")) c.kind = parse_model_kind(j.at("kind").get<std::string>());
        if (j.contains("encoder")) {
            const auto& e = j.at("encoder");
            reject_unknown(e, {"dim", "heads", "layers", "ff_dim", "max_positions", "vocab_size",
                               "relevance_layers", "relevance_positions", "dropout"},
                           "model config.encoder");
            overlay(e, "dim", c.encoder.dim);
            overlay(e, "heads", c.encoder.heads);
            overlay(e, "layers", c.encoder.layers);
            overlay(e, "ff_dim", c.encoder.ff_dim);
            overlay(e, "max_positions", c.encoder.max_positions);
            overlay(e, "vocab_size", c.encoder.vocab_size);
            overlay(e, "relevance_layers", c.encoder.relevance_layers);
            overlay(e, "relevance_positions", c.encoder.relevance_positions);
            overlay(e, "dropout", c.encoder.dropout);
        }
        if (j.contains("lengths")) {
            const auto& l = j.at("lengths");
            reject_unknown(l, {"max_query", "max_title", "max_sentence", "max_sentences"},
                           "model config.lengths");
            overlay(l, "max_query", c.lengths.max_query);
            overlay(l, "max_title", c.lengths.max_title);
            overlay(l, "max_sentence", c.lengths.max_sentence);
            overlay(l, "max_sentences", c.lengths.max_sentences);
        }
        if (j.contains("ablation")) {
            const auto& a = j.at("ablation");
            reject_unknown(a, {"no_title", "no_query", "no_dare"}, "model config.ablation");
            overlay(a, "no_title", c.ablation.no_title);
            overlay(a, "no_query", c.ablation.no_query);
            overlay(a, "no_dare", c.ablation.no_dare);
        }
        overlay(j, "cross_transformer", c.cross_transformer);
        overlay(j, "candidates", c.candidates);
        overlay(j, "seed", c.seed);
    } catch (const json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
    return c;
}

void append_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint64_t read_u64_le(const std::string& bytes, std::size_t offset) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
    }
    return v;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Fields are dropped (not blanked) under ablation, so no stray [SEP] remains.
std::vector<FieldInput> without_empty_slots(std::vector<FieldInput> fields) {
    if (fields.empty()) fields.push_back({{}, 0, Segment::Query});
    return fields;
}

}  // namespace

std::string to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::DeepQSE: return "deepqse";
        case ModelKind::Coarse: return "coarse";
        case ModelKind::Fine: return "fine";
    }
    return "unknown";
}

ModelKind parse_model_kind(std::string_view name) {
    if (name == "deepqse") return ModelKind::DeepQSE;
    if (name == "coarse") return ModelKind::Coarse;
    if (name == "fine") return ModelKind::Fine;
    throw PreconditionError("unknown model kind '" + std::string(name) +
                            "' (expected deepqse, coarse or fine)");
}

void ModelConfig::validate() const {
    encoder.validate();
    lengths.validate();
    if (candidates < 1) throw PreconditionError("model config: K must be >= 1");
    if (encoder.relevance_positions < lengths.max_sentences + 1) {
        throw PreconditionError("model config: relevance positions " +
                                std::to_string(encoder.relevance_positions) + " < R + 1 = " +
                                std::to_string(lengths.max_sentences + 1));
    }
}

std::string ModelConfig::to_json() const { return config_to_json(*this).dump(); }

ModelConfig ModelConfig::from_json(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
    return config_from_json(j);
}

std::string to_hex(const Fingerprint& fp) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    for (auto b : fp) {
        out.push_back(kDigits[b >> 4]);
        out.push_back(kDigits[b & 0xf]);
    }
    return out;
}

Fingerprint sha256(std::string_view bytes) {
    Fingerprint out{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
        len != out.size()) {
        throw Error("sha256 digest failed");
    }
    return out;
}

SnippetModel::SnippetModel(ModelConfig config, Vocab vocab)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
    if (config_.encoder.vocab_size == 0) config_.encoder.vocab_size = vocab_.size();
    if (config_.encoder.vocab_size != vocab_.size()) {
        throw PreconditionError("model config vocab size " + std::to_string(config_.encoder.vocab_size) +
                                " != vocabulary size " + std::to_string(vocab_.size()));
    }
    config_.validate();
}

Rng SnippetModel::init_rng() const { return Rng(config_.seed).split("init").split(to_string(config_.kind)); }

std::size_t SnippetModel::usable_sentences(const TokenizedExample& example) const {
    return std::min(example.sentences.size(), config_.lengths.max_sentences);
}

TokenizedExample SnippetModel::prepare(const ExtractionExample& example) const {
    TokenizedExample t = tokenize_example(example, vocab_);
    if (t.sentences.size() > config_.lengths.max_sentences) t.sentences.resize(config_.lengths.max_sentences);
    if (t.gold_start && *t.gold_start >= t.sentences.size()) t.gold_start.reset();
    return t;
}

EncodedField SnippetModel::query_title_field(const TokenizedExample& ex) const {
    std::vector<FieldInput> fields;
    if (!config_.ablation.no_query) fields.push_back({ex.query, config_.lengths.max_query, Segment::Query});
    if (!config_.ablation.no_title) fields.push_back({ex.title, config_.lengths.max_title, Segment::Title});
    return encode_concat(without_empty_slots(std::move(fields)), config_.encoder.max_positions);
}

EncodedField SnippetModel::joint_field(const TokenizedExample& ex, std::size_t sentence) const {
    std::vector<FieldInput> fields;
    if (!config_.ablation.no_title) fields.push_back({ex.title, config_.lengths.max_title, Segment::Title});
    if (!config_.ablation.no_query) fields.push_back({ex.query, config_.lengths.max_query, Segment::Query});
    fields.push_back({ex.sentences.at(sentence), config_.lengths.max_sentence, Segment::Sentence});
    return encode_concat(fields, config_.encoder.max_positions);
}

EncodedField SnippetModel::title_sentence_field(const std::vector<int>& title,
                                                const std::vector<int>& sentence) const {
    std::vector<FieldInput> fields;
    if (!config_.ablation.no_title) fields.push_back({title, config_.lengths.max_title, Segment::Title});
    fields.push_back({sentence, config_.lengths.max_sentence, Segment::Sentence});
    return encode_concat(fields, config_.encoder.max_positions);
}

EncodedField SnippetModel::sentence_field(const std::vector<int>& sentence) const {
    return encode_concat({{sentence, config_.lengths.max_sentence, Segment::Sentence}},
                         config_.encoder.max_positions);
}

Tensor SnippetModel::score_all(const TokenizedExample& example, const ForwardContext& ctx) const {
    std::vector<std::size_t> all(usable_sentences(example));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return score(example, all, ctx);
}

std::vector<double> SnippetModel::infer(const TokenizedExample& example) const {
    NoGradGuard guard;
    const Tensor scores = score_all(example);
    return {scores.data().begin(), scores.data().end()};
}

Fingerprint SnippetModel::fingerprint() const {
    if (fingerprint_) return *fingerprint_;
    return sha256(serialize_checkpoint(*this));
}

namespace {

void check_subset(const std::vector<std::size_t>& sentences, std::size_t usable) {
    if (sentences.empty()) throw PreconditionError("score: no sentences to score");
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        if (sentences[i] >= usable) {
            throw PreconditionError("score: sentence index " + std::to_string(sentences[i]) +
                                    " outside the " + std::to_string(usable) + " usable sentences");
        }
        if (i > 0 && sentences[i] <= sentences[i - 1]) {
            throw PreconditionError("score: sentence indices must be strictly ascending");
        }
    }
}

}  // namespace

DeepQSEModel::DeepQSEModel(ModelConfig config, Vocab vocab)
    : SnippetModel(std::move(config), std::move(vocab)) {
    Rng rng = init_rng();
    Rng mirror = rng;
    query_encoder_ = TextEncoder(params_, "query_encoder", config_.encoder, rng);
    sentence_encoder_ = TextEncoder(params_, "sentence_encoder", config_.encoder, mirror);
    relevance_ = RelevanceEncoder(params_, "relevance", config_.encoder, rng, !config_.ablation.no_dare);
}

Tensor DeepQSEModel::score(const TokenizedExample& example, const std::vector<std::size_t>& sentences,
                           const ForwardContext& ctx) const {
    check_subset(sentences, usable_sentences(example));
    const Tensor g_q = encode_query(query_encoder_, query_title_field(example), ctx).representation;
    std::vector<Tensor> reps;
    reps.reserve(sentences.size());
    for (std::size_t i : sentences) {
        reps.push_back(encode_sentence_joint(sentence_encoder_, joint_field(example, i), ctx));
    }
    return relevance_encode(relevance_, {g_q, concat_rows(reps), sentences, {}}, ctx);
}

CoarseSelector::CoarseSelector(ModelConfig config, Vocab vocab)
    : SnippetModel(std::move(config), std::move(vocab)) {
    Rng rng = init_rng();
    Rng mirror = rng;
    query_encoder_ = TextEncoder(params_, "query_encoder", config_.encoder, rng);
    sentence_encoder_ = TextEncoder(params_, "sentence_encoder", config_.encoder, mirror);
    relevance_ = RelevanceEncoder(params_, "relevance", config_.encoder, rng, !config_.ablation.no_dare);
}

Tensor CoarseSelector::query_representation(const TokenizedExample& example,
                                            const ForwardContext& ctx) const {
    return row(query_encoder_.encode(query_title_field(example), ctx), 0);
}

Tensor CoarseSelector::sentence_representation(const std::vector<int>& title,
                                               const std::vector<int>& sentence,
                                               const ForwardContext& ctx) const {
    return encode_sentence_plain(sentence_encoder_, title_sentence_field(title, sentence), ctx);
}

Tensor CoarseSelector::sentence_representations(const TokenizedExample& example,
                                                const std::vector<std::size_t>& sentences,
                                                const ForwardContext& ctx) const {
    check_subset(sentences, usable_sentences(example));
    std::vector<Tensor> reps;
    reps.reserve(sentences.size());
    for (std::size_t i : sentences) {
        reps.push_back(sentence_representation(example.title, example.sentences[i], ctx));
    }
    return concat_rows(reps);
}

Tensor CoarseSelector::score_from_representations(const Tensor& query_rep, const Tensor& sentence_reps,
                                                  const std::vector<std::size_t>& positions,
                                                  const ForwardContext& ctx) const {
    return relevance_encode(relevance_, {query_rep, sentence_reps, positions, {}}, ctx);
}

Tensor CoarseSelector::score(const TokenizedExample& example, const std::vector<std::size_t>& sentences,
                             const ForwardContext& ctx) const {
    const Tensor h_q = query_representation(example, ctx);
    return score_from_representations(h_q, sentence_representations(example, sentences, ctx), sentences,
                                      ctx);
}

FineReranker::FineReranker(ModelConfig config, Vocab vocab)
    : SnippetModel(std::move(config), std::move(vocab)) {
    Rng rng = init_rng();
    // Both encoders start from the same draw, so cross attention initially lines up
    // sentence queries with matching query-side keys.
    Rng mirror = rng;
    query_encoder_ = TextEncoder(params_, "query_encoder", config_.encoder, rng);
    sentence_encoder_ = TextEncoder(params_, "sentence_encoder", config_.encoder, mirror);
    relevance_ = RelevanceEncoder(params_, "relevance", config_.encoder, rng, !config_.ablation.no_dare);
}

QueryKV FineReranker::query_kv(const TokenizedExample& example, const ForwardContext& ctx) const {
    return encode_query(query_encoder_, query_title_field(example), ctx);
}

Tensor FineReranker::score(const TokenizedExample& example, const std::vector<std::size_t>& sentences,
                           const ForwardContext& ctx) const {
    check_subset(sentences, usable_sentences(example));
    std::vector<Tensor> reps;
    reps.reserve(sentences.size());
    Tensor l_q;
    if (config_.cross_transformer) {
        const QueryKV kv = query_kv(example, ctx);
        l_q = kv.representation;
        for (std::size_t i : sentences) {
            reps.push_back(encode_sentence_cross(sentence_encoder_, sentence_field(example.sentences[i]),
                                                 kv, ctx));
        }
    } else {
        l_q = row(query_encoder_.encode(query_title_field(example), ctx), 0);
        for (std::size_t i : sentences) {
            reps.push_back(encode_sentence_joint(sentence_encoder_, joint_field(example, i), ctx));
        }
    }
    return relevance_encode(relevance_, {l_q, concat_rows(reps), sentences, {}}, ctx);
}

std::unique_ptr<SnippetModel> make_model(const ModelConfig& config, const Vocab& vocab) {
    switch (config.kind) {
        case ModelKind::DeepQSE: return std::make_unique<DeepQSEModel>(config, vocab);
        case ModelKind::Coarse: return std::make_unique<CoarseSelector>(config, vocab);
        case ModelKind::Fine: return std::make_unique<FineReranker>(config, vocab);
    }
    throw PreconditionError("make_model: unknown kind");
}

Tensor loss_softmax_ce(const Tensor& scores, std::size_t gold, const Mask& valid) {
    return cross_entropy_from_logits(scores, gold, valid);
}

std::string serialize_checkpoint(const SnippetModel& model) {
    static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
    const ParamStore& params = model.params();
    json manifest;
    manifest["format_version"] = kCheckpointVersion;
    manifest["config"] = config_to_json(model.config());
    manifest["vocab"] = {{"words", model.vocab().words()}, {"hash_buckets", model.vocab().hash_buckets()}};
    json tensors = json::array();
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < params.names().size(); ++i) {
        const Tensor& t = params.tensors()[i];
        tensors.push_back({{"name", params.names()[i]}, {"shape", t.shape()}, {"dtype", "f64"}, {"offset", offset}});
        offset += t.size() * sizeof(double);
    }
    manifest["tensors"] = std::move(tensors);
    manifest["blob_bytes"] = offset;
    const std::string text = manifest.dump();

    std::string out(kCheckpointMagic);
    append_u64_le(out, text.size());
    out += text;
    out.reserve(out.size() + offset);
    for (const Tensor& t : params.tensors()) {
        for (double v : t.data()) append_u64_le(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

void save_checkpoint(SnippetModel& model, const std::string& path) {
    const std::string bytes = serialize_checkpoint(model);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    if (!out) throw Error("write failed for checkpoint " + path);
    model.set_fingerprint(sha256(bytes));
}

std::unique_ptr<SnippetModel> load_checkpoint_bytes(const std::string& bytes) {
    const std::size_t header = kCheckpointMagic.size() + 8;
    if (bytes.size() < header || bytes.compare(0, kCheckpointMagic.size(), kCheckpointMagic) != 0) {
        throw FormatError("checkpoint: bad magic (expected SNIPCKPT1)");
    }
    const std::uint64_t manifest_len = read_u64_le(bytes, kCheckpointMagic.size());
    if (manifest_len > bytes.size() - header) throw FormatError("checkpoint: truncated manifest");
    json manifest;
    try {
        manifest = json::parse(bytes.substr(header, manifest_len));
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("checkpoint: manifest is not JSON: ") + e.what());
    }

    std::unique_ptr<SnippetModel> model;
    try {
        if (manifest.at("format_version").get<int>() != kCheckpointVersion) {
            throw FormatError("checkpoint: unsupported format version");
        }
        const ModelConfig config = config_from_json(manifest.at("config"));
        Vocab vocab(manifest.at("vocab").at("words").get<std::vector<std::string>>(),
                    manifest.at("vocab").at("hash_buckets").get<std::size_t>());
        model = make_model(config, vocab);

        const std::size_t blob = header + manifest_len;
        const auto blob_bytes = manifest.at("blob_bytes").get<std::uint64_t>();
        if (bytes.size() - blob != blob_bytes) throw FormatError("checkpoint: blob size mismatch");
        const auto& entries = manifest.at("tensors");
        ParamStore& params = model->params();
        if (entries.size() != params.names().size()) {
            throw FormatError("checkpoint: holds " + std::to_string(entries.size()) +
                              " tensors, model expects " + std::to_string(params.names().size()));
        }
        for (const auto& entry : entries) {
            const auto name = entry.at("name").get<std::string>();
            if (!params.contains(name)) throw FormatError("checkpoint: unexpected tensor " + name);
            if (entry.at("dtype").get<std::string>() != "f64") {
                throw FormatError("checkpoint: tensor " + name + " is not f64");
            }
            Tensor target = params.get(name);
            if (entry.at("shape").get<Shape>() != target.shape()) {
                throw FormatError("checkpoint: tensor " + name + " has shape " +
                                  shape_to_string(entry.at("shape").get<Shape>()) + ", model expects " +
                                  shape_to_string(target.shape()));
            }
            const auto offset = entry.at("offset").get<std::uint64_t>();
            if (offset + target.size() * sizeof(double) > blob_bytes) {
                throw FormatError("checkpoint: tensor " + name + " runs past the blob");
            }
            auto data = target.mutable_data();
            for (std::size_t k = 0; k < data.size(); ++k) {
                data[k] = std::bit_cast<double>(read_u64_le(bytes, blob + offset + 8 * k));
            }
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
    model->set_fingerprint(sha256(bytes));
    return model;
}

std::unique_ptr<SnippetModel> load_checkpoint(const std::string& path) {
    return load_checkpoint_bytes(read_file(path));
}

}  // namespace snipforge
