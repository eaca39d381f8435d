#include "snipforge/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "snipforge/rng.hpp"
#include "snipforge/two_stage.hpp"

namespace snipforge {

namespace {

using json = nlohmann::ordered_json;

struct Prepared {
    TokenizedExample example;
    std::vector<std::size_t> sentences;  // scored subset
    std::size_t gold = 0;                // position of the gold inside `sentences`
};

std::vector<Prepared> prepare_all(const SnippetModel& model, const std::vector<ExtractionExample>& examples,
                                  const CoarseSelector* coarse) {
    std::vector<Prepared> out;
    for (const auto& raw : examples) {
        Prepared p;
        p.example = model.prepare(raw);
        if (!p.example.gold_start || p.example.sentences.empty()) continue;
        const std::size_t gold = *p.example.gold_start;
        if (model.kind() == ModelKind::Fine) {
            const auto scores = coarse->infer(p.example);
            p.sentences = fine_training_candidates(scores, gold, model.config().candidates);
        } else {
            p.sentences.resize(model.usable_sentences(p.example));
            std::iota(p.sentences.begin(), p.sentences.end(), 0);
        }
        p.gold = static_cast<std::size_t>(
            std::find(p.sentences.begin(), p.sentences.end(), gold) - p.sentences.begin());
        out.push_back(std::move(p));
    }
    return out;
}

double mean_loss(const SnippetModel& model, const std::vector<Prepared>& data) {
    if (data.empty()) return 0.0;
    NoGradGuard guard;
    double total = 0.0;
    for (const auto& p : data) total += loss_softmax_ce(model.score(p.example, p.sentences, {}), p.gold).item();
    return total / static_cast<double>(data.size());
}

std::vector<std::vector<double>> snapshot(const ParamStore& params) {
    std::vector<std::vector<double>> out;
    for (const auto& t : params.tensors()) out.emplace_back(t.data().begin(), t.data().end());
    return out;
}

void restore(ParamStore& params, const std::vector<std::vector<double>>& saved) {
    for (std::size_t i = 0; i < saved.size(); ++i) {
        auto dst = params.tensors()[i].mutable_data();
        std::copy(saved[i].begin(), saved[i].end(), dst.begin());
    }
}

}  // namespace

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw PreconditionError("train config: learning rate must be positive");
    }
    if (batch_size < 1 || epochs < 1) throw PreconditionError("train config: batch size and epochs must be >= 1");
    if (grad_clip < 0.0) throw PreconditionError("train config: grad_clip must be >= 0");
    if (eval_threads < 1) throw PreconditionError("train config: eval_threads must be >= 1");
}

std::string TrainConfig::to_json() const {
    json j;
    j["learning_rate"] = learning_rate;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["seed"] = seed;
    j["patience"] = patience;
    j["grad_clip"] = grad_clip;
    j["eval_threads"] = eval_threads;
    return j.dump();
}

TrainConfig TrainConfig::from_json(std::string_view text) {
    TrainConfig c;
    try {
        const json j = json::parse(text);
        if (!j.is_object()) throw FormatError("train config: expected a JSON object");
        for (auto it = j.begin(); it != j.end(); ++it) {
            const auto& k = it.key();
            if (k == "learning_rate") c.learning_rate = it->get<double>();
            else if (k == "batch_size") c.batch_size = it->get<std::size_t>();
            else if (k == "epochs") c.epochs = it->get<std::size_t>();
            else if (k == "seed") c.seed = it->get<std::uint64_t>();
            else if (k == "patience") c.patience = it->get<std::size_t>();
            else if (k == "grad_clip") c.grad_clip = it->get<double>();
            else if (k == "eval_threads") c.eval_threads = it->get<std::size_t>();
            else throw FormatError("train config: unknown key '" + k + "'");
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("train config: ") + e.what());
    }
    return c;
}

std::string EpochMetrics::to_json() const {
    json j;
    j["epoch"] = epoch;
    j["split"] = split;
    j["loss"] = loss;
    j["p_at_1"] = p_at_1 ? json(*p_at_1) : json(nullptr);
    j["p_at_3"] = p_at_3 ? json(*p_at_3) : json(nullptr);
    j["p_at_5"] = p_at_5 ? json(*p_at_5) : json(nullptr);
    return j.dump();
}

std::vector<std::size_t> fine_training_candidates(std::span<const double> coarse_scores, std::size_t gold,
                                                  std::size_t k) {
    if (gold >= coarse_scores.size()) throw PreconditionError("fine candidates: gold index out of range");
    auto candidates = top_k(coarse_scores, k);
    if (std::find(candidates.begin(), candidates.end(), gold) == candidates.end()) candidates.back() = gold;
    std::sort(candidates.begin(), candidates.end());
    return candidates;
}

Ranker model_ranker(const SnippetModel& model, const CoarseSelector* coarse) {
    if (model.kind() == ModelKind::Fine) {
        if (!coarse) throw PreconditionError("ranking a fine reranker requires a coarse selector");
        const auto& fine = static_cast<const FineReranker&>(model);
        return [&fine, coarse](const ExtractionExample& ex) {
            const auto t = fine.prepare(ex);
            return two_stage_ranking(forward_two_stage(*coarse, fine, t, fine.candidates()));
        };
    }
    return [&model](const ExtractionExample& ex) { return rank_by_score(model.infer(model.prepare(ex))); };
}

DataSplit split_corpus(std::vector<ExtractionExample> examples, std::size_t train, std::size_t validation) {
    if (train + validation > examples.size()) {
        throw PreconditionError("split: " + std::to_string(train + validation) +
                                " train+validation examples requested from " +
                                std::to_string(examples.size()));
    }
    DataSplit s;
    auto it = std::make_move_iterator(examples.begin());
    s.train.assign(it, it + static_cast<std::ptrdiff_t>(train));
    s.validation.assign(it + static_cast<std::ptrdiff_t>(train),
                        it + static_cast<std::ptrdiff_t>(train + validation));
    s.test.assign(it + static_cast<std::ptrdiff_t>(train + validation), std::make_move_iterator(examples.end()));
    return s;
}

TrainResult train(SnippetModel& model, const std::vector<ExtractionExample>& train_set,
                  const std::vector<ExtractionExample>& validation_set, const TrainConfig& config,
                  const CoarseSelector* coarse, const EpochCallback& on_epoch) {
    config.validate();
    if (train_set.empty()) throw PreconditionError("train: empty training corpus");
    if (model.kind() == ModelKind::Fine && !coarse) {
        throw PreconditionError("train: a fine reranker needs a coarse checkpoint for candidates");
    }
    const auto data = prepare_all(model, train_set, coarse);
    const auto validation = prepare_all(model, validation_set, coarse);
    if (data.empty()) throw PreconditionError("train: no labeled training examples");

    ParamStore& params = model.params();
    AdamOptions opts;
    opts.learning_rate = config.learning_rate;
    opts.grad_clip = config.grad_clip;
    Adam optimizer(params, opts);
    params.zero_grad();

    const Rng root(config.seed);
    Rng dropout_rng = root.split("dropout");
    ForwardContext ctx{true, model.config().encoder.dropout, &dropout_rng, nullptr};
    const Ranker ranker = model_ranker(model, coarse);

    TrainResult result;
    std::vector<std::vector<double>> best = snapshot(params);
    bool have_best = false;
    std::size_t since_best = 0;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        Rng shuffle_rng = root.split("shuffle").split(static_cast<std::uint64_t>(epoch));
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(
                                        shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
        }

        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const double inv = 1.0 / static_cast<double>(end - start);
            double batch_loss = 0.0;
            for (std::size_t b = start; b < end; ++b) {
                const Prepared& p = data[order[b]];
                try {
                    const Tensor loss = loss_softmax_ce(model.score(p.example, p.sentences, ctx), p.gold);
                    batch_loss += loss.item();
                    scale(loss, inv).backward();
                } catch (const NumericError& e) {
                    throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                                       std::to_string(optimizer.steps() + 1) + ", document '" +
                                       p.example.id + "': " + e.what());
                }
            }
            adam_step(params, optimizer);
            result.step_losses.push_back(batch_loss * inv);
            epoch_loss += batch_loss;
        }

        EpochMetrics train_metrics{epoch, "train", epoch_loss / static_cast<double>(data.size()), {}, {}, {}};
        result.history.push_back(train_metrics);
        if (on_epoch) on_epoch(train_metrics);
        ++result.epochs_run;

        if (validation.empty()) {
            best = snapshot(params);
            result.best_epoch = epoch;
            continue;
        }
        const EvalReport report = evaluate(validation_set, ranker, config.eval_threads);
        EpochMetrics val{epoch, "validation", mean_loss(model, validation), report.p_at_1, report.p_at_3,
                         report.p_at_5};
        result.history.push_back(val);
        if (on_epoch) on_epoch(val);

        if (!have_best || report.p_at_1 > result.best_p_at_1) {
            have_best = true;
            result.best_p_at_1 = report.p_at_1;
            result.best_epoch = epoch;
            best = snapshot(params);
            since_best = 0;
        } else if (++since_best >= config.patience && config.patience > 0) {
            result.stopped_early = epoch < config.epochs;
            break;
        }
    }
    restore(params, best);
    params.zero_grad();
    return result;
}

}  // namespace snipforge
