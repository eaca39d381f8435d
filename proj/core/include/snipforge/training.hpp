#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "snipforge/eval.hpp"
#include "snipforge/models.hpp"

namespace snipforge {

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 64;
    std::size_t epochs = 5;
    std::uint64_t seed = 7;
    // Stop after this many epochs without a validation P@1 improvement.
    std::size_t patience = 2;
    double grad_clip = 0.0;
    std::size_t eval_threads = 1;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(std::string_view text);
};

// One line of the metrics history.
struct EpochMetrics {
    std::size_t epoch = 0;
    std::string split;
    double loss = 0.0;
    // Ranking metrics are computed on the validation split only.
    std::optional<double> p_at_1;
    std::optional<double> p_at_3;
    std::optional<double> p_at_5;

    std::string to_json() const;
};

struct TrainResult {
    std::vector<EpochMetrics> history;
    std::vector<double> step_losses;  // mean document loss per optimizer step
    std::size_t best_epoch = 0;
    double best_p_at_1 = 0.0;
    std::size_t epochs_run = 0;
    bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Trains in place and leaves the best-validation parameters loaded. A fine
// reranker trains on `coarse` top-K candidates (gold force-included) and is
// validated through the two-stage pipeline, so `coarse` is required for it.
TrainResult train(SnippetModel& model, const std::vector<ExtractionExample>& train_set,
                  const std::vector<ExtractionExample>& validation_set, const TrainConfig& config,
                  const CoarseSelector* coarse = nullptr, const EpochCallback& on_epoch = {});

// Coarse top-K with the gold swapped in for the K-th entry when absent, in
// ascending document order.
std::vector<std::size_t> fine_training_candidates(std::span<const double> coarse_scores,
                                                  std::size_t gold, std::size_t k);

// Ranking a trained model produces for P@k: scores for DeepQSE/coarse, the
// two-stage order for a fine reranker (which then needs `coarse`).
Ranker model_ranker(const SnippetModel& model, const CoarseSelector* coarse = nullptr);

struct DataSplit {
    std::vector<ExtractionExample> train;
    std::vector<ExtractionExample> validation;
    std::vector<ExtractionExample> test;
};

// Contiguous split in corpus order: the first `train` examples, then `validation`, then the rest.
DataSplit split_corpus(std::vector<ExtractionExample> examples, std::size_t train,
                       std::size_t validation);

}  // namespace snipforge
