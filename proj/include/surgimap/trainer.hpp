#pragma once

#include "surgimap/corpus.hpp"
#include "surgimap/encoder.hpp"
#include "surgimap/model.hpp"
#include "surgimap/tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace surgimap {

struct TrainConfig {
    int epochs = 40;
    int batch_size = 128;
    double lr_base = 1e-4;
    double warmup_epochs = 2.0;
    double warmup_start_factor = 0.1;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
    // Draw each batch slot by first picking a task uniformly, then a clip.
    bool oversample_tasks = false;
    // Clips shorter than this are skipped when building datasets.
    double min_clip_s = 0.0;
    // Grammar-constrained decoding during per-epoch evaluation.
    bool eval_constrained = false;

    void validate() const;
};

// Learning rate at fractional epoch `e`: linear warmup from
// warmup_start_factor * lr_base to lr_base, then cosine decay to 0.
double lr_schedule(const TrainConfig& config, double e);

// Global optimizer steps in one epoch over `clips` examples.
long steps_per_epoch(std::size_t clips, int batch_size);

// Adam with decoupled weight decay, applied to every parameter tensor.
class AdamW {
public:
    AdamW(const TrainConfig& config, const ModelConfig& model);

    void step(Model& model, double lr);
    long steps() const { return t_; }

private:
    TrainConfig config_;
    Parameters<float> m_;
    Parameters<float> v_;
    long t_ = 0;
};

struct CheckpointLedger {
    std::optional<double> best_worst_metric;
    std::vector<std::map<int, double>> history; // one entry per evaluation
    std::filesystem::path saved_path;
    int saves = 0;
};

// Records `metrics` in the ledger and reports whether the worst task strictly
// beats the best worst-task value saved so far (always true for the first).
bool checkpoint_rule(const std::map<int, double>& metrics, const std::vector<int>& tasks,
                     CheckpointLedger& ledger);

struct Example {
    Sequence sequence;
    ComponentAnnotation annotation;
};

struct Dataset {
    std::vector<Example> examples;
    std::size_t skipped_short = 0;

    std::vector<int> tasks() const;
    std::size_t size() const { return examples.size(); }
};

Example make_example(const ModelConfig& config, const Vocabulary& vocab, const Taxonomy& taxonomy,
                     std::span<const float> clip, const ComponentAnnotation& annotation);

// Builds teacher-forced examples for `indices` (all records when empty).
Dataset build_dataset(std::span<const ClipRecord> records, const std::vector<std::size_t>& indices,
                      const FeatureProvider& provider, const Vocabulary& vocab, const Taxonomy& taxonomy,
                      const ModelConfig& config, double min_clip_s = 0.0);

struct TaskMetric {
    double value = 0.0;
    std::string metric; // "auroc" or "exact_match"
};

// Per task: AUROC of the schema's binary tag when it has one and both classes
// occur, exact-match accuracy over all tags otherwise.
std::map<int, TaskMetric> evaluate_tasks(const Model& model, const Vocabulary& vocab, const Taxonomy& taxonomy,
                                         const Dataset& validation, bool constrained = false);
std::map<int, double> evaluate_epoch(const Model& model, const Vocabulary& vocab, const Taxonomy& taxonomy,
                                     const Dataset& validation, bool constrained = false);

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double loss_sum = 0.0;
    double loss_per_token = 0.0;
    std::map<int, double> metrics;
    bool saved = false;

    nlohmann::ordered_json to_json() const;
};

struct TrainResult {
    CheckpointLedger ledger;
    std::vector<EpochRecord> log;
    Model best; // parameters at the last save
};

// Trains `model` in place. When `checkpoint_path` is non-empty every save is
// also written there; when `log` is given one JSON line per epoch is written.
TrainResult train(Model& model, const Vocabulary& vocab, const Taxonomy& taxonomy, const Dataset& train_set,
                  const Dataset& validation, const TrainConfig& config,
                  const std::filesystem::path& checkpoint_path = {}, std::ostream* log = nullptr);

} // namespace surgimap
