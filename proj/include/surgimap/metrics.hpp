#pragma once

#include "surgimap/taxonomy.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace surgimap {

struct TimedPrediction {
    std::string category;
    Span span;
    double confidence = 1.0;
};

// Fraction of positions where predicted == truth.
double exact_match_accuracy(std::span<const std::string> predicted, std::span<const std::string> truth);
// Per-tag variant over annotations; a missing prediction counts as wrong.
double exact_match_accuracy(std::span<const std::optional<ComponentAnnotation>> predicted,
                            std::span<const ComponentAnnotation> truth, const std::string& tag_key);
// Every tag of the annotation must match.
double all_tags_accuracy(std::span<const std::optional<ComponentAnnotation>> predicted,
                         std::span<const ComponentAnnotation> truth);

// Mann-Whitney AUROC with ties counted one half. Labels are 0/1.
double binary_auroc(std::span<const double> scores, std::span<const int> labels);

struct PrecisionRecall {
    int tp = 0;
    int fp = 0;
    int fn = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct TemporalF1 {
    std::map<std::string, PrecisionRecall> per_category;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
};

enum class Matching {
    optimal, // maximum-cardinality one-to-one matching per category
    greedy,  // descending IoU, ties by earlier ground-truth start
};

double interval_iou(const Span& a, const Span& b);

TemporalF1 temporal_f1(std::span<const TimedPrediction> predictions, std::span<const TimedPrediction> truth,
                       double threshold = 0.10, Matching matching = Matching::optimal);

struct Interval {
    double low = 0.0;
    double high = 0.0;
};

// Percentile bootstrap over `n` clip-level samples. `metric` receives the
// resampled indices; resamples where it throws UndefinedMetricError are
// redrawn up to `max_redraws` times in total.
Interval bootstrap_ci(const std::function<double(std::span<const std::size_t>)>& metric, std::size_t n,
                      int resamples = 1000, double level = 0.95, std::uint64_t seed = 0,
                      int max_redraws = 10000);

double random_chance_baseline(int categories);
double relative_improvement(double accuracy, int categories);

struct ReportEntry {
    int task_id = 0;
    std::string tag; // "*" for all-tags metrics
    std::string metric;
    double value = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::size_t n = 0;
};

nlohmann::ordered_json report_to_json(std::span<const ReportEntry> entries);

} // namespace surgimap
