#pragma once

#include "surgimap/corpus.hpp"
#include "surgimap/hsaf.hpp"
#include "surgimap/inference.hpp"
#include "surgimap/taxonomy.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace surgimap {

inline constexpr double kReadinessThreshold = 0.80;
inline constexpr double kDefaultThreshold = 0.90;
inline constexpr double kTargetPrecision = 0.80;

// Passes when the mean accuracy over `tasks` is at least 0.80.
bool readiness_gate(const std::map<int, double>& accuracies, const std::vector<int>& tasks);

// Non-overlapping [k, k+1) spans; a trailing fraction under one second is dropped.
std::vector<Span> segment_video(double duration_s);

struct CalibrationSample {
    std::string category;
    double confidence = 0.0;
    bool correct = false;
};

struct ThresholdStats {
    std::size_t n = 0;
    std::size_t retained = 0;
    double precision = 0.0; // of retained predictions at the chosen threshold
};

struct ThresholdTable {
    std::map<std::string, double> thresholds;
    std::map<std::string, ThresholdStats> provenance;
    double default_threshold = kDefaultThreshold;

    double threshold_for(const std::string& category) const;
    nlohmann::ordered_json to_json() const; // {category: tau}
    static ThresholdTable from_json(const nlohmann::json& j);
};

// Per category, the smallest tau in {0.50, 0.51, ..., 0.99} whose retained
// predictions reach the target precision; 0.99 when none does. Categories in
// `categories` without samples get the default.
ThresholdTable calibrate_thresholds(std::span<const CalibrationSample> samples,
                                    const std::vector<std::string>& categories = {},
                                    double target_precision = kTargetPrecision);

// Calibration samples for one tag from decoded validation clips.
std::vector<CalibrationSample> calibration_samples(std::span<const std::optional<ComponentAnnotation>> predicted,
                                                   std::span<const ComponentAnnotation> truth,
                                                   const std::string& tag_key);

// Keeps annotations whose `tag_key` confidence reaches its category threshold.
std::vector<ComponentAnnotation> filter_low_confidence(std::span<const ComponentAnnotation> annotations,
                                                       const ThresholdTable& table,
                                                       const std::string& tag_key = "action");

// Merges annotations with identical task and tag values whose gap is at most
// `gap_tolerance`. Input must be sorted by start time; output is sorted by
// start, then by tag values.
std::vector<ComponentAnnotation> merge_annotations(std::span<const ComponentAnnotation> annotations,
                                                   double gap_tolerance = 1.0);

struct GrowthReport {
    std::size_t before = 0;
    std::size_t after = 0;
    std::size_t duplicates_skipped = 0;
    std::map<int, std::size_t> before_per_task;
    std::map<int, std::size_t> after_per_task;

    double ratio() const { return before == 0 ? 0.0 : static_cast<double>(after) / static_cast<double>(before); }
    nlohmann::ordered_json to_json() const;
};

// Writes base records followed by the new AI records (deduplicated by video,
// span and task) to a new manifest. Base manifests are never modified.
GrowthReport expand_atlas(const std::vector<std::filesystem::path>& base_manifests,
                          std::span<const ClipRecord> new_records, const std::filesystem::path& output,
                          const Taxonomy& taxonomy);

struct SelfLabelOptions {
    int task_id = 2;
    std::string confidence_tag = "action";
    double gap_tolerance = 1.0;
};

// Segments a video given per-second feature rows, annotates every segment
// with constrained decoding, filters and merges.
std::vector<ComponentAnnotation> self_label_video(const Predictor& predictor, const FeatureMatrix& per_second,
                                                  double duration_s, const ThresholdTable& table,
                                                  const SelfLabelOptions& options = {});

} // namespace surgimap
