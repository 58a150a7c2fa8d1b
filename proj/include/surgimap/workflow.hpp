#pragma once

#include "surgimap/hsaf.hpp"
#include "surgimap/inference.hpp"
#include "surgimap/taxonomy.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace surgimap {

inline constexpr double kCoarseWindowS = 30.0;
inline constexpr double kMinFineWindowS = 2.0;
inline constexpr double kMaxFineWindowS = 5.0;
inline constexpr double kDefaultFineWindowS = 4.0;
inline constexpr int kCoarseTask = 1;

enum class Stage { coarse, fine };

std::string_view to_string(Stage stage);
Stage parse_stage(std::string_view text);

struct TimelineSegment {
    Span span;
    int task_id = 0;
    Stage stage = Stage::coarse;
    std::map<std::string, std::string> tags;
    std::map<std::string, double> confidence;
    int parent = -1; // index of the enclosing coarse segment, fine segments only

    bool operator==(const TimelineSegment&) const = default;
};

struct MappingRequest {
    std::string video_id;
    int task_id = 2;
    std::optional<std::string> step_filter; // normalized category of the Step tag
    double fine_window_s = kDefaultFineWindowS;

    void validate() const;
};

struct Timeline {
    std::string video_id;
    int task_id = 0;
    std::optional<std::string> step_filter;
    double fine_window_s = kDefaultFineWindowS;
    std::vector<Span> selected;
    std::vector<TimelineSegment> segments;
};

// 30 s windows; the trailing remainder is kept when at least 1 s long, and a
// video shorter than one window maps as a single window.
std::vector<Span> coarse_windows(double duration_s);

// Mean of the per-second feature rows (row k covers [k, k+1)) overlapping `span`.
ClipEmbedding window_embedding(const FeatureMatrix& per_second, const Span& span);

std::vector<TimelineSegment> coarse_pass(const Predictor& predictor, const FeatureMatrix& per_second,
                                         double duration_s);

// Coarse windows whose Step equals the filter (all when absent), with
// adjacent kept windows coalesced into maximal spans.
std::vector<Span> select_segments(std::span<const TimelineSegment> coarse,
                                  const std::optional<std::string>& step_filter);

// Non-overlapping w-second windows aligned to each span's start; a trailing
// fragment shorter than 2 s is dropped.
std::vector<Span> fine_windows(std::span<const Span> selected, double w);
std::size_t fine_window_count(std::span<const Span> selected, double w);

std::vector<TimelineSegment> fine_pass(const Predictor& predictor, const FeatureMatrix& per_second,
                                       std::span<const Span> selected, int task_id, double w);

// Sorts by start (coarse before fine on ties) and links each fine segment to
// its coarse parent. Throws IntegrityError when a fine segment leaves the
// selection.
std::vector<TimelineSegment> assemble_timeline(std::vector<TimelineSegment> coarse,
                                               std::vector<TimelineSegment> fine,
                                               std::span<const Span> selected);

Timeline run_workflow(const Predictor& predictor, const FeatureMatrix& per_second, double duration_s,
                      const MappingRequest& request);

// Per task: segment counts, durations, per-tag category counts and durations;
// plus the fraction of fine proficiency segments tagged high.
nlohmann::ordered_json summarize(std::span<const TimelineSegment> segments);

nlohmann::ordered_json timeline_to_json(const Timeline& timeline);
Timeline timeline_from_json(const nlohmann::json& j);

// Every fine segment lies inside a selected span and every parent link is valid.
ValidityReport check_containment(const Timeline& timeline);

} // namespace surgimap
