#include "surgimap/workflow.hpp"

#include "surgimap/corpus.hpp"
#include "surgimap/encoder.hpp"
#include "surgimap/errors.hpp"

#include <algorithm>
#include <cmath>

namespace surgimap {

namespace {

constexpr double kEps = 1e-9;

TimelineSegment to_segment(const Decoded& d, const Span& span, int task_id, Stage stage) {
    TimelineSegment s;
    s.span = span;
    s.task_id = task_id;
    s.stage = stage;
    if (d.annotation) {
        s.tags = d.annotation->tag_values;
        s.confidence = d.confidence;
    }
    return s;
}

std::vector<TimelineSegment> map_windows(const Predictor& predictor, const FeatureMatrix& per_second,
                                         const std::vector<Span>& windows, int task_id, Stage stage) {
    std::vector<std::vector<float>> clips;
    clips.reserve(windows.size());
    for (const auto& w : windows) {
        clips.push_back(window_embedding(per_second, w));
    }
    auto decoded = predictor.greedy_decode_batch(clips, task_id, {true, false});
    std::vector<TimelineSegment> out;
    out.reserve(windows.size());
    for (std::size_t i = 0; i < windows.size(); ++i) {
        out.push_back(to_segment(decoded[i], windows[i], task_id, stage));
    }
    return out;
}

bool inside(const Span& inner, const Span& outer) {
    return inner.start_s >= outer.start_s && inner.end_s <= outer.end_s;
}

nlohmann::ordered_json span_json(const Span& s) {
    return nlohmann::ordered_json::array({s.start_s, s.end_s});
}

} // namespace

std::string_view to_string(Stage stage) {
    return stage == Stage::coarse ? "coarse" : "fine";
}

Stage parse_stage(std::string_view text) {
    if (text == "coarse") {
        return Stage::coarse;
    }
    if (text == "fine") {
        return Stage::fine;
    }
    throw ValidationError("unknown stage '" + std::string(text) + "'");
}

void MappingRequest::validate() const {
    if (!(fine_window_s >= kMinFineWindowS && fine_window_s <= kMaxFineWindowS)) {
        throw ValidationError("fine_window_s must lie in [2, 5]");
    }
}

std::vector<Span> coarse_windows(double duration_s) {
    if (!(duration_s > 0.0) || !std::isfinite(duration_s)) {
        throw ValidationError("video duration must be positive");
    }
    if (duration_s < kCoarseWindowS) {
        return {{0.0, duration_s}};
    }
    const auto n = static_cast<long>(std::floor(duration_s / kCoarseWindowS));
    std::vector<Span> out;
    for (long k = 0; k < n; ++k) {
        out.push_back({k * kCoarseWindowS, (k + 1) * kCoarseWindowS});
    }
    const double tail = n * kCoarseWindowS;
    if (duration_s - tail >= 1.0) {
        out.push_back({tail, duration_s});
    }
    return out;
}

ClipEmbedding window_embedding(const FeatureMatrix& per_second, const Span& span) {
    if (per_second.count == 0) {
        throw ValidationError("video has no feature rows");
    }
    const auto first = static_cast<long>(std::floor(span.start_s));
    auto last = static_cast<long>(std::ceil(span.end_s)) - 1;
    last = std::min(last, static_cast<long>(per_second.count) - 1);
    if (first < 0 || first > last) {
        throw ValidationError("no feature rows cover [" + std::to_string(span.start_s) + ", " +
                              std::to_string(span.end_s) + ")");
    }
    const std::size_t dim = per_second.dim;
    std::span<const float> rows(per_second.values.data() + static_cast<std::size_t>(first) * dim,
                                static_cast<std::size_t>(last - first + 1) * dim);
    return pool_embedding(rows, dim);
}

std::vector<TimelineSegment> coarse_pass(const Predictor& predictor, const FeatureMatrix& per_second,
                                         double duration_s) {
    return map_windows(predictor, per_second, coarse_windows(duration_s), kCoarseTask, Stage::coarse);
}

std::vector<Span> select_segments(std::span<const TimelineSegment> coarse,
                                  const std::optional<std::string>& step_filter) {
    std::optional<std::string> wanted;
    if (step_filter) {
        wanted = normalize_name(*step_filter);
    }
    std::vector<const TimelineSegment*> ordered;
    for (const auto& c : coarse) {
        ordered.push_back(&c);
    }
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const auto* a, const auto* b) { return a->span.start_s < b->span.start_s; });
    std::vector<Span> out;
    for (const auto* c : ordered) {
        if (wanted) {
            auto it = c->tags.find("step");
            if (it == c->tags.end() || it->second != *wanted) {
                continue;
            }
        }
        if (!out.empty() && std::abs(out.back().end_s - c->span.start_s) < kEps) {
            out.back().end_s = c->span.end_s;
        } else {
            out.push_back(c->span);
        }
    }
    return out;
}

std::vector<Span> fine_windows(std::span<const Span> selected, double w) {
    if (!(w >= kMinFineWindowS && w <= kMaxFineWindowS)) {
        throw ValidationError("fine window must lie in [2, 5] s");
    }
    std::vector<Span> out;
    for (const auto& s : selected) {
        const double length = s.duration();
        const auto n = static_cast<long>(std::floor((length + kEps) / w));
        for (long k = 0; k < n; ++k) {
            out.push_back({s.start_s + k * w, std::min(s.start_s + (k + 1) * w, s.end_s)});
        }
        const double tail_start = s.start_s + n * w;
        if (s.end_s - tail_start >= kMinFineWindowS - kEps) {
            out.push_back({tail_start, s.end_s});
        }
    }
    return out;
}

std::size_t fine_window_count(std::span<const Span> selected, double w) {
    return fine_windows(selected, w).size();
}

std::vector<TimelineSegment> fine_pass(const Predictor& predictor, const FeatureMatrix& per_second,
                                       std::span<const Span> selected, int task_id, double w) {
    auto windows = fine_windows(selected, w);
    if (windows.empty()) {
        return {};
    }
    return map_windows(predictor, per_second, windows, task_id, Stage::fine);
}

std::vector<TimelineSegment> assemble_timeline(std::vector<TimelineSegment> coarse,
                                               std::vector<TimelineSegment> fine,
                                               std::span<const Span> selected) {
    for (const auto& f : fine) {
        bool contained = std::any_of(selected.begin(), selected.end(),
                                     [&](const Span& s) { return inside(f.span, s); });
        if (!contained) {
            throw IntegrityError("fine segment [" + std::to_string(f.span.start_s) + ", " +
                                 std::to_string(f.span.end_s) + ") lies outside the selected regions");
        }
    }
    std::vector<TimelineSegment> all;
    all.reserve(coarse.size() + fine.size());
    for (auto& c : coarse) {
        c.stage = Stage::coarse;
        c.parent = -1;
        all.push_back(std::move(c));
    }
    for (auto& f : fine) {
        f.stage = Stage::fine;
        all.push_back(std::move(f));
    }
    std::stable_sort(all.begin(), all.end(), [](const TimelineSegment& a, const TimelineSegment& b) {
        if (a.span.start_s != b.span.start_s) {
            return a.span.start_s < b.span.start_s;
        }
        return a.stage == Stage::coarse && b.stage == Stage::fine;
    });
    int current = -1;
    for (std::size_t i = 0; i < all.size(); ++i) {
        auto& s = all[i];
        if (s.stage == Stage::coarse) {
            current = static_cast<int>(i);
            continue;
        }
        // The latest coarse window starting at or before this segment holds its start.
        if (current < 0 || s.span.start_s >= all[static_cast<std::size_t>(current)].span.end_s) {
            throw IntegrityError("fine segment at " + std::to_string(s.span.start_s) + " s has no coarse parent");
        }
        s.parent = current;
    }
    return all;
}

Timeline run_workflow(const Predictor& predictor, const FeatureMatrix& per_second, double duration_s,
                      const MappingRequest& request) {
    request.validate();
    predictor.taxonomy().schema_for_task(request.task_id);
    Timeline t;
    t.video_id = request.video_id;
    t.task_id = request.task_id;
    if (request.step_filter) {
        t.step_filter = normalize_name(*request.step_filter);
    }
    t.fine_window_s = request.fine_window_s;
    auto coarse = coarse_pass(predictor, per_second, duration_s);
    t.selected = select_segments(coarse, t.step_filter);
    auto fine = fine_pass(predictor, per_second, t.selected, request.task_id, request.fine_window_s);
    t.segments = assemble_timeline(std::move(coarse), std::move(fine), t.selected);
    return t;
}

nlohmann::ordered_json summarize(std::span<const TimelineSegment> segments) {
    struct Cell {
        std::size_t count = 0;
        double duration = 0.0;
    };
    struct TaskStats {
        Cell total;
        std::size_t coarse = 0;
        std::size_t fine = 0;
        std::map<std::string, std::map<std::string, Cell>> tags;
    };
    std::map<int, TaskStats> tasks;
    Cell overall;
    std::size_t proficiency_fine = 0;
    std::size_t proficiency_high = 0;
    for (const auto& s : segments) {
        const double d = s.span.duration();
        auto& t = tasks[s.task_id];
        ++t.total.count;
        t.total.duration += d;
        (s.stage == Stage::coarse ? t.coarse : t.fine) += 1;
        ++overall.count;
        overall.duration += d;
        for (const auto& [tag, category] : s.tags) {
            auto& cell = t.tags[tag][category];
            ++cell.count;
            cell.duration += d;
        }
        if (s.stage == Stage::fine) {
            auto it = s.tags.find("proficiency");
            if (it != s.tags.end()) {
                ++proficiency_fine;
                proficiency_high += it->second == "high" ? 1 : 0;
            }
        }
    }
    nlohmann::ordered_json j;
    j["segment_count"] = overall.count;
    j["duration_s"] = overall.duration;
    nlohmann::ordered_json per_task = nlohmann::ordered_json::object();
    for (const auto& [task, t] : tasks) {
        nlohmann::ordered_json tj;
        tj["segments"] = t.total.count;
        tj["coarse_segments"] = t.coarse;
        tj["fine_segments"] = t.fine;
        tj["duration_s"] = t.total.duration;
        nlohmann::ordered_json tags = nlohmann::ordered_json::object();
        for (const auto& [tag, cats] : t.tags) {
            nlohmann::ordered_json cj = nlohmann::ordered_json::object();
            for (const auto& [cat, cell] : cats) {
                cj[cat] = {{"count", cell.count}, {"duration_s", cell.duration}};
            }
            tags[tag] = cj;
        }
        tj["tags"] = tags;
        per_task[std::to_string(task)] = tj;
    }
    j["tasks"] = per_task;
    j["proficiency"] = {
        {"fine_segments", proficiency_fine},
        {"high", proficiency_high},
        {"high_fraction", proficiency_fine ? static_cast<double>(proficiency_high) / static_cast<double>(proficiency_fine) : 0.0}};
    return j;
}

nlohmann::ordered_json timeline_to_json(const Timeline& timeline) {
    nlohmann::ordered_json j;
    j["video_id"] = timeline.video_id;
    j["task_id"] = timeline.task_id;
    j["step_filter"] = timeline.step_filter ? nlohmann::ordered_json(*timeline.step_filter) : nlohmann::ordered_json();
    j["fine_window_s"] = timeline.fine_window_s;
    auto selected = nlohmann::ordered_json::array();
    for (const auto& s : timeline.selected) {
        selected.push_back(span_json(s));
    }
    j["selected"] = selected;
    auto segments = nlohmann::ordered_json::array();
    for (const auto& s : timeline.segments) {
        nlohmann::ordered_json sj;
        sj["start_s"] = s.span.start_s;
        sj["end_s"] = s.span.end_s;
        sj["stage"] = to_string(s.stage);
        sj["task_id"] = s.task_id;
        sj["tags"] = tags_to_json(s.tags);
        nlohmann::ordered_json conf = nlohmann::ordered_json::object();
        for (const auto& [k, v] : s.confidence) {
            conf[k] = v;
        }
        sj["confidence"] = conf;
        if (s.stage == Stage::fine) {
            sj["parent"] = s.parent;
        }
        segments.push_back(std::move(sj));
    }
    j["segments"] = segments;
    j["summary"] = summarize(timeline.segments);
    return j;
}

Timeline timeline_from_json(const nlohmann::json& j) {
    Timeline t;
    try {
        t.video_id = j.at("video_id").get<std::string>();
        t.task_id = j.at("task_id").get<int>();
        if (!j.at("step_filter").is_null()) {
            t.step_filter = j.at("step_filter").get<std::string>();
        }
        t.fine_window_s = j.at("fine_window_s").get<double>();
        for (const auto& s : j.at("selected")) {
            t.selected.push_back({s.at(0).get<double>(), s.at(1).get<double>()});
        }
        for (const auto& sj : j.at("segments")) {
            TimelineSegment s;
            s.span = {sj.at("start_s").get<double>(), sj.at("end_s").get<double>()};
            s.stage = parse_stage(sj.at("stage").get<std::string>());
            s.task_id = sj.at("task_id").get<int>();
            s.tags = sj.at("tags").get<std::map<std::string, std::string>>();
            s.confidence = sj.at("confidence").get<std::map<std::string, double>>();
            s.parent = sj.value("parent", -1);
            t.segments.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("timeline: ") + e.what());
    }
    return t;
}

ValidityReport check_containment(const Timeline& timeline) {
    ValidityReport r;
    for (std::size_t i = 0; i < timeline.segments.size(); ++i) {
        const auto& s = timeline.segments[i];
        if (i > 0 && s.span.start_s < timeline.segments[i - 1].span.start_s) {
            r.violations.push_back("segment " + std::to_string(i) + " out of order");
        }
        if (s.stage != Stage::fine) {
            continue;
        }
        bool contained = std::any_of(timeline.selected.begin(), timeline.selected.end(),
                                     [&](const Span& sel) { return inside(s.span, sel); });
        if (!contained) {
            r.violations.push_back("fine segment " + std::to_string(i) + " outside the selection");
        }
        if (s.parent < 0 || static_cast<std::size_t>(s.parent) >= timeline.segments.size() ||
            timeline.segments[static_cast<std::size_t>(s.parent)].stage != Stage::coarse) {
            r.violations.push_back("fine segment " + std::to_string(i) + " has no valid parent");
            continue;
        }
        const auto& p = timeline.segments[static_cast<std::size_t>(s.parent)].span;
        if (s.span.start_s < p.start_s || s.span.start_s >= p.end_s) {
            r.violations.push_back("fine segment " + std::to_string(i) + " starts outside its parent");
        }
    }
    return r;
}

} // namespace surgimap
