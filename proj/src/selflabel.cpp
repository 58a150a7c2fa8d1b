#include "surgimap/selflabel.hpp"

#include "surgimap/errors.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <tuple>

namespace surgimap {

bool readiness_gate(const std::map<int, double>& accuracies, const std::vector<int>& tasks) {
    if (tasks.empty()) {
        throw ValidationError("readiness_gate: no tasks configured");
    }
    double sum = 0.0;
    for (int t : tasks) {
        auto it = accuracies.find(t);
        if (it == accuracies.end()) {
            throw ValidationError("readiness_gate: missing accuracy for task " + std::to_string(t));
        }
        sum += it->second;
    }
    return sum / static_cast<double>(tasks.size()) >= kReadinessThreshold;
}

std::vector<Span> segment_video(double duration_s) {
    if (!(duration_s > 0.0) || !std::isfinite(duration_s)) {
        throw ValidationError("segment_video: duration must be positive");
    }
    const auto n = static_cast<long>(std::floor(duration_s));
    std::vector<Span> spans;
    spans.reserve(static_cast<std::size_t>(n));
    for (long k = 0; k < n; ++k) {
        spans.push_back({static_cast<double>(k), static_cast<double>(k + 1)});
    }
    return spans;
}

double ThresholdTable::threshold_for(const std::string& category) const {
    auto it = thresholds.find(category);
    return it == thresholds.end() ? default_threshold : it->second;
}

nlohmann::ordered_json ThresholdTable::to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [c, t] : thresholds) {
        j[c] = t;
    }
    return j;
}

ThresholdTable ThresholdTable::from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw FormatError("threshold table must be a JSON object");
    }
    ThresholdTable table;
    for (const auto& [c, t] : j.items()) {
        if (!t.is_number()) {
            throw FormatError("threshold for '" + c + "' is not a number");
        }
        double v = t.get<double>();
        if (v < 0.5 || v > 1.0) {
            throw ValidationError("threshold for '" + c + "' outside [0.5, 1.0]");
        }
        table.thresholds[c] = v;
    }
    return table;
}

ThresholdTable calibrate_thresholds(std::span<const CalibrationSample> samples,
                                    const std::vector<std::string>& categories, double target_precision) {
    std::map<std::string, std::vector<const CalibrationSample*>> by_category;
    for (const auto& s : samples) {
        by_category[s.category].push_back(&s);
    }
    ThresholdTable table;
    for (const auto& c : categories) {
        if (!by_category.contains(c)) {
            table.thresholds[c] = kDefaultThreshold;
        }
    }
    for (const auto& [category, group] : by_category) {
        double chosen = 0.99;
        ThresholdStats stats;
        stats.n = group.size();
        bool found = false;
        for (int k = 50; k <= 99 && !found; ++k) {
            const double tau = k / 100.0;
            std::size_t retained = 0;
            std::size_t correct = 0;
            for (const auto* s : group) {
                if (s->confidence >= tau) {
                    ++retained;
                    correct += s->correct ? 1 : 0;
                }
            }
            if (retained > 0 && static_cast<double>(correct) >= target_precision * static_cast<double>(retained) - 1e-12) {
                chosen = tau;
                stats.retained = retained;
                stats.precision = static_cast<double>(correct) / static_cast<double>(retained);
                found = true;
            }
        }
        if (!found) {
            std::size_t retained = 0;
            std::size_t correct = 0;
            for (const auto* s : group) {
                if (s->confidence >= chosen) {
                    ++retained;
                    correct += s->correct ? 1 : 0;
                }
            }
            stats.retained = retained;
            stats.precision = retained ? static_cast<double>(correct) / static_cast<double>(retained) : 0.0;
        }
        table.thresholds[category] = chosen;
        table.provenance[category] = stats;
    }
    return table;
}

std::vector<CalibrationSample> calibration_samples(std::span<const std::optional<ComponentAnnotation>> predicted,
                                                   std::span<const ComponentAnnotation> truth,
                                                   const std::string& tag_key) {
    if (predicted.size() != truth.size()) {
        throw ValidationError("calibration_samples: prediction and label counts differ");
    }
    std::vector<CalibrationSample> out;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (!predicted[i]) {
            continue;
        }
        auto value = predicted[i]->tag_values.find(tag_key);
        auto conf = predicted[i]->confidence.find(tag_key);
        if (value == predicted[i]->tag_values.end() || conf == predicted[i]->confidence.end()) {
            continue;
        }
        out.push_back({value->second, conf->second, truth[i].tag_values.at(tag_key) == value->second});
    }
    return out;
}

std::vector<ComponentAnnotation> filter_low_confidence(std::span<const ComponentAnnotation> annotations,
                                                       const ThresholdTable& table, const std::string& tag_key) {
    std::vector<ComponentAnnotation> kept;
    for (std::size_t i = 0; i < annotations.size(); ++i) {
        const auto& a = annotations[i];
        auto value = a.tag_values.find(tag_key);
        auto conf = a.confidence.find(tag_key);
        if (value == a.tag_values.end() || conf == a.confidence.end()) {
            throw ValidationError("filter_low_confidence: annotation " + std::to_string(i) + " has no " + tag_key +
                                  " confidence");
        }
        if (conf->second >= table.threshold_for(value->second)) {
            kept.push_back(a);
        }
    }
    return kept;
}

std::vector<ComponentAnnotation> merge_annotations(std::span<const ComponentAnnotation> annotations,
                                                   double gap_tolerance) {
    for (std::size_t i = 1; i < annotations.size(); ++i) {
        if (annotations[i].span.start_s < annotations[i - 1].span.start_s) {
            throw ValidationError("merge_annotations: input is not sorted by start time");
        }
    }
    using Key = std::pair<int, std::map<std::string, std::string>>;
    std::map<Key, std::vector<const ComponentAnnotation*>> groups;
    for (const auto& a : annotations) {
        groups[{a.task_id, a.tag_values}].push_back(&a);
    }

    std::vector<ComponentAnnotation> out;
    for (const auto& [key, members] : groups) {
        std::size_t i = 0;
        while (i < members.size()) {
            std::size_t j = i + 1;
            double end = members[i]->span.end_s;
            while (j < members.size() && members[j]->span.start_s - end <= gap_tolerance) {
                end = std::max(end, members[j]->span.end_s);
                ++j;
            }
            if (j == i + 1) {
                out.push_back(*members[i]);
            } else {
                ComponentAnnotation merged = *members[i];
                merged.span.end_s = end;
                std::map<std::string, std::pair<double, double>> weighted; // key -> (sum c*d, sum d)
                for (std::size_t k = i; k < j; ++k) {
                    const double d = members[k]->span.duration();
                    for (const auto& [tag, c] : members[k]->confidence) {
                        weighted[tag].first += c * d;
                        weighted[tag].second += d;
                    }
                }
                merged.confidence.clear();
                for (const auto& [tag, acc] : weighted) {
                    merged.confidence[tag] = acc.second > 0 ? acc.first / acc.second : 0.0;
                }
                out.push_back(std::move(merged));
            }
            i = j;
        }
    }
    std::stable_sort(out.begin(), out.end(), [](const ComponentAnnotation& a, const ComponentAnnotation& b) {
        return std::tie(a.span.start_s, a.task_id, a.tag_values) < std::tie(b.span.start_s, b.task_id, b.tag_values);
    });
    return out;
}

nlohmann::ordered_json GrowthReport::to_json() const {
    nlohmann::ordered_json j;
    j["before"] = before;
    j["after"] = after;
    j["ratio"] = ratio();
    j["duplicates_skipped"] = duplicates_skipped;
    auto per_task = [](const std::map<int, std::size_t>& m) {
        nlohmann::ordered_json o = nlohmann::ordered_json::object();
        for (const auto& [t, n] : m) {
            o[std::to_string(t)] = n;
        }
        return o;
    };
    j["before_per_task"] = per_task(before_per_task);
    j["after_per_task"] = per_task(after_per_task);
    return j;
}

GrowthReport expand_atlas(const std::vector<std::filesystem::path>& base_manifests,
                          std::span<const ClipRecord> new_records, const std::filesystem::path& output,
                          const Taxonomy& taxonomy) {
    namespace fs = std::filesystem;
    for (const auto& base : base_manifests) {
        std::error_code ec;
        if (fs::equivalent(base, output, ec) || fs::absolute(base).lexically_normal() == fs::absolute(output).lexically_normal()) {
            throw ValidationError("expand_atlas: output would overwrite base manifest " + base.string());
        }
    }
    std::vector<ClipRecord> all;
    const auto out_dir = fs::absolute(output).parent_path();
    for (const auto& base : base_manifests) {
        auto records = load_manifest(base, taxonomy);
        const auto base_dir = fs::absolute(base).parent_path();
        for (auto& r : records) {
            // Keep relative feature references valid from the new manifest's directory.
            fs::path file(r.feature.file);
            if (file.is_relative() && base_dir != out_dir) {
                r.feature.file = fs::relative(base_dir / file, out_dir).string();
            }
        }
        all.insert(all.end(), records.begin(), records.end());
    }
    GrowthReport report;
    report.before = all.size();
    std::set<std::tuple<std::string, double, double, int>> seen;
    for (const auto& r : all) {
        seen.insert({r.video_id, r.span().start_s, r.span().end_s, r.task_id()});
        ++report.before_per_task[r.task_id()];
    }
    for (const auto& r : new_records) {
        ClipRecord rec = r;
        rec.annotation.source = Source::ai;
        auto valid = taxonomy.validate(rec.annotation);
        if (!valid.ok()) {
            throw ValidationError("expand_atlas: invalid AI annotation for video '" + rec.video_id +
                                  "': " + valid.violations.front());
        }
        if (!seen.insert({rec.video_id, rec.span().start_s, rec.span().end_s, rec.task_id()}).second) {
            ++report.duplicates_skipped;
            continue;
        }
        all.push_back(std::move(rec));
    }
    if (report.duplicates_skipped > 0) {
        spdlog::info("expand_atlas: skipped {} duplicate annotations", report.duplicates_skipped);
    }
    report.after = all.size();
    for (const auto& r : all) {
        ++report.after_per_task[r.task_id()];
    }
    save_manifest(all, output);
    return report;
}

std::vector<ComponentAnnotation> self_label_video(const Predictor& predictor, const FeatureMatrix& per_second,
                                                  double duration_s, const ThresholdTable& table,
                                                  const SelfLabelOptions& options) {
    auto spans = segment_video(duration_s);
    if (per_second.count < spans.size()) {
        throw ValidationError("self_label_video: " + std::to_string(per_second.count) +
                              " feature rows for a video of " + std::to_string(spans.size()) + " seconds");
    }
    std::vector<std::vector<float>> clips;
    clips.reserve(spans.size());
    for (std::size_t k = 0; k < spans.size(); ++k) {
        auto row = per_second.row(k);
        clips.emplace_back(row.begin(), row.end());
    }
    auto decoded = predictor.greedy_decode_batch(clips, options.task_id, {true, false});
    std::vector<ComponentAnnotation> annotations;
    for (std::size_t k = 0; k < decoded.size(); ++k) {
        if (!decoded[k].ok()) {
            continue;
        }
        auto a = *decoded[k].annotation;
        a.span = spans[k];
        a.source = Source::ai;
        annotations.push_back(std::move(a));
    }
    auto kept = filter_low_confidence(annotations, table, options.confidence_tag);
    return merge_annotations(kept, options.gap_tolerance);
}

} // namespace surgimap
