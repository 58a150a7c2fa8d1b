#include "surgimap/corpus.hpp"

#include "surgimap/errors.hpp"
#include "surgimap/fsutil.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace surgimap {

using nlohmann::json;
using nlohmann::ordered_json;

nlohmann::ordered_json tags_to_json(const std::map<std::string, std::string>& tags) {
    ordered_json out = ordered_json::object();
    for (const auto& [k, v] : tags) {
        out[k] = v;
    }
    return out;
}

ordered_json record_to_json(const ClipRecord& r) {
    ordered_json j;
    j["video_id"] = r.video_id;
    j["start_s"] = r.annotation.span.start_s;
    j["end_s"] = r.annotation.span.end_s;
    j["task_id"] = r.annotation.task_id;
    j["tags"] = tags_to_json(r.annotation.tag_values);
    j["source"] = std::string(to_string(r.annotation.source));
    j["feature_file"] = r.feature.file;
    j["feature_index"] = r.feature.index;
    if (!r.annotation.confidence.empty()) {
        ordered_json c = ordered_json::object();
        for (const auto& [k, v] : r.annotation.confidence) {
            c[k] = v;
        }
        j["confidence"] = c;
    }
    return j;
}

ClipRecord record_from_json(const json& j, const Taxonomy& taxonomy) {
    auto field = [&](const char* name) -> const json& {
        auto it = j.find(name);
        if (it == j.end()) {
            throw FormatError(std::string("missing field '") + name + "'");
        }
        return *it;
    };
    ClipRecord r;
    try {
        r.video_id = field("video_id").get<std::string>();
        r.annotation.span.start_s = field("start_s").get<double>();
        r.annotation.span.end_s = field("end_s").get<double>();
        r.annotation.task_id = field("task_id").get<int>();
        for (const auto& [k, v] : field("tags").items()) {
            r.annotation.tag_values[k] = v.get<std::string>();
        }
        r.annotation.source = parse_source(field("source").get<std::string>());
        r.feature.file = field("feature_file").get<std::string>();
        r.feature.index = field("feature_index").get<std::uint32_t>();
        if (auto c = j.find("confidence"); c != j.end()) {
            for (const auto& [k, v] : c->items()) {
                r.annotation.confidence[k] = v.get<double>();
            }
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad field type: ") + e.what());
    }
    if (r.video_id.empty()) {
        throw FormatError("empty video_id");
    }
    auto report = taxonomy.validate(r.annotation);
    if (!report.ok()) {
        throw ValidationError(report.violations.front());
    }
    return r;
}

std::vector<ClipRecord> parse_manifest(std::string_view text, const Taxonomy& taxonomy) {
    std::vector<ClipRecord> records;
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            records.push_back(record_from_json(json::parse(line), taxonomy));
        } catch (const json::exception& e) {
            throw FormatError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
        } catch (const Error& e) {
            throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return records;
}

std::vector<ClipRecord> load_manifest(const std::filesystem::path& path, const Taxonomy& taxonomy) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open manifest " + path.string());
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    try {
        return parse_manifest(buffer.str(), taxonomy);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

std::string serialize_manifest(std::span<const ClipRecord> records) {
    std::string out;
    for (const auto& r : records) {
        out += record_to_json(r).dump();
        out += '\n';
    }
    return out;
}

void save_manifest(std::span<const ClipRecord> records, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_manifest(records));
}

std::vector<FoldSplit> make_folds(std::span<const ClipRecord> records, int n_folds,
                                  std::uint64_t seed) {
    if (n_folds < 1) {
        throw ValidationError("n_folds must be positive");
    }
    std::set<std::string> unique;
    for (const auto& r : records) {
        unique.insert(r.video_id);
    }
    std::vector<std::string> videos(unique.begin(), unique.end());
    auto needed = static_cast<std::size_t>(std::max(n_folds + 1, 3));
    if (videos.size() < needed) {
        throw ValidationError("make_folds: " + std::to_string(videos.size()) +
                              " distinct videos, need at least " + std::to_string(needed));
    }

    std::mt19937_64 rng(mix_seed(seed, 0x666f6c6473ULL));
    std::vector<std::string> deck;
    auto draw = [&]() {
        if (deck.empty()) {
            deck = videos;
            std::shuffle(deck.begin(), deck.end(), rng);
        }
        auto v = deck.back();
        deck.pop_back();
        return v;
    };

    std::set<std::pair<std::string, std::string>> used;
    std::vector<FoldSplit> folds;
    for (int f = 0; f < n_folds; ++f) {
        std::string val;
        std::string test;
        for (int attempt = 0; attempt < 64; ++attempt) {
            val = draw();
            test = draw();
            while (test == val) {
                test = draw();
            }
            if (!used.contains({val, test})) {
                break;
            }
        }
        used.insert({val, test});

        FoldSplit split;
        split.fold_index = f;
        split.validation_videos = {val};
        split.test_videos = {test};
        for (const auto& v : videos) {
            if (v != val && v != test) {
                split.train_videos.push_back(v);
            }
        }
        for (std::size_t i = 0; i < records.size(); ++i) {
            const auto& vid = records[i].video_id;
            if (vid == val) {
                split.validation_clips.push_back(i);
            } else if (vid == test) {
                split.test_clips.push_back(i);
            } else {
                split.train_clips.push_back(i);
            }
        }
        folds.push_back(std::move(split));
    }
    return folds;
}

ValidityReport check_no_leakage(const FoldSplit& split, std::span<const ClipRecord> records) {
    ValidityReport report;
    auto& v = report.violations;
    const std::vector<std::pair<const char*, const std::vector<std::string>*>> sets = {
        {"train", &split.train_videos},
        {"validation", &split.validation_videos},
        {"test", &split.test_videos},
    };
    std::map<std::string, std::vector<std::string>> membership;
    for (const auto& [name, videos] : sets) {
        for (const auto& vid : *videos) {
            membership[vid].push_back(name);
        }
    }
    for (const auto& [vid, names] : membership) {
        if (names.size() > 1) {
            std::string msg = "video '" + vid + "' in";
            for (std::size_t i = 0; i < names.size(); ++i) {
                msg += (i == 0 ? " " : " and ") + names[i];
            }
            v.push_back(msg);
        }
    }
    if (split.validation_videos.size() != 1) {
        v.push_back("validation set has " + std::to_string(split.validation_videos.size()) +
                    " videos, expected 1");
    }
    if (split.test_videos.size() != 1) {
        v.push_back("test set has " + std::to_string(split.test_videos.size()) +
                    " videos, expected 1");
    }

    const std::vector<std::pair<const char*, const std::vector<std::size_t>*>> lists = {
        {"train", &split.train_clips},
        {"validation", &split.validation_clips},
        {"test", &split.test_clips},
    };
    std::vector<int> listed(records.size(), 0);
    for (const auto& [name, clips] : lists) {
        for (auto idx : *clips) {
            if (idx >= records.size()) {
                v.push_back(std::string("clip index ") + std::to_string(idx) + " in " + name +
                            " is out of range");
                continue;
            }
            ++listed[idx];
            const auto& vid = records[idx].video_id;
            auto m = membership.find(vid);
            bool ok = m != membership.end() &&
                      std::find(m->second.begin(), m->second.end(), std::string(name)) !=
                          m->second.end();
            if (!ok) {
                v.push_back("clip " + std::to_string(idx) + " of video '" + vid + "' listed in " +
                            name + " but its video is not");
            }
        }
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& vid = records[i].video_id;
        if (!membership.contains(vid)) {
            v.push_back("orphan clip " + std::to_string(i) + " (video '" + vid + "')");
        } else if (listed[i] != 1) {
            v.push_back("clip " + std::to_string(i) + " listed " + std::to_string(listed[i]) +
                        " times");
        }
    }
    return report;
}

void SynthSpec::validate() const {
    if (feature_dim < 4) {
        throw ValidationError("synthetic feature_dim must be >= 4");
    }
    if (!(separation >= 0.0)) {
        throw ValidationError("synthetic separation must be >= 0");
    }
    if (!(noise_sd > 0.0)) {
        throw ValidationError("synthetic noise_sd must be > 0");
    }
    if (n_videos < 1 || clips_per_video < 1) {
        throw ValidationError("synthetic corpus needs at least one video and one clip per video");
    }
    if (tasks.empty()) {
        throw ValidationError("synthetic corpus needs at least one task");
    }
    if (!(min_clip_s > 0.0 && max_clip_s >= min_clip_s)) {
        throw ValidationError("synthetic clip duration range is invalid");
    }
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over a combined state.
    std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::uint64_t hash_string(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

SyntheticWorld::SyntheticWorld(SynthSpec spec, const Taxonomy& taxonomy)
    : spec_(std::move(spec)), taxonomy_(taxonomy) {
    spec_.validate();
    for (int task : spec_.tasks) {
        const auto& schema = taxonomy_.schema_for_task(task);
        for (const auto& tag : schema.tags) {
            for (const auto& category : tag.categories) {
                auto key = std::make_pair(tag.key, category);
                if (directions_.contains(key)) {
                    continue;
                }
                std::mt19937_64 rng(mix_seed(mix_seed(spec_.seed, hash_string(tag.key)),
                                             hash_string(category)));
                std::normal_distribution<double> normal(0.0, 1.0);
                std::vector<double> d(static_cast<std::size_t>(spec_.feature_dim));
                double norm = 0.0;
                for (auto& x : d) {
                    x = normal(rng);
                    norm += x * x;
                }
                norm = std::sqrt(norm);
                std::vector<float> unit(d.size());
                for (std::size_t i = 0; i < d.size(); ++i) {
                    unit[i] = static_cast<float>(d[i] / norm);
                }
                directions_.emplace(std::move(key), std::move(unit));
            }
        }
    }
}

std::span<const float> SyntheticWorld::direction(const std::string& tag_key,
                                                 const std::string& category) const {
    auto it = directions_.find({tag_key, category});
    if (it == directions_.end()) {
        throw NotFoundError("synthetic world has no direction for " + tag_key + "=" + category);
    }
    return it->second;
}

std::vector<double> SyntheticWorld::clean_feature(const ComponentAnnotation& annotation) const {
    std::vector<double> x(static_cast<std::size_t>(spec_.feature_dim), 0.0);
    for (const auto& [key, category] : annotation.tag_values) {
        auto dir = direction(key, category);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] += spec_.separation * dir[i];
        }
    }
    return x;
}

std::vector<float> SyntheticWorld::feature(const ComponentAnnotation& annotation,
                                           std::uint64_t clip_index) const {
    auto clean = clean_feature(annotation);
    std::mt19937_64 rng(mix_seed(mix_seed(spec_.seed, 0x6e6f697365ULL), clip_index));
    std::normal_distribution<double> normal(0.0, spec_.noise_sd);
    std::vector<float> out(clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i) {
        out[i] = static_cast<float>(clean[i] + normal(rng));
    }
    return out;
}

ComponentAnnotation SyntheticWorld::sample_annotation(int task_id, std::mt19937_64& rng) const {
    const auto& schema = taxonomy_.schema_for_task(task_id);
    ComponentAnnotation a;
    a.task_id = task_id;
    for (const auto& tag : schema.tags) {
        std::uniform_int_distribution<std::size_t> pick(0, tag.categories.size() - 1);
        a.tag_values[tag.key] = tag.categories[pick(rng)];
    }
    return a;
}

SyntheticCorpus generate_synthetic(const SyntheticWorld& world, const std::string& feature_file,
                                   std::uint64_t index_offset, const std::string& video_prefix) {
    const auto& spec = world.spec();
    SyntheticCorpus corpus;
    corpus.features = FeatureMatrix(0, static_cast<std::uint32_t>(spec.feature_dim));
    std::uint64_t index = index_offset;
    char name[32];
    for (int v = 0; v < spec.n_videos; ++v) {
        std::snprintf(name, sizeof(name), "%03d", v);
        std::string video_id = video_prefix + name;
        double t = 0.0;
        for (int c = 0; c < spec.clips_per_video; ++c, ++index) {
            std::mt19937_64 rng(mix_seed(mix_seed(spec.seed, 0x6c6162656cULL), index));
            std::uniform_int_distribution<std::size_t> pick_task(0, spec.tasks.size() - 1);
            int task = spec.tasks[pick_task(rng)];
            ClipRecord r;
            r.video_id = video_id;
            r.annotation = world.sample_annotation(task, rng);
            std::uniform_real_distribution<double> dur(spec.min_clip_s, spec.max_clip_s);
            // Millisecond-rounded spans keep manifests short and exact.
            double d = std::max(spec.min_clip_s, std::round(dur(rng) * 1000.0) / 1000.0);
            r.annotation.span = {t, t + d};
            t = std::round((t + d) * 1000.0) / 1000.0;
            r.annotation.source = Source::manual;
            r.feature = {feature_file, corpus.features.count};
            corpus.features.append(world.feature(r.annotation, index));
            corpus.records.push_back(std::move(r));
        }
    }
    return corpus;
}

} // namespace surgimap
