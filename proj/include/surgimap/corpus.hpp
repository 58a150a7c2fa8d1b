#pragma once

#include "surgimap/hsaf.hpp"
#include "surgimap/taxonomy.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace surgimap {

struct FeatureRef {
    std::string file; // relative paths resolve against the manifest's directory
    std::uint32_t index = 0;

    bool operator==(const FeatureRef&) const = default;
};

// One annotated clip. Span, task, source and tag values live in `annotation`.
struct ClipRecord {
    std::string video_id;
    ComponentAnnotation annotation;
    FeatureRef feature;

    int task_id() const { return annotation.task_id; }
    const Span& span() const { return annotation.span; }

    bool operator==(const ClipRecord&) const = default;
};

nlohmann::ordered_json record_to_json(const ClipRecord& record);
ClipRecord record_from_json(const nlohmann::json& j, const Taxonomy& taxonomy);
nlohmann::ordered_json tags_to_json(const std::map<std::string, std::string>& tags);

// JSON-lines manifest. Loading validates every record against the taxonomy
// and reports failures as "line N: ...".
std::vector<ClipRecord> load_manifest(const std::filesystem::path& path, const Taxonomy& taxonomy);
std::vector<ClipRecord> parse_manifest(std::string_view text, const Taxonomy& taxonomy);
std::string serialize_manifest(std::span<const ClipRecord> records);
void save_manifest(std::span<const ClipRecord> records, const std::filesystem::path& path);

struct FoldSplit {
    int fold_index = 0;
    std::vector<std::string> train_videos;
    std::vector<std::string> validation_videos;
    std::vector<std::string> test_videos;
    // Indices into the record list the split was made from.
    std::vector<std::size_t> train_clips;
    std::vector<std::size_t> validation_clips;
    std::vector<std::size_t> test_clips;

    bool operator==(const FoldSplit&) const = default;
};

// Monte-Carlo leave-one-video-out folds: each fold sends one video to
// validation, one to test, and the rest to train.
std::vector<FoldSplit> make_folds(std::span<const ClipRecord> records, int n_folds,
                                  std::uint64_t seed);

ValidityReport check_no_leakage(const FoldSplit& split, std::span<const ClipRecord> records);

struct SynthSpec {
    int n_videos = 10;
    int clips_per_video = 20;
    std::vector<int> tasks = {1, 2, 3, 4};
    int feature_dim = 32;
    double separation = 3.0;
    double noise_sd = 0.5;
    std::uint64_t seed = 0;
    double min_clip_s = 1.0;
    double max_clip_s = 20.0;

    void validate() const;
};

// Deterministic hash mixing used to derive independent random streams.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t hash_string(std::string_view s);

// The synthetic generative model: each (tag, category) owns a fixed unit
// direction; a clip feature is separation * sum of its tags' directions plus
// isotropic Gaussian noise.
class SyntheticWorld {
public:
    SyntheticWorld(SynthSpec spec, const Taxonomy& taxonomy);

    const SynthSpec& spec() const { return spec_; }
    std::span<const float> direction(const std::string& tag_key, const std::string& category) const;
    std::vector<double> clean_feature(const ComponentAnnotation& annotation) const;
    // Feature of the clip with generator index `clip_index`, deterministic.
    std::vector<float> feature(const ComponentAnnotation& annotation, std::uint64_t clip_index) const;
    ComponentAnnotation sample_annotation(int task_id, std::mt19937_64& rng) const;
    const Taxonomy& taxonomy() const { return taxonomy_; }

private:
    SynthSpec spec_;
    Taxonomy taxonomy_;
    std::map<std::pair<std::string, std::string>, std::vector<float>> directions_;
};

struct SyntheticCorpus {
    std::vector<ClipRecord> records;
    FeatureMatrix features;
};

// Records reference rows of `feature_file` in generation order. Clip k uses
// generator index `index_offset + k`, so disjoint offsets give independent
// samples from the same world.
SyntheticCorpus generate_synthetic(const SyntheticWorld& world, const std::string& feature_file,
                                   std::uint64_t index_offset = 0,
                                   const std::string& video_prefix = "v");

} // namespace surgimap
