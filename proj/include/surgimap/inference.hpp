#pragma once

#include "surgimap/corpus.hpp"
#include "surgimap/encoder.hpp"
#include "surgimap/model.hpp"
#include "surgimap/tokenizer.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace surgimap {

struct Decoded {
    std::vector<TokenId> ids;
    std::optional<ComponentAnnotation> annotation;
    std::string failure;
    // Geometric mean of the chosen category's word-token probabilities, per tag key.
    std::map<std::string, double> confidence;
    // Softmax over V_A at each generation step, when requested.
    std::vector<std::vector<float>> step_probabilities;

    bool ok() const { return annotation.has_value(); }
};

struct DecodeOptions {
    bool constrain = false;
    bool keep_probabilities = false;
};

struct MappedClip {
    std::string video_id;
    Span span;
    int task_id = 0;
    std::optional<ComponentAnnotation> annotation;
    std::string error; // provider failure or parse failure

    bool ok() const { return annotation.has_value(); }
};

// Training-time and inference-time view of one clip: prefix inputs plus the
// teacher-forced targets of its tag sequence.
Sequence make_sequence(const ModelConfig& config, const Vocabulary& vocab, const TaskSchema& schema,
                       std::span<const float> clip, const std::vector<TokenId>& tag_ids);

// Greedy generation against a frozen model. Read-only and safe to share
// across threads.
class Predictor {
public:
    Predictor(const Model& model, const Vocabulary& vocab, const Taxonomy& taxonomy);

    Decoded greedy_decode(std::span<const float> clip, int task_id, DecodeOptions options = {}) const;
    // Decodes many clips of one task together; results follow input order.
    std::vector<Decoded> greedy_decode_batch(const std::vector<std::vector<float>>& clips, int task_id,
                                             DecodeOptions options = {}) const;

    // Probability of `positive` for a two-category tag, renormalized over both
    // categories after constrained decoding up to the tag's marker.
    double score_binary_tag(std::span<const float> clip, int task_id, const std::string& tag_key,
                            const std::string& positive) const;
    std::vector<double> score_binary_tag_batch(const std::vector<std::vector<float>>& clips, int task_id,
                                               const std::string& tag_key, const std::string& positive) const;

    std::vector<MappedClip> map_clips(std::span<const ClipRecord> clips, const FeatureProvider& provider,
                                      int task_id, DecodeOptions options = {}) const;

    const Model& model() const { return model_; }
    const Vocabulary& vocab() const { return vocab_; }
    const Taxonomy& taxonomy() const { return taxonomy_; }

private:
    struct Trace {
        std::vector<TokenId> ids;
        std::vector<std::vector<double>> probs; // per generated token
    };
    // Greedy generation until <eos>, `stop_token`, or S_max tokens.
    std::vector<Trace> generate(const std::vector<std::vector<float>>& clips, const TaskSchema& schema,
                                bool constrain, TokenId stop_token) const;
    Sequence prefix_sequence(std::span<const float> clip, const TaskSchema& schema,
                             const std::vector<TokenId>& generated) const;
    // Softmax over V_A of the last row of each sequence.
    std::vector<std::vector<double>> next_distributions(const std::vector<Sequence>& batch) const;
    void finish(Decoded& d, const TaskSchema& schema,
                const std::vector<std::vector<double>>& step_probs) const;

    const Model& model_;
    const Vocabulary& vocab_;
    const Taxonomy& taxonomy_;
};

nlohmann::ordered_json mapped_to_json(const MappedClip& clip);

} // namespace surgimap
