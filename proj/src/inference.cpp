#include "surgimap/inference.hpp"

#include "surgimap/errors.hpp"

#include <algorithm>
#include <cmath>

namespace surgimap {

namespace {

constexpr std::size_t kDecodeChunk = 256;

std::vector<double> softmax_row(const Matrix<float>& logits, Eigen::Index row) {
    const auto cols = logits.cols();
    std::vector<double> p(static_cast<std::size_t>(cols));
    double mx = -INFINITY;
    for (Eigen::Index c = 0; c < cols; ++c) {
        mx = std::max(mx, static_cast<double>(logits(row, c)));
    }
    double sum = 0.0;
    for (Eigen::Index c = 0; c < cols; ++c) {
        p[static_cast<std::size_t>(c)] = std::exp(static_cast<double>(logits(row, c)) - mx);
        sum += p[static_cast<std::size_t>(c)];
    }
    for (auto& x : p) {
        x /= sum;
    }
    return p;
}

double log_softmax_at(const Matrix<float>& logits, Eigen::Index row, int col) {
    double mx = -INFINITY;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        mx = std::max(mx, static_cast<double>(logits(row, c)));
    }
    double sum = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        sum += std::exp(static_cast<double>(logits(row, c)) - mx);
    }
    return static_cast<double>(logits(row, col)) - mx - std::log(sum);
}

std::size_t tag_index(const TaskSchema& schema, const std::string& key) {
    for (std::size_t k = 0; k < schema.tags.size(); ++k) {
        if (schema.tags[k].key == key) {
            return k;
        }
    }
    throw NotFoundError("task " + std::to_string(schema.task_id) + " has no tag '" + key + "'");
}

} // namespace

Sequence make_sequence(const ModelConfig& config, const Vocabulary& vocab, const TaskSchema& schema,
                       std::span<const float> clip, const std::vector<TokenId>& tag_ids) {
    if (tag_ids.empty()) {
        throw ValidationError("make_sequence: empty tag sequence");
    }
    if (static_cast<int>(tag_ids.size()) - 1 > config.max_components) {
        throw ValidationError("make_sequence: tag sequence of " + std::to_string(tag_ids.size()) +
                              " tokens exceeds S_max");
    }
    Sequence s;
    s.clip.assign(clip.begin(), clip.end());
    s.instruction = encode_instruction(vocab, schema.instruction, config.instruction_slots).ids;
    s.components.assign(tag_ids.begin(), tag_ids.end() - 1);
    const auto n = static_cast<std::size_t>(s.length());
    s.targets.assign(n, 0);
    s.mask.assign(n, 0);
    // The last prefix row predicts the first tag token; component row k predicts token k+1.
    const auto first = static_cast<std::size_t>(config.instruction_slots);
    for (std::size_t k = 0; k < tag_ids.size(); ++k) {
        int local = vocab.to_local(tag_ids[k]);
        if (local < 0) {
            throw ValidationError("make_sequence: token '" + vocab.word(tag_ids[k]) +
                                  "' is not an annotation token");
        }
        s.targets[first + k] = local;
        s.mask[first + k] = 1;
    }
    return s;
}

Predictor::Predictor(const Model& model, const Vocabulary& vocab, const Taxonomy& taxonomy)
    : model_(model), vocab_(vocab), taxonomy_(taxonomy) {
    if (static_cast<int>(vocab.size()) != model.config().vocab_size ||
        static_cast<int>(vocab.annotation_size()) != model.config().output_size) {
        throw ValidationError("vocabulary does not match the model's embedding and output sizes");
    }
}

Sequence Predictor::prefix_sequence(std::span<const float> clip, const TaskSchema& schema,
                                    const std::vector<TokenId>& generated) const {
    Sequence s;
    s.clip.assign(clip.begin(), clip.end());
    s.instruction = encode_instruction(vocab_, schema.instruction, model_.config().instruction_slots).ids;
    s.components = generated;
    s.targets.assign(static_cast<std::size_t>(s.length()), 0);
    s.mask.assign(static_cast<std::size_t>(s.length()), 0);
    return s;
}

std::vector<std::vector<double>> Predictor::next_distributions(const std::vector<Sequence>& batch) const {
    auto cache = model_.forward(batch);
    std::vector<std::vector<double>> out;
    out.reserve(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        out.push_back(softmax_row(cache.logits, cache.offsets[b + 1] - 1));
    }
    return out;
}

std::vector<Predictor::Trace> Predictor::generate(const std::vector<std::vector<float>>& clips,
                                                  const TaskSchema& schema, bool constrain,
                                                  TokenId stop_token) const {
    const SchemaGrammar grammar(vocab_, schema);
    const auto s_max = static_cast<std::size_t>(model_.config().max_components);
    std::vector<Trace> traces(clips.size());
    std::vector<std::size_t> active(clips.size());
    for (std::size_t i = 0; i < active.size(); ++i) {
        active[i] = i;
    }
    while (!active.empty()) {
        std::vector<Sequence> batch;
        batch.reserve(active.size());
        for (auto i : active) {
            batch.push_back(prefix_sequence(clips[i], schema, traces[i].ids));
        }
        auto dists = next_distributions(batch);
        std::vector<std::size_t> still;
        for (std::size_t a = 0; a < active.size(); ++a) {
            auto& trace = traces[active[a]];
            const auto& p = dists[a];
            TokenId chosen = -1;
            double best = -1.0;
            if (constrain) {
                // allowed_next is sorted, so strict comparison keeps the lowest id on ties.
                for (TokenId id : grammar.allowed_next(trace.ids)) {
                    double q = p[static_cast<std::size_t>(vocab_.to_local(id))];
                    if (q > best) {
                        best = q;
                        chosen = id;
                    }
                }
            } else {
                for (std::size_t l = 0; l < p.size(); ++l) {
                    if (p[l] > best) {
                        best = p[l];
                        chosen = vocab_.to_global(static_cast<int>(l));
                    }
                }
            }
            if (chosen < 0) {
                continue;
            }
            trace.ids.push_back(chosen);
            trace.probs.push_back(p);
            if (chosen != Vocabulary::kEos && chosen != stop_token && trace.ids.size() < s_max) {
                still.push_back(active[a]);
            }
        }
        active = std::move(still);
    }
    return traces;
}

void Predictor::finish(Decoded& d, const TaskSchema& schema,
                       const std::vector<std::vector<double>>& step_probs) const {
    auto parsed = decode_tags(vocab_, schema, d.ids);
    if (!parsed.ok()) {
        d.failure = parsed.failure;
        return;
    }
    // Word positions of each tag lie between its marker and the next marker or <eos>.
    std::size_t pos = 0;
    for (std::size_t k = 0; k < schema.tags.size(); ++k) {
        ++pos; // marker
        double log_sum = 0.0;
        int words = 0;
        while (pos < d.ids.size() && d.ids[pos] != Vocabulary::kEos &&
               (k + 1 >= schema.tags.size() || d.ids[pos] != *vocab_.find(schema.tags[k + 1].marker()))) {
            log_sum += std::log(step_probs[pos][static_cast<std::size_t>(vocab_.to_local(d.ids[pos]))]);
            ++words;
            ++pos;
        }
        d.confidence[schema.tags[k].key] = words > 0 ? std::exp(log_sum / words) : 0.0;
    }
    d.annotation = std::move(parsed.annotation);
    d.annotation->task_id = schema.task_id;
    d.annotation->source = Source::ai;
    d.annotation->confidence = d.confidence;
}

std::vector<Decoded> Predictor::greedy_decode_batch(const std::vector<std::vector<float>>& clips,
                                                    int task_id, DecodeOptions options) const {
    const auto& schema = taxonomy_.schema_for_task(task_id);
    std::vector<Decoded> out;
    out.reserve(clips.size());
    for (std::size_t begin = 0; begin < clips.size(); begin += kDecodeChunk) {
        auto end = std::min(clips.size(), begin + kDecodeChunk);
        std::vector<std::vector<float>> chunk(clips.begin() + static_cast<std::ptrdiff_t>(begin),
                                              clips.begin() + static_cast<std::ptrdiff_t>(end));
        for (auto& trace : generate(chunk, schema, options.constrain, -1)) {
            Decoded d;
            d.ids = std::move(trace.ids);
            if (options.keep_probabilities) {
                for (const auto& p : trace.probs) {
                    d.step_probabilities.emplace_back(p.begin(), p.end());
                }
            }
            finish(d, schema, trace.probs);
            out.push_back(std::move(d));
        }
    }
    return out;
}

Decoded Predictor::greedy_decode(std::span<const float> clip, int task_id, DecodeOptions options) const {
    return std::move(greedy_decode_batch({std::vector<float>(clip.begin(), clip.end())}, task_id, options).front());
}

std::vector<double> Predictor::score_binary_tag_batch(const std::vector<std::vector<float>>& clips,
                                                      int task_id, const std::string& tag_key,
                                                      const std::string& positive) const {
    const auto& schema = taxonomy_.schema_for_task(task_id);
    const auto k = tag_index(schema, tag_key);
    const auto& tag = schema.tags[k];
    if (tag.categories.size() != 2) {
        throw ValidationError("tag " + tag.name + " has " + std::to_string(tag.categories.size()) +
                              " categories; binary scoring needs exactly 2");
    }
    const int pos_index = tag.index_of(positive);
    if (pos_index < 0) {
        throw NotFoundError("tag " + tag.name + " has no category '" + positive + "'");
    }
    const SchemaGrammar grammar(vocab_, schema);
    const int m = model_.config().instruction_slots;
    const auto s_max = static_cast<std::size_t>(model_.config().max_components);

    std::vector<double> scores;
    scores.reserve(clips.size());
    for (std::size_t begin = 0; begin < clips.size(); begin += kDecodeChunk) {
        auto end = std::min(clips.size(), begin + kDecodeChunk);
        std::vector<std::vector<float>> chunk(clips.begin() + static_cast<std::ptrdiff_t>(begin),
                                              clips.begin() + static_cast<std::ptrdiff_t>(end));
        auto traces = generate(chunk, schema, true, grammar.marker(k));

        std::vector<Sequence> batch;
        std::vector<std::size_t> prefix_len;
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            for (int c = 0; c < 2; ++c) {
                const auto& words = grammar.category_tokens(k, c);
                auto comps = traces[i].ids;
                comps.insert(comps.end(), words.begin(), words.end() - 1);
                if (comps.size() > s_max) {
                    throw ValidationError("binary scoring exceeds S_max");
                }
                batch.push_back(prefix_sequence(chunk[i], schema, comps));
                prefix_len.push_back(traces[i].ids.size());
            }
        }
        auto cache = model_.forward(batch);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            double logp[2] = {0.0, 0.0};
            for (int c = 0; c < 2; ++c) {
                const auto b = 2 * i + static_cast<std::size_t>(c);
                const auto& words = grammar.category_tokens(k, c);
                for (std::size_t j = 0; j < words.size(); ++j) {
                    // Component index prefix_len + j is predicted by row m + prefix_len + j.
                    auto row = cache.offsets[b] + m + static_cast<int>(prefix_len[b] + j);
                    logp[c] += log_softmax_at(cache.logits, row, vocab_.to_local(words[j]));
                }
            }
            const double lp = logp[pos_index];
            const double ln = logp[1 - pos_index];
            scores.push_back(1.0 / (1.0 + std::exp(ln - lp)));
        }
    }
    return scores;
}

double Predictor::score_binary_tag(std::span<const float> clip, int task_id, const std::string& tag_key,
                                   const std::string& positive) const {
    return score_binary_tag_batch({std::vector<float>(clip.begin(), clip.end())}, task_id, tag_key, positive)
        .front();
}

std::vector<MappedClip> Predictor::map_clips(std::span<const ClipRecord> clips, const FeatureProvider& provider,
                                             int task_id, DecodeOptions options) const {
    taxonomy_.schema_for_task(task_id);
    std::vector<MappedClip> out(clips.size());
    std::vector<std::vector<float>> features;
    std::vector<std::size_t> resolved;
    for (std::size_t i = 0; i < clips.size(); ++i) {
        out[i].video_id = clips[i].video_id;
        out[i].span = clips[i].span();
        out[i].task_id = task_id;
        try {
            features.push_back(provider.provide(clips[i]));
            resolved.push_back(i);
        } catch (const Error& e) {
            out[i].error = e.what();
        }
    }
    auto decoded = greedy_decode_batch(features, task_id, options);
    for (std::size_t j = 0; j < resolved.size(); ++j) {
        auto& m = out[resolved[j]];
        if (decoded[j].ok()) {
            m.annotation = std::move(decoded[j].annotation);
            m.annotation->span = m.span;
        } else {
            m.error = "parse failure: " + decoded[j].failure;
        }
    }
    return out;
}

nlohmann::ordered_json mapped_to_json(const MappedClip& clip) {
    nlohmann::ordered_json j;
    j["video_id"] = clip.video_id;
    j["start_s"] = clip.span.start_s;
    j["end_s"] = clip.span.end_s;
    j["task_id"] = clip.task_id;
    if (clip.annotation) {
        j["tags"] = tags_to_json(clip.annotation->tag_values);
        nlohmann::ordered_json conf = nlohmann::ordered_json::object();
        for (const auto& [k, v] : clip.annotation->confidence) {
            conf[k] = v;
        }
        j["confidence"] = conf;
    } else {
        j["error"] = clip.error;
    }
    return j;
}

} // namespace surgimap
