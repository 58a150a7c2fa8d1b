#include "surgimap/trainer.hpp"

#include "surgimap/errors.hpp"
#include "surgimap/inference.hpp"
#include "surgimap/metrics.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

namespace surgimap {

void TrainConfig::validate() const {
    if (epochs < 1) {
        throw ValidationError("train: epochs must be >= 1");
    }
    if (batch_size < 1) {
        throw ValidationError("train: batch_size must be >= 1");
    }
    if (!(lr_base >= 0.0) || !(weight_decay >= 0.0) || !(epsilon > 0.0)) {
        throw ValidationError("train: lr_base and weight_decay must be >= 0, epsilon > 0");
    }
    if (!(warmup_epochs >= 0.0) || warmup_epochs >= epochs) {
        throw ValidationError("train: warmup_epochs must lie in [0, epochs)");
    }
    if (!(warmup_start_factor > 0.0 && warmup_start_factor <= 1.0)) {
        throw ValidationError("train: warmup_start_factor must lie in (0, 1]");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ValidationError("train: betas must lie in [0, 1)");
    }
    if (min_clip_s < 0.0) {
        throw ValidationError("train: min_clip_s must be >= 0");
    }
}

double lr_schedule(const TrainConfig& c, double e) {
    e = std::clamp(e, 0.0, static_cast<double>(c.epochs));
    if (e < c.warmup_epochs) {
        double f = c.warmup_start_factor + (1.0 - c.warmup_start_factor) * (e / c.warmup_epochs);
        return c.lr_base * f;
    }
    double span = c.epochs - c.warmup_epochs;
    double progress = (e - c.warmup_epochs) / span;
    return c.lr_base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

long steps_per_epoch(std::size_t clips, int batch_size) {
    if (batch_size < 1) {
        throw ValidationError("batch_size must be >= 1");
    }
    return static_cast<long>((clips + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

AdamW::AdamW(const TrainConfig& config, const ModelConfig& model)
    : config_(config), m_(Parameters<float>::zeros(model)), v_(Parameters<float>::zeros(model)) {}

void AdamW::step(Model& model, double lr) {
    ++t_;
    const auto b1 = static_cast<float>(config_.beta1);
    const auto b2 = static_cast<float>(config_.beta2);
    const auto c1 = static_cast<float>(1.0 - std::pow(config_.beta1, static_cast<double>(t_)));
    const auto c2 = static_cast<float>(1.0 - std::pow(config_.beta2, static_cast<double>(t_)));
    const auto eps = static_cast<float>(config_.epsilon);
    const auto rate = static_cast<float>(lr);
    const auto decay = static_cast<float>(lr * config_.weight_decay);

    std::vector<Matrix<float>*> params;
    std::vector<const Matrix<float>*> grads;
    std::vector<Matrix<float>*> ms;
    std::vector<Matrix<float>*> vs;
    model.params().for_each([&](const std::string&, Matrix<float>& p) { params.push_back(&p); });
    model.grads().for_each([&](const std::string&, const Matrix<float>& g) { grads.push_back(&g); });
    m_.for_each([&](const std::string&, Matrix<float>& m) { ms.push_back(&m); });
    v_.for_each([&](const std::string&, Matrix<float>& v) { vs.push_back(&v); });

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->array();
        auto g = grads[i]->array();
        auto m = ms[i]->array();
        auto v = vs[i]->array();
        m = b1 * m + (1.0f - b1) * g;
        v = b2 * v + (1.0f - b2) * g.square();
        p -= decay * p + rate * ((m / c1) / ((v / c2).sqrt() + eps));
    }
}

bool checkpoint_rule(const std::map<int, double>& metrics, const std::vector<int>& tasks,
                     CheckpointLedger& ledger) {
    if (tasks.empty()) {
        throw ValidationError("checkpoint_rule: no tasks configured");
    }
    double worst = INFINITY;
    for (int t : tasks) {
        auto it = metrics.find(t);
        if (it == metrics.end()) {
            throw ValidationError("checkpoint_rule: missing metric for task " + std::to_string(t));
        }
        worst = std::min(worst, it->second);
    }
    ledger.history.push_back(metrics);
    if (ledger.best_worst_metric && !(worst > *ledger.best_worst_metric)) {
        return false;
    }
    ledger.best_worst_metric = worst;
    ++ledger.saves;
    return true;
}

std::vector<int> Dataset::tasks() const {
    std::set<int> ids;
    for (const auto& e : examples) {
        ids.insert(e.annotation.task_id);
    }
    return {ids.begin(), ids.end()};
}

Example make_example(const ModelConfig& config, const Vocabulary& vocab, const Taxonomy& taxonomy,
                     std::span<const float> clip, const ComponentAnnotation& annotation) {
    const auto& schema = taxonomy.schema_for_task(annotation.task_id);
    auto tags = encode_tags(vocab, taxonomy, annotation);
    return {make_sequence(config, vocab, schema, clip, tags.ids), annotation};
}

Dataset build_dataset(std::span<const ClipRecord> records, const std::vector<std::size_t>& indices,
                      const FeatureProvider& provider, const Vocabulary& vocab, const Taxonomy& taxonomy,
                      const ModelConfig& config, double min_clip_s) {
    Dataset d;
    auto add = [&](std::size_t i) {
        const auto& r = records[i];
        if (r.span().duration() < min_clip_s) {
            ++d.skipped_short;
            return;
        }
        auto clip = provider.provide(r);
        d.examples.push_back(make_example(config, vocab, taxonomy, clip, r.annotation));
    };
    if (indices.empty()) {
        for (std::size_t i = 0; i < records.size(); ++i) {
            add(i);
        }
    } else {
        for (auto i : indices) {
            add(i);
        }
    }
    if (d.skipped_short > 0) {
        spdlog::info("skipped {} clips shorter than {} s", d.skipped_short, min_clip_s);
    }
    return d;
}

std::map<int, TaskMetric> evaluate_tasks(const Model& model, const Vocabulary& vocab, const Taxonomy& taxonomy,
                                         const Dataset& validation, bool constrained) {
    if (validation.examples.empty()) {
        throw ValidationError("evaluate: empty validation split");
    }
    Predictor predictor(model, vocab, taxonomy);
    std::map<int, std::vector<const Example*>> by_task;
    for (const auto& e : validation.examples) {
        by_task[e.annotation.task_id].push_back(&e);
    }
    std::map<int, TaskMetric> out;
    for (const auto& [task, examples] : by_task) {
        const auto& schema = taxonomy.schema_for_task(task);
        std::vector<std::vector<float>> clips;
        std::vector<ComponentAnnotation> truth;
        for (const auto* e : examples) {
            clips.push_back(e->sequence.clip);
            truth.push_back(e->annotation);
        }
        if (schema.auroc_tag) {
            const auto* tag = schema.find_tag(*schema.auroc_tag);
            const std::string& positive = tag->categories.back();
            std::vector<int> labels;
            for (const auto& t : truth) {
                labels.push_back(t.tag_values.at(tag->key) == positive ? 1 : 0);
            }
            bool both = std::find(labels.begin(), labels.end(), 0) != labels.end() &&
                        std::find(labels.begin(), labels.end(), 1) != labels.end();
            if (both) {
                auto scores = predictor.score_binary_tag_batch(clips, task, tag->key, positive);
                out[task] = {binary_auroc(scores, labels), "auroc"};
                continue;
            }
            spdlog::warn("task {}: validation labels for {} are single-class; using exact-match accuracy",
                         task, tag->name);
        }
        auto decoded = predictor.greedy_decode_batch(clips, task, {constrained, false});
        std::vector<std::optional<ComponentAnnotation>> predicted;
        for (auto& d : decoded) {
            predicted.push_back(std::move(d.annotation));
        }
        out[task] = {all_tags_accuracy(predicted, truth), "exact_match"};
    }
    return out;
}

std::map<int, double> evaluate_epoch(const Model& model, const Vocabulary& vocab, const Taxonomy& taxonomy,
                                     const Dataset& validation, bool constrained) {
    std::map<int, double> out;
    for (const auto& [task, m] : evaluate_tasks(model, vocab, taxonomy, validation, constrained)) {
        out[task] = m.value;
    }
    return out;
}

nlohmann::ordered_json EpochRecord::to_json() const {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["lr"] = lr;
    j["loss_sum"] = loss_sum;
    j["loss_per_token"] = loss_per_token;
    nlohmann::ordered_json m = nlohmann::ordered_json::object();
    for (const auto& [task, v] : metrics) {
        m[std::to_string(task)] = v;
    }
    j["per_task_metrics"] = m;
    j["saved"] = saved;
    return j;
}

TrainResult train(Model& model, const Vocabulary& vocab, const Taxonomy& taxonomy, const Dataset& train_set,
                  const Dataset& validation, const TrainConfig& config,
                  const std::filesystem::path& checkpoint_path, std::ostream* log) {
    config.validate();
    if (train_set.examples.empty()) {
        throw ValidationError("train: empty training split");
    }
    const auto n = train_set.examples.size();
    const long steps = steps_per_epoch(n, config.batch_size);
    const auto tasks = validation.tasks();

    std::map<int, std::vector<std::size_t>> by_task;
    for (std::size_t i = 0; i < n; ++i) {
        by_task[train_set.examples[i].annotation.task_id].push_back(i);
    }
    std::vector<int> train_tasks;
    for (const auto& [t, _] : by_task) {
        train_tasks.push_back(t);
    }

    AdamW optimizer(config, model.config());
    std::mt19937_64 rng(mix_seed(config.seed, hash_string("train")));
    TrainResult result;
    result.best = model;

    std::vector<std::size_t> order(n);
    std::vector<Sequence> batch;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        if (config.oversample_tasks) {
            std::uniform_int_distribution<std::size_t> pick_task(0, train_tasks.size() - 1);
            for (auto& slot : order) {
                const auto& pool = by_task[train_tasks[pick_task(rng)]];
                std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
                slot = pool[pick(rng)];
            }
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                order[i] = i;
            }
            std::shuffle(order.begin(), order.end(), rng);
        }

        EpochRecord record;
        record.epoch = epoch + 1;
        int tokens = 0;
        for (long s = 0; s < steps; ++s) {
            const double e = epoch + static_cast<double>(s) / static_cast<double>(steps);
            const double lr = lr_schedule(config, e);
            if (s == 0) {
                record.lr = lr;
            }
            batch.clear();
            auto begin = static_cast<std::size_t>(s) * static_cast<std::size_t>(config.batch_size);
            auto end = std::min(n, begin + static_cast<std::size_t>(config.batch_size));
            for (auto i = begin; i < end; ++i) {
                batch.push_back(train_set.examples[order[i]].sequence);
            }
            model.zero_grad();
            LossValue loss;
            try {
                auto cache = model.forward(batch);
                loss = model.backward(cache);
            } catch (const NumericalError& err) {
                throw NumericalError("training diverged at epoch " + std::to_string(epoch + 1) + ", step " +
                                         std::to_string(s + 1) + ": " + err.what(),
                                     err.layer());
            }
            if (!std::isfinite(loss.sum)) {
                throw NumericalError("training diverged at epoch " + std::to_string(epoch + 1) + ", step " +
                                         std::to_string(s + 1) + ": non-finite loss",
                                     model.config().layers);
            }
            optimizer.step(model, lr);
            record.loss_sum += loss.sum;
            tokens += loss.tokens;
        }
        record.loss_per_token = tokens > 0 ? record.loss_sum / tokens : 0.0;

        if (!validation.examples.empty()) {
            record.metrics = evaluate_epoch(model, vocab, taxonomy, validation, config.eval_constrained);
            record.saved = checkpoint_rule(record.metrics, tasks, result.ledger);
            if (record.saved) {
                result.best = model;
                if (!checkpoint_path.empty()) {
                    save_checkpoint(model, checkpoint_path);
                    result.ledger.saved_path = checkpoint_path;
                }
            }
        }
        spdlog::debug("epoch {} lr {:.3g} loss/token {:.4f}{}", record.epoch, record.lr, record.loss_per_token,
                      record.saved ? " (saved)" : "");
        if (log) {
            *log << record.to_json().dump() << '\n';
            log->flush();
        }
        result.log.push_back(std::move(record));
    }
    return result;
}

} // namespace surgimap
