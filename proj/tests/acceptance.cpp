// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance [criterion-number ...]

#include "model_fixtures.hpp"
#include "oracles.hpp"
#include "pipeline_fixtures.hpp"
#include "service_harness.hpp"
#include "synth_oracle.hpp"
#include "test_util.hpp"
#include "surgimap/corpus.hpp"
#include "surgimap/fsutil.hpp"
#include "surgimap/inference.hpp"
#include "surgimap/metrics.hpp"
#include "surgimap/selflabel.hpp"
#include "surgimap/trainer.hpp"
#include "surgimap/workflow.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

using namespace surgimap;
using nlohmann::json;

namespace {

constexpr double kGradTolerance = 1e-3;
constexpr double kGradSeconds = 60.0;
constexpr double kLossTolerance = 1e-10;
constexpr double kUniformTolerance = 1e-9;
constexpr int kCausalityTrials = 1000;
constexpr double kOverfitAccuracy = 0.99;
constexpr int kOverfitMaxEpochs = 200;
constexpr double kOverfitSeconds = 300.0;
constexpr double kGeneralizationMargin = 0.05;
constexpr std::size_t kOracleSamples = 10000;
constexpr int kDecodesPerTask = 1000;
constexpr double kRandomBaselineTolerance = 0.01;
constexpr int kFoldCorpora = 100;
constexpr int kSelfLabelSeeds = 5;
constexpr double kMappingSeconds = 60.0;

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double x, int precision = 4) {
    std::ostringstream s;
    s << std::setprecision(precision) << x;
    return s.str();
}

ModelConfig model_config(const Vocabulary& vocab, const Taxonomy& tax, int feature_dim, int dim, int layers) {
    ModelConfig c;
    c.layers = layers;
    c.heads = 2;
    c.dim = dim;
    c.feature_dim = feature_dim;
    c.vocab_size = static_cast<int>(vocab.size());
    c.output_size = static_cast<int>(vocab.annotation_size());
    c.max_components = max_generated_length(tax);
    return c;
}

// All-tags exact match of unconstrained greedy decodes, pooled over tasks.
double training_accuracy(const Model& model, const Vocabulary& vocab, const Taxonomy& tax, const Dataset& data) {
    Predictor predictor(model, vocab, tax);
    std::map<int, std::vector<const Example*>> by_task;
    for (const auto& e : data.examples) {
        by_task[e.annotation.task_id].push_back(&e);
    }
    std::size_t hits = 0;
    for (const auto& [task, examples] : by_task) {
        std::vector<std::vector<float>> clips;
        for (const auto* e : examples) {
            clips.push_back(e->sequence.clip);
        }
        auto decoded = predictor.greedy_decode_batch(clips, task);
        for (std::size_t i = 0; i < examples.size(); ++i) {
            hits += decoded[i].annotation && decoded[i].annotation->tag_values == examples[i]->annotation.tag_values;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

double task_accuracy(const Model& model, const Vocabulary& vocab, const Taxonomy& tax, const Dataset& data, int task) {
    Predictor predictor(model, vocab, tax);
    std::vector<std::vector<float>> clips;
    std::vector<ComponentAnnotation> truth;
    for (const auto& e : data.examples) {
        clips.push_back(e.sequence.clip);
        truth.push_back(e.annotation);
    }
    auto decoded = predictor.greedy_decode_batch(clips, task);
    std::vector<std::optional<ComponentAnnotation>> predicted;
    for (auto& d : decoded) {
        predicted.push_back(std::move(d.annotation));
    }
    return all_tags_accuracy(predicted, truth);
}

// Saves implied by the strict-improvement rule, recomputed from metric history.
std::vector<bool> implied_saves(const std::vector<std::map<int, double>>& history) {
    std::vector<bool> out;
    std::optional<double> best;
    for (const auto& m : history) {
        double worst = 1e300;
        for (const auto& [task, v] : m) {
            worst = std::min(worst, v);
        }
        bool save = !best || worst > *best;
        if (save) {
            best = worst;
        }
        out.push_back(save);
    }
    return out;
}

std::vector<EpochRecord> g_overfit_log;

Outcome gradient_check() {
    auto t0 = Clock::now();
    double worst = 0.0;
    std::size_t checked = 0;
    for (std::uint64_t seed : {101u, 102u, 103u}) {
        auto c = testing::tiny_config(16);
        c.max_components = 6;
        Decoder<double> model(c, seed, 0.3);
        std::mt19937_64 rng(seed * 7);
        std::vector<Sequence> batch = {testing::random_sequence(c, rng, 6),
                                       testing::random_sequence(c, rng, static_cast<int>(rng() % 6))};
        auto r = testing::finite_difference_check(model, batch);
        worst = std::max(worst, r.max_relative_error);
        checked += r.checked;
    }
    double secs = seconds_since(t0);
    return {worst < kGradTolerance && secs < kGradSeconds,
            "3 configs, " + std::to_string(checked) + " parameters, max rel err " + fmt(worst, 3) + ", " +
                fmt(secs, 3) + " s"};
}

Outcome loss_oracle() {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n(0.0, 3.0);
    double worst = 0.0;
    double worst_uniform = 0.0;
    for (int trial = 0; trial < 500; ++trial) {
        const int rows = 2 + static_cast<int>(rng() % 20);
        Matrix<double> logits(rows, 20);
        for (Eigen::Index i = 0; i < logits.size(); ++i) {
            logits.data()[i] = n(rng);
        }
        std::vector<int> targets(static_cast<std::size_t>(rows));
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(rows));
        int masked = 0;
        for (int r = 0; r < rows; ++r) {
            targets[static_cast<std::size_t>(r)] = static_cast<int>(rng() % 20);
            mask[static_cast<std::size_t>(r)] = static_cast<std::uint8_t>(rng() % 2);
            masked += mask[static_cast<std::size_t>(r)];
        }
        double got = masked_nll<double>(logits, targets, mask).sum;
        worst = std::max(worst, std::abs(got - testing::reference_nll(logits, targets, mask)));
        Matrix<double> flat = Matrix<double>::Constant(rows, 20, n(rng));
        double uniform = masked_nll<double>(flat, targets, mask).sum;
        worst_uniform = std::max(worst_uniform, std::abs(uniform - masked * std::log(20.0)));
    }
    return {worst < kLossTolerance && worst_uniform < kUniformTolerance,
            "500 trials, max |loss - oracle| " + fmt(worst, 3) + ", max |uniform - n ln 20| " + fmt(worst_uniform, 3)};
}

Outcome causality() {
    auto c = testing::tiny_config();
    Decoder<float> model(c, 31, 0.5);
    std::mt19937_64 rng(32);
    int failures = 0;
    for (int trial = 0; trial < kCausalityTrials; ++trial) {
        auto s = testing::random_sequence(c, rng, 6);
        auto base = model.forward(std::vector<Sequence>{s});
        // Perturb every component from position j on.
        int j = static_cast<int>(rng() % 6);
        auto t = s;
        for (int k = j; k < 6; ++k) {
            t.components[static_cast<std::size_t>(k)] = static_cast<int>(rng() % static_cast<std::uint64_t>(c.vocab_size));
        }
        t.components[static_cast<std::size_t>(j)] = (s.components[static_cast<std::size_t>(j)] + 1) % c.vocab_size;
        auto changed = model.forward(std::vector<Sequence>{t});
        const int pos = c.instruction_slots + 1 + j;
        for (int p = 0; p < pos; ++p) {
            if (base.logits.row(p) != changed.logits.row(p)) {
                ++failures;
                break;
            }
        }
        // Targets and logits at unmasked positions must not reach the loss.
        auto u = s;
        auto cache = model.forward(std::vector<Sequence>{u});
        for (std::size_t p = 0; p < u.mask.size(); ++p) {
            if (!u.mask[p]) {
                u.targets[p] = (u.targets[p] + 1) % c.output_size;
                cache.logits.row(static_cast<Eigen::Index>(p)).array() += 1.0f + static_cast<float>(trial);
            }
        }
        auto reference = model.forward(std::vector<Sequence>{s});
        float before = model.loss(reference).sum;
        float after = masked_nll<float>(cache.logits, u.targets, u.mask).sum;
        if (before != after) {
            ++failures;
        }
    }
    return {failures == 0, std::to_string(kCausalityTrials) + " trials, " + std::to_string(failures) + " violations"};
}

Outcome overfit() {
    auto tax = Taxonomy::builtin();
    auto vocab = build_vocab(tax);
    SynthSpec spec;
    spec.n_videos = 10;
    spec.clips_per_video = 20;
    spec.separation = 3.0;
    spec.noise_sd = 0.5;
    spec.feature_dim = 32;
    spec.seed = 1;
    SyntheticWorld world(spec, tax);
    auto corpus = generate_synthetic(world, "features.hsaf");
    SyntheticProvider provider(world);
    auto mc = model_config(vocab, tax, 32, 64, 2);
    auto data = build_dataset(corpus.records, {}, provider, vocab, tax, mc);
    TrainConfig tc;
    tc.epochs = 60;
    tc.batch_size = 16;
    tc.lr_base = 2e-3;
    tc.seed = 3;
    Model model(mc, 7);
    auto t0 = Clock::now();
    auto result = train(model, vocab, tax, data, data, tc);
    double secs = seconds_since(t0);
    g_overfit_log = result.log;
    double acc = training_accuracy(result.best, vocab, tax, data);
    return {acc >= kOverfitAccuracy && tc.epochs <= kOverfitMaxEpochs && secs < kOverfitSeconds,
            std::to_string(data.size()) + " clips over 4 tasks, " +
                std::to_string(tc.epochs) + " epochs, training exact match " + fmt(acc) + ", " + fmt(secs, 3) + " s"};
}

Outcome generalization() {
    auto tax = Taxonomy::builtin();
    auto vocab = build_vocab(tax);
    SynthSpec spec;
    spec.separation = 2.0;
    spec.noise_sd = 1.0;
    spec.feature_dim = 64;
    spec.seed = 1;
    spec.tasks = {2};
    spec.clips_per_video = 100;
    spec.n_videos = 300;
    SyntheticWorld world(spec, tax);
    auto reference = oracle::nearest_mean_accuracy(world, 2, kOracleSamples, 99);

    auto train_corpus = generate_synthetic(world, "features.hsaf", 0);
    auto val_corpus = generate_synthetic(world, "features.hsaf", 1'000'000, "val");
    auto test_corpus = generate_synthetic(world, "features.hsaf", 2'000'000, "test");
    val_corpus.records.resize(1000);
    test_corpus.records.resize(4000);
    auto mc = model_config(vocab, tax, 64, 64, 2);
    SyntheticProvider p_train(world), p_val(world, 1'000'000), p_test(world, 2'000'000);
    auto train_set = build_dataset(train_corpus.records, {}, p_train, vocab, tax, mc);
    auto val_set = build_dataset(val_corpus.records, {}, p_val, vocab, tax, mc);
    auto test_set = build_dataset(test_corpus.records, {}, p_test, vocab, tax, mc);
    TrainConfig tc;
    tc.epochs = 12;
    tc.batch_size = 128;
    tc.lr_base = 3e-3;
    tc.seed = 3;
    Model model(mc, 7);
    auto t0 = Clock::now();
    auto result = train(model, vocab, tax, train_set, val_set, tc);
    double secs = seconds_since(t0);
    double acc = task_accuracy(result.best, vocab, tax, test_set, 2);
    return {acc >= reference.joint - kGeneralizationMargin,
            "held-out all-tags accuracy " + fmt(acc) + " vs nearest-mean oracle " + fmt(reference.joint) + " (" +
                std::to_string(reference.samples) + " samples; per tag action " + fmt(reference.per_tag["action"]) +
                ", arm " + fmt(reference.per_tag["arm"]) + ", instrument " + fmt(reference.per_tag["instrument"]) +
                "); " + std::to_string(train_set.size()) + " training clips, " + fmt(secs, 3) + " s"};
}

Outcome controllability() {
    testing::Pipeline p;
    std::mt19937_64 rng(4);
    std::normal_distribution<float> n(0.0f, 2.0f);
    std::size_t decodes = 0, parsed = 0;
    for (int task : p.taxonomy.task_ids()) {
        std::vector<std::vector<float>> clips(kDecodesPerTask, std::vector<float>(16));
        for (auto& clip : clips) {
            for (auto& x : clip) {
                x = n(rng);
            }
        }
        for (auto& d : p.predictor->greedy_decode_batch(clips, task, {true, false})) {
            ++decodes;
            if (d.annotation) {
                d.annotation->span = {0.0, 1.0};
                parsed += d.annotation->task_id == task && p.taxonomy.validate(*d.annotation).ok();
            }
        }
    }
    SyntheticWorld world(SynthSpec{}, p.taxonomy);
    std::size_t trips = 0, round_trips = 0;
    for (int trial = 0; trial < 4000; ++trial) {
        auto ids = p.taxonomy.task_ids();
        int task = ids[rng() % ids.size()];
        auto a = world.sample_annotation(task, rng);
        a.span = {0.0, 1.0};
        auto back = decode_tags(p.vocab, p.taxonomy.schema_for_task(task), encode_tags(p.vocab, p.taxonomy, a).ids);
        ++trips;
        round_trips += back.ok() && back.annotation->tag_values == a.tag_values;
    }
    return {parsed == decodes && round_trips == trips,
            std::to_string(parsed) + "/" + std::to_string(decodes) + " constrained decodes parse, " +
                std::to_string(round_trips) + "/" + std::to_string(trips) + " round-trips"};
}

Outcome metric_oracles() {
    std::mt19937_64 rng(17);
    int f1_mismatch = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        auto preds = oracle::random_segments(rng, 8);
        auto truth = oracle::random_segments(rng, 8);
        auto got = temporal_f1(preds, truth, 0.1);
        auto want = oracle::temporal_f1(preds, truth, 0.1);
        bool same = got.macro_f1 == want.macro_f1 && got.per_category.size() == want.per_category.size();
        for (const auto& [cat, k] : want.per_category) {
            const auto& g = got.per_category.at(cat);
            same = same && g.tp == k.tp && g.fp == k.fp && g.fn == k.fn;
        }
        f1_mismatch += !same;
    }
    int auc_mismatch = 0;
    std::uniform_int_distribution<int> level(0, 6);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> scores;
        std::vector<int> labels;
        int size = 2 + static_cast<int>(rng() % 40);
        for (int i = 0; i < size; ++i) {
            scores.push_back(level(rng) / 6.0);
            labels.push_back(i < 1 ? 1 : i < 2 ? 0 : static_cast<int>(rng() % 2));
        }
        auc_mismatch += binary_auroc(scores, labels) != oracle::auroc(scores, labels);
    }
    std::uniform_int_distribution<int> pick(0, 7);
    std::vector<std::string> guess, truth;
    for (int i = 0; i < 100000; ++i) {
        guess.push_back(std::to_string(pick(rng)));
        truth.push_back(std::to_string(pick(rng)));
    }
    double chance = exact_match_accuracy(guess, truth);
    bool pass = f1_mismatch == 0 && auc_mismatch == 0 && std::abs(chance - 0.125) <= kRandomBaselineTolerance &&
                random_chance_baseline(8) == 0.125;
    return {pass, "temporal F1 mismatches " + std::to_string(f1_mismatch) + "/1000, AUROC mismatches " +
                      std::to_string(auc_mismatch) + "/1000, random 8-way accuracy " + fmt(chance)};
}

Outcome cv_hygiene() {
    auto tax = Taxonomy::builtin();
    std::mt19937_64 rng(21);
    int leaks = 0, nondeterministic = 0;
    std::size_t folds_checked = 0;
    for (int corpus = 0; corpus < kFoldCorpora; ++corpus) {
        SynthSpec spec;
        spec.n_videos = 3 + static_cast<int>(rng() % 10);
        spec.clips_per_video = 1 + static_cast<int>(rng() % 15);
        spec.feature_dim = 8;
        spec.seed = rng();
        spec.tasks = {static_cast<int>(1 + rng() % 4)};
        SyntheticWorld world(spec, tax);
        auto records = generate_synthetic(world, "f.hsaf").records;
        std::shuffle(records.begin(), records.end(), rng);
        int n_folds = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(spec.n_videos - 1));
        std::uint64_t seed = rng();
        auto folds = make_folds(records, n_folds, seed);
        for (const auto& f : folds) {
            ++folds_checked;
            leaks += !check_no_leakage(f, records).ok();
        }
        nondeterministic += !(make_folds(records, n_folds, seed) == folds);
    }
    return {leaks == 0 && nondeterministic == 0,
            std::to_string(kFoldCorpora) + " corpora, " + std::to_string(folds_checked) + " folds, " +
                std::to_string(leaks) + " leaking, " + std::to_string(nondeterministic) + " nondeterministic"};
}

ComponentAnnotation ai_segment(double s, double e, const std::string& action, double conf) {
    ComponentAnnotation a;
    a.task_id = 2;
    a.span = {s, e};
    a.tag_values = {{"action", action}, {"arm", "left"}, {"instrument", "grasper"}};
    a.confidence = {{"action", conf}};
    a.source = Source::ai;
    return a;
}

Outcome selflabel_properties() {
    std::mt19937_64 rng(12);
    static const char* actions[] = {"retraction", "tug", "hook"};
    int failures = 0;
    auto fail_if = [&](bool bad) { failures += bad; };
    std::uniform_real_distribution<double> conf(0.5, 1.0);
    for (int trial = 0; trial < 500; ++trial) {
        bool contiguous = trial % 2 == 0;
        std::vector<ComponentAnnotation> track;
        double t = 0.0;
        for (int i = 0; i < 40; ++i) {
            if (!contiguous) {
                t += 0.5 * static_cast<double>(rng() % 4);
            }
            track.push_back(ai_segment(t, t + 1.0, actions[rng() % 3], conf(rng)));
            t += 1.0;
        }
        auto once = merge_annotations(track);
        auto twice = merge_annotations(once);
        fail_if(once.size() != twice.size());
        for (std::size_t i = 0; i < std::min(once.size(), twice.size()); ++i) {
            fail_if(once[i].span != twice[i].span || once[i].tag_values != twice[i].tag_values);
        }
        if (contiguous) {
            auto zero = merge_annotations(track, 0.0);
            double a = 0.0, b = 0.0;
            for (const auto& x : zero) a += x.span.duration();
            for (const auto& x : track) b += x.span.duration();
            fail_if(std::abs(a - b) > 1e-9);
        }
        ThresholdTable table;
        for (const char* c : actions) {
            table.thresholds[c] = conf(rng);
        }
        auto kept = filter_low_confidence(track, table).size();
        ThresholdTable raised = table;
        auto& target = raised.thresholds[actions[rng() % 3]];
        target = std::min(1.0, target + 0.2 * conf(rng));
        fail_if(filter_low_confidence(track, raised).size() > kept);
    }
    auto grab = [](double s, double e) { return ai_segment(s, e, "grab", 1.0); };
    auto cut = ai_segment(2, 3, "cut", 1.0);
    auto m1 = merge_annotations(std::vector<ComponentAnnotation>{grab(0, 1), grab(1, 2), cut});
    fail_if(m1.size() != 2 || m1[0].span != Span{0, 2} || m1[1].span != Span{2, 3});
    auto m2 = merge_annotations(std::vector<ComponentAnnotation>{grab(0, 1), grab(1.8, 2.8)});
    fail_if(m2.size() != 1 || m2[0].span != Span{0, 2.8});
    fail_if(merge_annotations(std::vector<ComponentAnnotation>{grab(0, 1), grab(2.5, 3)}).size() != 2);
    fail_if(!readiness_gate({{2, 0.80}}, {2}));
    fail_if(readiness_gate({{2, std::nextafter(0.80, 0.0)}}, {2}));
    fail_if(!readiness_gate({{1, 0.9}, {2, 0.8}, {3, 0.75}, {4, 0.75}}, {1, 2, 3, 4}));
    return {failures == 0, "500 random tracks plus gap and readiness examples, " + std::to_string(failures) + " violations"};
}

// A labeller whose stated confidence c ~ U(0.5, 1) is its probability of being
// right; a wrong label swaps one tag for another category.
ComponentAnnotation annotate(const TaskSchema& schema, const ComponentAnnotation& truth, double c, std::mt19937_64& rng) {
    ComponentAnnotation a = truth;
    a.source = Source::ai;
    a.confidence = {{"action", c}};
    if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) >= c) {
        const auto& tag = schema.tags[rng() % schema.tags.size()];
        auto& value = a.tag_values[tag.key];
        std::string wrong = value;
        while (wrong == value) {
            wrong = tag.categories[rng() % tag.categories.size()];
        }
        value = wrong;
    }
    return a;
}

Outcome selflabel_direction() {
    auto tax = Taxonomy::builtin();
    auto vocab = build_vocab(tax);
    const auto& schema = tax.schema_for_task(2);
    const auto& action_tag = *schema.find_tag("action");
    std::vector<double> manual_acc, combined_acc;
    std::size_t added = 0;
    for (int seed = 0; seed < kSelfLabelSeeds; ++seed) {
        SynthSpec spec;
        spec.feature_dim = 32;
        spec.separation = 3.0;
        spec.noise_sd = 1.0;
        spec.seed = 100 + static_cast<std::uint64_t>(seed);
        spec.tasks = {2};
        SyntheticWorld world(spec, tax);
        auto mc = model_config(vocab, tax, 32, 32, 2);
        std::mt19937_64 rng(spec.seed);
        auto draw = [&](std::size_t n, std::uint64_t offset) {
            std::vector<Example> out;
            for (std::size_t i = 0; i < n; ++i) {
                auto a = world.sample_annotation(2, rng);
                a.span = {0.0, 1.0};
                out.push_back(make_example(mc, vocab, tax, world.feature(a, offset + i), a));
            }
            return out;
        };
        Dataset manual{draw(400, 0), 0};
        Dataset validation{draw(200, 1'000'000), 0};
        Dataset test{draw(1000, 2'000'000), 0};
        auto pool = draw(1200, 3'000'000);

        std::uniform_real_distribution<double> confidence(0.5, 1.0);
        std::vector<std::optional<ComponentAnnotation>> calib_pred;
        std::vector<ComponentAnnotation> calib_truth;
        for (const auto& e : validation.examples) {
            calib_pred.push_back(annotate(schema, e.annotation, confidence(rng), rng));
            calib_truth.push_back(e.annotation);
        }
        auto table = calibrate_thresholds(calibration_samples(calib_pred, calib_truth, "action"),
                                          action_tag.categories);
        std::vector<ComponentAnnotation> proposed;
        for (const auto& e : pool) {
            proposed.push_back(annotate(schema, e.annotation, confidence(rng), rng));
        }
        auto kept = filter_low_confidence(proposed, table, "action");
        Dataset combined = manual;
        std::size_t k = 0;
        for (std::size_t i = 0; i < pool.size() && k < kept.size(); ++i) {
            if (proposed[i].confidence == kept[k].confidence && proposed[i].tag_values == kept[k].tag_values) {
                combined.examples.push_back(make_example(mc, vocab, tax, pool[i].sequence.clip, kept[k]));
                ++k;
            }
        }
        added += k;

        TrainConfig tc;
        tc.epochs = 40;
        tc.batch_size = 32;
        tc.lr_base = 2e-3;
        tc.seed = 5;
        Model a(mc, 9), b(mc, 9);
        auto ra = train(a, vocab, tax, manual, validation, tc);
        auto rb = train(b, vocab, tax, combined, validation, tc);
        manual_acc.push_back(task_accuracy(ra.best, vocab, tax, test, 2));
        combined_acc.push_back(task_accuracy(rb.best, vocab, tax, test, 2));
    }
    double mean_gain = 0.0;
    std::string pairs;
    for (std::size_t i = 0; i < manual_acc.size(); ++i) {
        mean_gain += (combined_acc[i] - manual_acc[i]) / static_cast<double>(manual_acc.size());
        pairs += (i ? ", " : "") + fmt(manual_acc[i], 3) + "->" + fmt(combined_acc[i], 3);
    }
    return {mean_gain >= 0.0, "manual-only -> manual+AI accuracy per seed: " + pairs + "; mean gain " +
                                  fmt(mean_gain, 3) + "; " + std::to_string(added) + " AI clips added"};
}

Outcome checkpoint_streams() {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> level(0, 10);
    int mismatches = 0;
    for (int stream = 0; stream < 1000; ++stream) {
        int tasks = 1 + static_cast<int>(rng() % 4);
        std::vector<int> ids(static_cast<std::size_t>(tasks));
        std::iota(ids.begin(), ids.end(), 1);
        CheckpointLedger ledger;
        std::vector<std::map<int, double>> history;
        std::vector<bool> got;
        int length = 1 + static_cast<int>(rng() % 30);
        for (int e = 0; e < length; ++e) {
            std::map<int, double> m;
            for (int t : ids) {
                m[t] = level(rng) / 10.0; // coarse grid forces ties
            }
            history.push_back(m);
            got.push_back(checkpoint_rule(m, ids, ledger));
        }
        mismatches += got != implied_saves(history);
    }
    int log_mismatch = 0;
    if (!g_overfit_log.empty()) {
        std::vector<std::map<int, double>> history;
        std::vector<bool> saved;
        for (const auto& r : g_overfit_log) {
            history.push_back(r.metrics);
            saved.push_back(r.saved);
        }
        log_mismatch = saved != implied_saves(history);
    }
    return {mismatches == 0 && log_mismatch == 0,
            "1000 scripted streams, " + std::to_string(mismatches) + " mismatches; training log " +
                (g_overfit_log.empty() ? std::string("not available") : log_mismatch ? "inconsistent" : "consistent")};
}

std::size_t closed_form_tiling(const std::vector<Span>& spans, double w) {
    std::size_t n = 0;
    for (const auto& s : spans) {
        double whole = std::floor(s.duration() / w + 1e-12);
        n += static_cast<std::size_t>(whole) + (s.duration() - whole * w >= 2.0 - 1e-12 ? 1 : 0);
    }
    return n;
}

Outcome workflow_gate() {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> duration(5.0, 900.0);
    std::uniform_real_distribution<double> width(2.0, 5.0);
    int intersecting = 0, count_mismatch = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        double d = duration(rng);
        double w = trial % 4 == 0 ? static_cast<double>(2 + rng() % 4) : width(rng);
        std::vector<TimelineSegment> coarse;
        for (const auto& s : coarse_windows(d)) {
            TimelineSegment c;
            c.span = s;
            c.task_id = kCoarseTask;
            c.tags = {{"step", rng() % 2 ? "suturing" : "dissection"}};
            coarse.push_back(c);
        }
        auto selected = select_segments(coarse, std::string("suturing"));
        auto windows = fine_windows(selected, w);
        count_mismatch += windows.size() != closed_form_tiling(selected, w);
        for (const auto& f : windows) {
            for (const auto& c : coarse) {
                bool overlaps = f.start_s < c.span.end_s && c.span.start_s < f.end_s;
                if (overlaps && c.tags.at("step") != "suturing") {
                    ++intersecting;
                }
            }
        }
    }
    auto tax = Taxonomy::builtin();
    auto vocab = build_vocab(tax);
    Model model(model_config(vocab, tax, 64, 64, 2), 3);
    Predictor predictor(model, vocab, tax);
    std::mt19937_64 frng(8);
    std::normal_distribution<float> n(0.0f, 1.0f);
    FeatureMatrix video(600, 64);
    for (auto& v : video.values) {
        v = n(frng);
    }
    MappingRequest request;
    request.video_id = "ten-minutes";
    request.task_id = 2;
    request.fine_window_s = 2.0;
    auto t0 = Clock::now();
    auto timeline = run_workflow(predictor, video, 600.0, request);
    double secs = seconds_since(t0);
    std::size_t fine = 0;
    for (const auto& s : timeline.segments) {
        fine += s.stage == Stage::fine;
    }
    bool mapped = check_containment(timeline).ok() && fine == closed_form_tiling(timeline.selected, 2.0);
    return {intersecting == 0 && count_mismatch == 0 && mapped && secs < kMappingSeconds,
            "1000 labelings: " + std::to_string(intersecting) + " intersecting windows, " +
                std::to_string(count_mismatch) + " count mismatches; 600 s video mapped to " +
                std::to_string(timeline.segments.size()) + " segments in " + fmt(secs, 3) + " s"};
}

Outcome service_lifecycle() {
    const char* bin = std::getenv("SURGIMAP_BIN");
    if (bin == nullptr) {
        return {false, "SURGIMAP_BIN is not set"};
    }
    using namespace std::chrono_literals;
    testing::TempDir dir;
    testing::Pipeline p;
    auto checkpoint = dir.path() / "model" / "model.ckpt";
    std::filesystem::create_directories(checkpoint.parent_path());
    save_checkpoint(p.model, checkpoint);
    p.vocab.save(checkpoint.parent_path() / "vocab.txt");
    auto store = dir.path() / "store";
    auto log = dir.path() / "server.log";
    const int port = testing::free_port();
    httplib::Client cli("127.0.0.1", port);
    cli.set_read_timeout(30, 0);
    auto up = [&] {
        auto r = cli.Get("/videos");
        return r && r->status == 200;
    };
    std::vector<std::string> problems;
    auto expect = [&](bool ok, const std::string& what) {
        if (!ok) {
            problems.push_back(what);
        }
        return ok;
    };
    int status = 0;

    pid_t pid = testing::spawn_server(bin, checkpoint, store, port, 1500, log);
    if (!expect(testing::poll(up, 20s), "server did not start")) {
        ::kill(pid, SIGKILL);
        ::waitpid(pid, &status, 0);
        return {false, problems.front()};
    }
    auto video = json::parse(cli.Post("/videos", testing::feature_bytes(180, 16, 5), "application/octet-stream")->body);
    const std::string vid = video["video_id"];
    auto request = json{{"video_id", vid}, {"task_id", 2}}.dump();

    // Observe a full lifecycle with the worker delay.
    auto created = json::parse(cli.Post("/jobs", request, "application/json")->body);
    std::vector<std::string> seen = {created["status"]};
    testing::poll(
        [&] {
            auto s = testing::job_status(cli, created["job_id"]);
            if (!s.empty() && s != seen.back()) {
                seen.push_back(s);
            }
            return s == "done" || s == "failed";
        },
        60s);
    expect(seen == std::vector<std::string>{"queued", "running", "done"}, "lifecycle not observed");
    auto bytes = cli.Get("/videos/" + vid + "/timeline?task=2")->body;
    auto locator = json::parse(cli.Get("/jobs/" + created["job_id"].get<std::string>())->body)["result"];
    expect(locator.is_string() && read_file(store / locator.get<std::string>()) == bytes, "result bytes differ");

    // Kill while a second job is running.
    const std::string doomed = json::parse(cli.Post("/jobs", request, "application/json")->body)["job_id"];
    expect(testing::poll([&] { return testing::job_status(cli, doomed) == "running"; }, 20s), "job never ran");
    ::kill(pid, SIGKILL);
    ::waitpid(pid, &status, 0);

    pid = testing::spawn_server(bin, checkpoint, store, port, 0, log);
    expect(testing::poll(up, 20s), "server did not restart");
    std::size_t running = 0;
    for (const auto& entry : std::filesystem::directory_iterator(store / "jobs")) {
        running += json::parse(read_file(entry.path()))["status"] == "running";
    }
    expect(running == 0, "job left running after restart");
    expect(testing::job_status(cli, doomed) == "failed", "interrupted job not failed");

    const std::string again = json::parse(cli.Post("/jobs", request, "application/json")->body)["job_id"];
    expect(testing::poll([&] { return testing::job_status(cli, again) == "done"; }, 60s), "rerun did not finish");
    auto rerun = cli.Get("/videos/" + vid + "/timeline?task=2")->body;
    expect(rerun == bytes, "rerun timeline bytes changed");
    expect(check_containment(timeline_from_json(json::parse(rerun))).ok(), "containment fails on read-back");
    expect(read_file(store / locator.get<std::string>()) == bytes, "committed result was modified");
    ::kill(pid, SIGTERM);
    ::waitpid(pid, &status, 0);
    expect(WIFEXITED(status) && WEXITSTATUS(status) == 0, "server did not stop cleanly");

    std::string detail = "lifecycle";
    for (const auto& s : seen) {
        detail += " " + s;
    }
    detail += "; after kill -9 " + std::to_string(running) + " running jobs; timeline " +
              std::to_string(bytes.size()) + " bytes stable across restart";
    for (const auto& p2 : problems) {
        detail += "; " + p2;
    }
    return {problems.empty(), detail};
}

struct Criterion {
    const char* name;
    std::function<Outcome()> run;
};

} // namespace

int main(int argc, char** argv) {
    std::vector<Criterion> criteria = {
        {"gradient correctness", gradient_check},
        {"loss oracle", loss_oracle},
        {"causality and masking", causality},
        {"overfit", overfit},
        {"generalization vs nearest-mean oracle", generalization},
        {"controllability", controllability},
        {"metric oracles", metric_oracles},
        {"cross-validation hygiene", cv_hygiene},
        {"self-label properties", selflabel_properties},
        {"self-labelling helps", selflabel_direction},
        {"checkpoint rule", checkpoint_streams},
        {"workflow gate", workflow_gate},
        {"service lifecycle", service_lifecycle},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        only.insert(std::atoi(argv[i]));
    }
    // Also copied to $SURGIMAP_ACCEPTANCE_REPORT, since ctest hides output of passing tests.
    std::ofstream report;
    if (const char* path = std::getenv("SURGIMAP_ACCEPTANCE_REPORT")) {
        report.open(path);
    }
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        int number = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(number)) {
            continue;
        }
        auto t0 = Clock::now();
        Outcome o;
        try {
            o = criteria[i].run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::ostringstream line;
        line << (o.pass ? "PASS" : "FAIL") << " [" << number << "] " << criteria[i].name << ": " << o.detail << " ("
             << fmt(seconds_since(t0), 3) << " s)";
        std::cout << line.str() << std::endl;
        if (report.is_open()) {
            report << line.str() << std::endl;
        }
    }
    return failed == 0 ? 0 : 1;
}
