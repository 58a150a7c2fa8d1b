#include "surgimap/cli.hpp"

#include "surgimap/config.hpp"
#include "surgimap/corpus.hpp"
#include "surgimap/encoder.hpp"
#include "surgimap/errors.hpp"
#include "surgimap/fsutil.hpp"
#include "surgimap/inference.hpp"
#include "surgimap/metrics.hpp"
#include "surgimap/selflabel.hpp"
#include "surgimap/service.hpp"
#include "surgimap/trainer.hpp"
#include "surgimap/workflow.hpp"

#include <spdlog/spdlog.h>

#include <csignal>
#include <fstream>
#include <random>
#include <set>
#include <thread>

#include "CLI11.hpp"

namespace surgimap {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

const std::vector<std::string> kKnownKeys = {
    "seed",
    "synth.videos", "synth.clips_per_video", "synth.feature_dim", "synth.separation", "synth.noise_sd",
    "synth.tasks", "synth.min_clip_s", "synth.max_clip_s", "synth.video_seconds",
    "model.layers", "model.heads", "model.dim", "model.instruction_slots",
    "train.manifest", "train.folds", "train.epochs", "train.batch_size", "train.lr", "train.warmup_epochs",
    "train.warmup_start_factor", "train.weight_decay", "train.oversample_tasks", "train.min_clip_s",
    "train.eval_constrained",
    "eval.constrained", "eval.resamples", "eval.level", "eval.iou_threshold",
    "selflabel.gap_s", "selflabel.target_precision",
    "checkpoint", "store", "host", "port", "workers", "worker_delay_ms",
};

// Options shared by every subcommand.
struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> fold;
    std::optional<int> task;
    std::string out;
    std::string checkpoint;
    std::optional<int> port;
    std::string manifest;
};

void add_common(CLI::App* cmd, Common& c, bool fold, bool task, bool checkpoint, bool manifest) {
    cmd->add_option("--config", c.config, "Settings file (.json or key=value)");
    cmd->add_option("--seed", c.seed, "Master seed");
    cmd->add_option("--out", c.out, "Output path");
    if (fold) {
        cmd->add_option("--fold", c.fold, "Fold index");
    }
    if (task) {
        cmd->add_option("--task", c.task, "Task id");
    }
    if (checkpoint) {
        cmd->add_option("--checkpoint", c.checkpoint, "Model checkpoint");
    }
    if (manifest) {
        cmd->add_option("--manifest", c.manifest, "Clip manifest (JSON lines)");
    }
}

Settings settings_for(const Common& c) {
    Settings s = c.config.empty() ? Settings() : Settings::load(c.config);
    auto unknown = s.unknown_keys(kKnownKeys);
    if (!unknown.empty()) {
        throw CLI::ValidationError("--config", "unknown setting '" + unknown.front() + "'");
    }
    if (c.seed) {
        s.set("seed", std::to_string(*c.seed));
    }
    if (!c.checkpoint.empty()) {
        s.set("checkpoint", c.checkpoint);
    }
    if (c.port) {
        s.set("port", std::to_string(*c.port));
    }
    if (!c.manifest.empty()) {
        s.set("train.manifest", c.manifest);
    }
    return s;
}

std::uint64_t seed_for(const Settings& s, std::string_view stream) {
    auto seed = static_cast<std::uint64_t>(s.get_int("seed", 0));
    return mix_seed(seed, hash_string(stream));
}

fs::path require_path(const Settings& s, const std::string& key, const char* flag) {
    auto v = s.get(key);
    if (!v || v->empty()) {
        throw CLI::ValidationError(flag, "is required");
    }
    return *v;
}

fs::path vocab_beside(const fs::path& checkpoint) {
    return checkpoint.parent_path() / "vocab.txt";
}

void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) {
        fs::create_directories(p.parent_path());
    }
}

void write_json(const fs::path& path, const ordered_json& j) {
    ensure_parent(path);
    write_file_atomic(path, j.dump(2) + "\n");
}

struct Loaded {
    Taxonomy taxonomy = Taxonomy::builtin();
    Vocabulary vocab;
    Model model;
};

std::unique_ptr<Loaded> load_model(const fs::path& checkpoint) {
    auto l = std::make_unique<Loaded>();
    l->model = load_checkpoint(checkpoint);
    l->vocab = Vocabulary::load(vocab_beside(checkpoint));
    return l;
}

struct FoldData {
    std::vector<ClipRecord> records;
    FoldSplit split;
    std::unique_ptr<HsafProvider> provider;
};

FoldData load_fold(const Settings& s, int fold, const Taxonomy& tax) {
    FoldData d;
    auto manifest = require_path(s, "train.manifest", "--manifest");
    d.records = load_manifest(manifest, tax);
    if (d.records.empty()) {
        throw ValidationError("manifest " + manifest.string() + " has no records");
    }
    auto folds = make_folds(d.records, static_cast<int>(s.get_int("train.folds", 5)), seed_for(s, "folds"));
    if (fold < 0 || fold >= static_cast<int>(folds.size())) {
        throw ValidationError("fold " + std::to_string(fold) + " out of range [0, " +
                              std::to_string(folds.size()) + ")");
    }
    d.split = folds[static_cast<std::size_t>(fold)];
    d.provider = std::make_unique<HsafProvider>(fs::absolute(manifest).parent_path());
    return d;
}

// ---------------------------------------------------------------- synth

int cmd_synth(const Common& c, std::ostream& out) {
    auto s = settings_for(c);
    if (c.out.empty()) {
        throw CLI::ValidationError("--out", "is required");
    }
    auto tax = Taxonomy::builtin();
    SynthSpec spec;
    spec.n_videos = static_cast<int>(s.get_int("synth.videos", spec.n_videos));
    spec.clips_per_video = static_cast<int>(s.get_int("synth.clips_per_video", spec.clips_per_video));
    spec.feature_dim = static_cast<int>(s.get_int("synth.feature_dim", spec.feature_dim));
    spec.separation = s.get_double("synth.separation", spec.separation);
    spec.noise_sd = s.get_double("synth.noise_sd", spec.noise_sd);
    spec.tasks = s.get_int_list("synth.tasks", spec.tasks);
    spec.min_clip_s = s.get_double("synth.min_clip_s", spec.min_clip_s);
    spec.max_clip_s = s.get_double("synth.max_clip_s", spec.max_clip_s);
    spec.seed = seed_for(s, "synth");
    SyntheticWorld world(spec, tax);

    fs::path dir = c.out;
    fs::create_directories(dir);
    auto corpus = generate_synthetic(world, "features.hsaf", 0);
    write_hsaf(dir / "features.hsaf", corpus.features);
    save_manifest(corpus.records, dir / "manifest.jsonl");
    out << "wrote " << corpus.records.size() << " clips from " << spec.n_videos << " videos to "
        << (dir / "manifest.jsonl").string() << "\n";

    // A per-second feature track for the mapping workflow: alternating
    // suturing and dissection steps with micro-activity content.
    auto seconds = s.get_int("synth.video_seconds", 600);
    if (seconds > 0) {
        std::mt19937_64 rng(mix_seed(spec.seed, hash_string("video")));
        FeatureMatrix track(0, static_cast<std::uint32_t>(spec.feature_dim));
        auto coarse = world.sample_annotation(1, rng);
        auto micro = world.sample_annotation(2, rng);
        const auto& steps = tax.schema_for_task(1).find_tag("step")->categories;
        std::uniform_int_distribution<int> step_len(30, 120);
        std::uniform_int_distribution<int> micro_len(2, 8);
        int step_left = 0;
        int micro_left = 0;
        std::size_t step_index = 0;
        for (long t = 0; t < seconds; ++t) {
            if (step_left-- <= 0) {
                step_left = step_len(rng) - 1;
                step_index = (step_index + 1) % steps.size();
                coarse.tag_values["step"] = steps[step_index];
            }
            if (micro_left-- <= 0) {
                micro_left = micro_len(rng) - 1;
                micro = world.sample_annotation(2, rng);
            }
            auto row = world.feature(coarse, 10'000'000ULL + static_cast<std::uint64_t>(t));
            auto extra = world.clean_feature(micro);
            for (std::size_t i = 0; i < row.size(); ++i) {
                row[i] += static_cast<float>(extra[i]);
            }
            track.append(row);
        }
        write_hsaf(dir / "video.hsaf", track);
        out << "wrote a " << seconds << " s per-second feature track to " << (dir / "video.hsaf").string() << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------- train

ModelConfig model_config_for(const Settings& s, const Vocabulary& vocab, const Taxonomy& tax, int feature_dim) {
    ModelConfig m;
    m.layers = static_cast<int>(s.get_int("model.layers", m.layers));
    m.heads = static_cast<int>(s.get_int("model.heads", m.heads));
    m.dim = static_cast<int>(s.get_int("model.dim", m.dim));
    m.instruction_slots = static_cast<int>(s.get_int("model.instruction_slots", m.instruction_slots));
    m.feature_dim = feature_dim;
    m.vocab_size = static_cast<int>(vocab.size());
    m.output_size = static_cast<int>(vocab.annotation_size());
    m.max_components = max_generated_length(tax);
    m.task_count = static_cast<int>(tax.task_ids().size());
    m.validate();
    return m;
}

TrainConfig train_config_for(const Settings& s) {
    TrainConfig t;
    t.epochs = static_cast<int>(s.get_int("train.epochs", t.epochs));
    t.batch_size = static_cast<int>(s.get_int("train.batch_size", t.batch_size));
    t.lr_base = s.get_double("train.lr", t.lr_base);
    t.warmup_epochs = s.get_double("train.warmup_epochs", t.warmup_epochs);
    t.warmup_start_factor = s.get_double("train.warmup_start_factor", t.warmup_start_factor);
    t.weight_decay = s.get_double("train.weight_decay", t.weight_decay);
    t.oversample_tasks = s.get_bool("train.oversample_tasks", t.oversample_tasks);
    t.min_clip_s = s.get_double("train.min_clip_s", t.min_clip_s);
    t.eval_constrained = s.get_bool("train.eval_constrained", t.eval_constrained);
    t.seed = seed_for(s, "train");
    t.validate();
    return t;
}

int cmd_train(const Common& c, std::ostream& out) {
    auto s = settings_for(c);
    if (c.out.empty()) {
        throw CLI::ValidationError("--out", "is required");
    }
    auto tax = Taxonomy::builtin();
    auto vocab = build_vocab(tax);
    auto data = load_fold(s, c.fold.value_or(0), tax);
    int feature_dim = static_cast<int>(data.provider->provide(data.records.front()).size());
    auto mc = model_config_for(s, vocab, tax, feature_dim);
    auto tc = train_config_for(s);

    auto train_set = build_dataset(data.records, data.split.train_clips, *data.provider, vocab, tax, mc, tc.min_clip_s);
    auto validation = build_dataset(data.records, data.split.validation_clips, *data.provider, vocab, tax, mc, tc.min_clip_s);
    if (train_set.size() == 0 || validation.size() == 0) {
        throw ValidationError("fold has an empty training or validation split");
    }
    fs::path dir = c.out;
    fs::create_directories(dir);
    fs::path checkpoint = s.get_string("checkpoint", (dir / "model.ckpt").string());
    ensure_parent(checkpoint);
    vocab.save(vocab_beside(checkpoint));

    Model model(mc, seed_for(s, "init"));
    std::ofstream log(dir / "train_log.jsonl");
    out << "training on " << train_set.size() << " clips, validating on " << validation.size() << " ("
        << model.params().parameter_count() << " parameters)\n";
    auto result = train(model, vocab, tax, train_set, validation, tc, checkpoint, &log);

    ordered_json split;
    split["fold"] = data.split.fold_index;
    split["train_videos"] = data.split.train_videos;
    split["validation_videos"] = data.split.validation_videos;
    split["test_videos"] = data.split.test_videos;
    write_json(dir / "split.json", split);
    out << "best worst-task validation metric " << result.ledger.best_worst_metric.value_or(0.0) << " after "
        << result.ledger.saves << " saves; checkpoint " << checkpoint.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- eval

std::vector<std::optional<ComponentAnnotation>> decode_all(const Predictor& p, const std::vector<Example>& examples,
                                                           int task, bool constrained) {
    std::vector<std::vector<float>> clips;
    for (const auto& e : examples) {
        clips.push_back(e.sequence.clip);
    }
    auto decoded = p.greedy_decode_batch(clips, task, {constrained, false});
    std::vector<std::optional<ComponentAnnotation>> out;
    for (std::size_t i = 0; i < decoded.size(); ++i) {
        auto a = decoded[i].annotation;
        if (a) {
            a->span = examples[i].annotation.span;
            a->confidence = decoded[i].confidence;
        }
        out.push_back(std::move(a));
    }
    return out;
}

std::map<int, std::vector<Example>> by_task(const Dataset& d) {
    std::map<int, std::vector<Example>> out;
    for (const auto& e : d.examples) {
        out[e.annotation.task_id].push_back(e);
    }
    return out;
}

int cmd_eval(const Common& c, std::ostream& out) {
    auto s = settings_for(c);
    auto checkpoint = require_path(s, "checkpoint", "--checkpoint");
    auto loaded = load_model(checkpoint);
    const auto& tax = loaded->taxonomy;
    auto data = load_fold(s, c.fold.value_or(0), tax);
    const auto& mc = loaded->model.config();
    auto test = build_dataset(data.records, data.split.test_clips, *data.provider, loaded->vocab, tax, mc,
                              s.get_double("train.min_clip_s", 0.0));
    Predictor predictor(loaded->model, loaded->vocab, tax);
    const bool constrained = s.get_bool("eval.constrained", false);
    const int resamples = static_cast<int>(s.get_int("eval.resamples", 1000));
    const double level = s.get_double("eval.level", 0.95);
    const double iou = s.get_double("eval.iou_threshold", 0.10);
    const auto seed = seed_for(s, "bootstrap");

    std::vector<ReportEntry> entries;
    ordered_json chance = ordered_json::object();
    for (auto& [task, examples] : by_task(test)) {
        if (c.task && *c.task != task) {
            continue;
        }
        const auto& schema = tax.schema_for_task(task);
        auto predicted = decode_all(predictor, examples, task, constrained);
        std::vector<ComponentAnnotation> truth;
        for (const auto& e : examples) {
            truth.push_back(e.annotation);
        }
        auto ci_of = [&](auto metric) {
            if (truth.size() < 2) {
                return Interval{};
            }
            return bootstrap_ci(metric, truth.size(), resamples, level, mix_seed(seed, static_cast<std::uint64_t>(task)));
        };
        auto subset = [&](std::span<const std::size_t> idx) {
            std::vector<std::optional<ComponentAnnotation>> p;
            std::vector<ComponentAnnotation> t;
            for (auto i : idx) {
                p.push_back(predicted[i]);
                t.push_back(truth[i]);
            }
            return std::make_pair(p, t);
        };
        for (const auto& tag : schema.tags) {
            double value = exact_match_accuracy(predicted, truth, tag.key);
            auto ci = ci_of([&](std::span<const std::size_t> idx) {
                auto [p, t] = subset(idx);
                return exact_match_accuracy(p, t, tag.key);
            });
            entries.push_back({task, tag.key, "exact_match", value, ci.low, ci.high, truth.size()});
            chance[std::to_string(task) + "/" + tag.key] = {
                {"random", random_chance_baseline(static_cast<int>(tag.categories.size()))},
                {"relative_improvement", relative_improvement(value, static_cast<int>(tag.categories.size()))}};
        }
        double all = all_tags_accuracy(predicted, truth);
        auto ci = ci_of([&](std::span<const std::size_t> idx) {
            auto [p, t] = subset(idx);
            return all_tags_accuracy(p, t);
        });
        entries.push_back({task, "*", "exact_match", all, ci.low, ci.high, truth.size()});

        if (schema.auroc_tag) {
            const auto* tag = schema.find_tag(*schema.auroc_tag);
            const auto& positive = tag->categories.back();
            std::vector<std::vector<float>> clips;
            std::vector<int> labels;
            for (const auto& e : examples) {
                clips.push_back(e.sequence.clip);
                labels.push_back(e.annotation.tag_values.at(tag->key) == positive ? 1 : 0);
            }
            auto scores = predictor.score_binary_tag_batch(clips, task, tag->key, positive);
            try {
                double auc = binary_auroc(scores, labels);
                auto aci = bootstrap_ci(
                    [&](std::span<const std::size_t> idx) {
                        std::vector<double> sc;
                        std::vector<int> lb;
                        for (auto i : idx) {
                            sc.push_back(scores[i]);
                            lb.push_back(labels[i]);
                        }
                        return binary_auroc(sc, lb);
                    },
                    labels.size(), resamples, level, mix_seed(seed, 100 + static_cast<std::uint64_t>(task)));
                entries.push_back({task, tag->key, "auroc", auc, aci.low, aci.high, labels.size()});
            } catch (const UndefinedMetricError& e) {
                spdlog::warn("task {}: AUROC undefined ({})", task, e.what());
            }
        }

        // Temporal F1 of the first tag, per video, averaged.
        const auto& key = schema.tags.front().key;
        std::map<std::string, std::pair<std::vector<TimedPrediction>, std::vector<TimedPrediction>>> videos;
        std::size_t k = 0;
        for (auto idx : data.split.test_clips) {
            const auto& r = data.records[idx];
            if (r.task_id() != task) {
                continue;
            }
            if (k >= examples.size() || !(r.span() == examples[k].annotation.span)) {
                continue;
            }
            auto& v = videos[r.video_id];
            v.second.push_back({r.annotation.tag_values.at(key), r.span(), 1.0});
            if (predicted[k]) {
                v.first.push_back({predicted[k]->tag_values.at(key), r.span(), 1.0});
            }
            ++k;
        }
        if (!videos.empty()) {
            double sum = 0.0;
            for (const auto& [video, pt] : videos) {
                sum += temporal_f1(pt.first, pt.second, iou).macro_f1;
            }
            entries.push_back({task, key, "temporal_f1", sum / static_cast<double>(videos.size()), 0.0, 0.0,
                               videos.size()});
        }
    }

    ordered_json report;
    report["fold"] = data.split.fold_index;
    report["checkpoint"] = checkpoint.string();
    report["constrained"] = constrained;
    report["test_clips"] = test.size();
    report["entries"] = report_to_json(entries);
    report["chance"] = chance;
    fs::path path = c.out.empty() ? fs::path("report.json") : fs::path(c.out);
    write_json(path, report);
    for (const auto& e : entries) {
        out << "task " << e.task_id << " " << e.tag << " " << e.metric << " " << e.value << " [" << e.ci_low
            << ", " << e.ci_high << "] n=" << e.n << "\n";
    }
    out << "report written to " << path.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- selflabel

int cmd_selflabel(const Common& c, const std::vector<std::string>& inputs, bool force, std::ostream& out) {
    auto s = settings_for(c);
    if (c.out.empty()) {
        throw CLI::ValidationError("--out", "is required");
    }
    auto checkpoint = require_path(s, "checkpoint", "--checkpoint");
    auto loaded = load_model(checkpoint);
    const auto& tax = loaded->taxonomy;
    auto data = load_fold(s, c.fold.value_or(0), tax);
    const auto& mc = loaded->model.config();
    auto validation = build_dataset(data.records, data.split.validation_clips, *data.provider, loaded->vocab, tax, mc);
    Predictor predictor(loaded->model, loaded->vocab, tax);
    const int task = c.task.value_or(2);

    // Step 1: readiness.
    std::map<int, double> accuracies;
    auto grouped = by_task(validation);
    for (auto& [t, examples] : grouped) {
        std::vector<ComponentAnnotation> truth;
        for (const auto& e : examples) {
            truth.push_back(e.annotation);
        }
        accuracies[t] = all_tags_accuracy(decode_all(predictor, examples, t, false), truth);
        out << "validation accuracy task " << t << ": " << accuracies[t] << "\n";
    }
    std::vector<int> tasks;
    for (const auto& [t, _] : accuracies) {
        tasks.push_back(t);
    }
    bool ready = readiness_gate(accuracies, tasks);
    out << "readiness gate " << (ready ? "passed" : "failed") << "\n";
    if (!ready && !force) {
        throw Error("readiness gate failed: mean validation accuracy is below 0.80 (use --force to continue)");
    }

    // Step 3 (calibration) from validation clips of the labelling task.
    SelfLabelOptions options;
    options.task_id = task;
    options.confidence_tag = tax.schema_for_task(task).tags.front().key;
    options.gap_tolerance = s.get_double("selflabel.gap_s", options.gap_tolerance);
    auto& examples = grouped[task];
    std::vector<ComponentAnnotation> truth;
    for (const auto& e : examples) {
        truth.push_back(e.annotation);
    }
    auto predicted = decode_all(predictor, examples, task, true);
    auto samples = calibration_samples(predicted, truth, options.confidence_tag);
    auto table = calibrate_thresholds(samples, tax.schema_for_task(task).find_tag(options.confidence_tag)->categories,
                                      s.get_double("selflabel.target_precision", kTargetPrecision));
    fs::path dir = c.out;
    fs::create_directories(dir);
    write_json(dir / "thresholds.json", table.to_json());

    // Step 2 and 3: annotate, filter and merge every unlabelled video.
    FeatureMatrix pooled(0, static_cast<std::uint32_t>(mc.feature_dim));
    std::vector<ClipRecord> fresh;
    for (const auto& input : inputs) {
        auto track = read_hsaf(input);
        auto anns = self_label_video(predictor, track, static_cast<double>(track.count), table, options);
        const std::string video = fs::path(input).stem().string();
        for (auto& a : anns) {
            ClipRecord r;
            r.video_id = video;
            r.annotation = a;
            r.feature = {"ai_features.hsaf", pooled.count};
            pooled.append(window_embedding(track, a.span));
            fresh.push_back(std::move(r));
        }
        out << input << ": " << anns.size() << " AI annotations\n";
    }
    write_hsaf(dir / "ai_features.hsaf", pooled);

    // Step 4: grow the atlas into a new manifest.
    auto report = expand_atlas({require_path(s, "train.manifest", "--manifest")}, fresh, dir / "atlas.jsonl", tax);
    write_json(dir / "growth.json", report.to_json());
    out << "atlas grew from " << report.before << " to " << report.after << " records (x" << report.ratio() << ")\n";
    return 0;
}

// ---------------------------------------------------------------- map

int cmd_map(const Common& c, const std::string& input, const std::optional<std::string>& step, double window,
            std::optional<double> duration, std::ostream& out) {
    auto s = settings_for(c);
    auto checkpoint = require_path(s, "checkpoint", "--checkpoint");
    auto loaded = load_model(checkpoint);
    Predictor predictor(loaded->model, loaded->vocab, loaded->taxonomy);
    auto track = read_hsaf(input);
    MappingRequest req;
    req.video_id = fs::path(input).stem().string();
    req.task_id = c.task.value_or(2);
    req.step_filter = step;
    req.fine_window_s = window;
    auto timeline = run_workflow(predictor, track, duration.value_or(static_cast<double>(track.count)), req);
    auto text = timeline_to_json(timeline).dump(2) + "\n";
    if (c.out.empty()) {
        out << text;
    } else {
        ensure_parent(c.out);
        write_file_atomic(c.out, text);
        out << timeline.segments.size() << " segments written to " << c.out << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------- serve

int cmd_serve(const Common& c, std::ostream& out) {
    auto s = settings_for(c);
    ServiceConfig config;
    config.checkpoint = require_path(s, "checkpoint", "--checkpoint");
    config.store = s.get_string("store", "store");
    config.host = s.get_string("host", config.host);
    config.port = static_cast<int>(s.get_int("port", config.port));
    config.workers = static_cast<int>(s.get_int("workers", config.workers));
    config.worker_delay_ms = static_cast<int>(s.get_int("worker_delay_ms", 0));
    config.validate();

    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    auto service = MappingService::open(config);
    service->start();
    if (service->recovered_jobs() > 0) {
        out << service->recovered_jobs() << " interrupted jobs marked failed\n";
    }
    HttpServer server(*service);
    int port = server.bind(config.host, config.port);
    out << "listening on http://" << config.host << ":" << port << std::endl;

    std::thread waiter([&] {
        int sig = 0;
        sigwait(&signals, &sig);
        server.stop();
    });
    server.listen();
    // listen() also returns when binding is lost; wake the waiter either way.
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
    service->stop();
    out << "stopped\n";
    return 0;
}

// ---------------------------------------------------------------- export-reprs

int cmd_export(const Common& c, std::ostream& out) {
    auto s = settings_for(c);
    if (c.out.empty()) {
        throw CLI::ValidationError("--out", "is required");
    }
    auto checkpoint = require_path(s, "checkpoint", "--checkpoint");
    auto loaded = load_model(checkpoint);
    const auto& tax = loaded->taxonomy;
    auto manifest = require_path(s, "train.manifest", "--manifest");
    auto records = load_manifest(manifest, tax);
    HsafProvider provider(fs::absolute(manifest).parent_path());
    const auto& mc = loaded->model.config();

    FeatureMatrix reprs(0, static_cast<std::uint32_t>(mc.dim));
    std::string index;
    std::vector<Sequence> batch;
    auto flush = [&] {
        if (batch.empty()) {
            return;
        }
        auto cache = loaded->model.forward(batch);
        auto r = loaded->model.export_representation(cache);
        for (Eigen::Index i = 0; i < r.rows(); ++i) {
            reprs.append(std::span<const float>(r.row(i).data(), static_cast<std::size_t>(r.cols())));
        }
        batch.clear();
    };
    for (const auto& r : records) {
        if (c.task && r.task_id() != *c.task) {
            continue;
        }
        const auto& schema = tax.schema_for_task(r.task_id());
        // Prefix only, so the representation does not see the labels.
        Sequence seq;
        seq.clip = provider.provide(r);
        seq.instruction = encode_instruction(loaded->vocab, schema.instruction, mc.instruction_slots).ids;
        seq.targets.assign(static_cast<std::size_t>(seq.length()), 0);
        seq.mask.assign(static_cast<std::size_t>(seq.length()), 0);
        batch.push_back(std::move(seq));
        ordered_json j;
        j["row"] = reprs.count + batch.size() - 1;
        j["video_id"] = r.video_id;
        j["task_id"] = r.task_id();
        j["start_s"] = r.span().start_s;
        j["end_s"] = r.span().end_s;
        j["tags"] = tags_to_json(r.annotation.tag_values);
        index += j.dump() + "\n";
        if (batch.size() == 256) {
            flush();
        }
    }
    flush();
    fs::path path = c.out;
    ensure_parent(path);
    write_hsaf(path, reprs);
    auto index_path = path;
    index_path.replace_extension(".jsonl");
    write_file_atomic(index_path, index);
    out << reprs.count << " representations of dimension " << reprs.dim << " written to " << path.string() << "\n";
    return 0;
}

} // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Surgical video mapping: synthetic data, training, evaluation, self-labelling and serving"};
    app.name("surgimap");
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    Common common;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic clip corpus and feature track");
    add_common(synth, common, false, false, false, false);

    auto* train_cmd = app.add_subcommand("train", "Train on one cross-validation fold");
    add_common(train_cmd, common, true, false, true, true);

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a fold's test split");
    add_common(eval, common, true, true, true, true);

    std::vector<std::string> inputs;
    bool force = false;
    auto* selflabel = app.add_subcommand("selflabel", "Self-label unlabelled videos and grow the atlas");
    add_common(selflabel, common, true, true, true, true);
    selflabel->add_option("--input", inputs, "Per-second HSAF feature file of an unlabelled video")->required();
    selflabel->add_flag("--force", force, "Continue when the readiness gate fails");

    std::string map_input;
    std::optional<std::string> step;
    double window = kDefaultFineWindowS;
    std::optional<double> duration;
    auto* map = app.add_subcommand("map", "Map one video's per-second features to a timeline");
    add_common(map, common, false, true, true, false);
    map->add_option("--input", map_input, "Per-second HSAF feature file")->required();
    map->add_option("--step", step, "Only refine coarse windows with this step");
    map->add_option("--window", window, "Fine window width in seconds [2, 5]");
    map->add_option("--duration", duration, "Video duration in seconds (default: one row per second)");

    auto* serve = app.add_subcommand("serve", "Run the mapping service");
    add_common(serve, common, false, false, true, false);
    serve->add_option("--port", common.port, "Listen port (0 picks a free one)");

    auto* exporter = app.add_subcommand("export-reprs", "Export final-layer clip representations");
    add_common(exporter, common, false, true, true, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            if (!app.get_subcommands().empty()) {
                out << "\n";
            }
            return 0;
        }
        err << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (*synth) {
            return cmd_synth(common, out);
        }
        if (*train_cmd) {
            return cmd_train(common, out);
        }
        if (*eval) {
            return cmd_eval(common, out);
        }
        if (*selflabel) {
            return cmd_selflabel(common, inputs, force, out);
        }
        if (*map) {
            return cmd_map(common, map_input, step, window, duration, out);
        }
        if (*serve) {
            return cmd_serve(common, out);
        }
        if (*exporter) {
            return cmd_export(common, out);
        }
    } catch (const CLI::ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

} // namespace surgimap
