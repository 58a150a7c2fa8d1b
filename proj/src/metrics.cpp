#include "surgimap/metrics.hpp"

#include "surgimap/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace surgimap {

namespace {

void finalize(PrecisionRecall& pr) {
    pr.precision = pr.tp + pr.fp > 0 ? static_cast<double>(pr.tp) / (pr.tp + pr.fp) : 0.0;
    pr.recall = pr.tp + pr.fn > 0 ? static_cast<double>(pr.tp) / (pr.tp + pr.fn) : 0.0;
    pr.f1 = pr.precision + pr.recall > 0 ? 2 * pr.precision * pr.recall / (pr.precision + pr.recall) : 0.0;
}

// Kuhn's augmenting-path algorithm; adjacency lists are prediction -> truth.
int maximum_matching(const std::vector<std::vector<int>>& adjacency, int truth_count) {
    std::vector<int> owner(static_cast<std::size_t>(truth_count), -1);
    std::vector<char> seen;
    std::function<bool(int)> augment = [&](int p) {
        for (int g : adjacency[static_cast<std::size_t>(p)]) {
            if (seen[static_cast<std::size_t>(g)]) {
                continue;
            }
            seen[static_cast<std::size_t>(g)] = 1;
            if (owner[static_cast<std::size_t>(g)] < 0 || augment(owner[static_cast<std::size_t>(g)])) {
                owner[static_cast<std::size_t>(g)] = p;
                return true;
            }
        }
        return false;
    };
    int matched = 0;
    for (std::size_t p = 0; p < adjacency.size(); ++p) {
        seen.assign(static_cast<std::size_t>(truth_count), 0);
        matched += augment(static_cast<int>(p)) ? 1 : 0;
    }
    return matched;
}

int greedy_matching(const std::vector<const TimedPrediction*>& preds,
                    const std::vector<const TimedPrediction*>& truth, double threshold) {
    struct Pair {
        double iou;
        std::size_t p;
        std::size_t g;
    };
    std::vector<Pair> pairs;
    for (std::size_t p = 0; p < preds.size(); ++p) {
        for (std::size_t g = 0; g < truth.size(); ++g) {
            double iou = interval_iou(preds[p]->span, truth[g]->span);
            if (iou >= threshold) {
                pairs.push_back({iou, p, g});
            }
        }
    }
    std::sort(pairs.begin(), pairs.end(), [&](const Pair& a, const Pair& b) {
        if (a.iou != b.iou) {
            return a.iou > b.iou;
        }
        if (truth[a.g]->span.start_s != truth[b.g]->span.start_s) {
            return truth[a.g]->span.start_s < truth[b.g]->span.start_s;
        }
        if (a.g != b.g) {
            return a.g < b.g;
        }
        return a.p < b.p;
    });
    std::vector<char> used_p(preds.size(), 0);
    std::vector<char> used_g(truth.size(), 0);
    int matched = 0;
    for (const auto& pair : pairs) {
        if (!used_p[pair.p] && !used_g[pair.g]) {
            used_p[pair.p] = 1;
            used_g[pair.g] = 1;
            ++matched;
        }
    }
    return matched;
}

double quantile(const std::vector<double>& sorted, double q) {
    double pos = q * static_cast<double>(sorted.size() - 1);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    auto hi = std::min(lo + 1, sorted.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

} // namespace

double exact_match_accuracy(std::span<const std::string> predicted, std::span<const std::string> truth) {
    if (predicted.size() != truth.size()) {
        throw ValidationError("exact_match_accuracy: " + std::to_string(predicted.size()) + " predictions for " +
                              std::to_string(truth.size()) + " labels");
    }
    if (truth.empty()) {
        throw UndefinedMetricError("exact_match_accuracy: no samples");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        hits += predicted[i] == truth[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double exact_match_accuracy(std::span<const std::optional<ComponentAnnotation>> predicted,
                            std::span<const ComponentAnnotation> truth, const std::string& tag_key) {
    std::vector<std::string> p;
    std::vector<std::string> t;
    if (predicted.size() != truth.size()) {
        throw ValidationError("exact_match_accuracy: prediction and label counts differ");
    }
    for (std::size_t i = 0; i < truth.size(); ++i) {
        auto it = truth[i].tag_values.find(tag_key);
        if (it == truth[i].tag_values.end()) {
            throw ValidationError("exact_match_accuracy: label " + std::to_string(i) + " has no tag " + tag_key);
        }
        t.push_back(it->second);
        std::string guess = "\x01missing";
        if (predicted[i]) {
            auto pit = predicted[i]->tag_values.find(tag_key);
            if (pit != predicted[i]->tag_values.end()) {
                guess = pit->second;
            }
        }
        p.push_back(std::move(guess));
    }
    return exact_match_accuracy(p, t);
}

double all_tags_accuracy(std::span<const std::optional<ComponentAnnotation>> predicted,
                         std::span<const ComponentAnnotation> truth) {
    if (predicted.size() != truth.size()) {
        throw ValidationError("all_tags_accuracy: prediction and label counts differ");
    }
    if (truth.empty()) {
        throw UndefinedMetricError("all_tags_accuracy: no samples");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        hits += predicted[i] && predicted[i]->tag_values == truth[i].tag_values ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double binary_auroc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        throw ValidationError("binary_auroc: score and label counts differ");
    }
    // Rank-sum form: sort once, average ranks over ties.
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double positive_rank_sum = 0.0;
    std::size_t positives = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            ++j;
        }
        double avg_rank = (static_cast<double>(i) + static_cast<double>(j - 1)) / 2.0 + 1.0;
        for (std::size_t k = i; k < j; ++k) {
            int label = labels[order[k]];
            if (label != 0 && label != 1) {
                throw ValidationError("binary_auroc: labels must be 0 or 1");
            }
            if (label == 1) {
                positive_rank_sum += avg_rank;
                ++positives;
            }
        }
        i = j;
    }
    const std::size_t negatives = scores.size() - positives;
    if (positives == 0 || negatives == 0) {
        throw UndefinedMetricError("binary_auroc: labels contain a single class");
    }
    const double np = static_cast<double>(positives);
    const double u = positive_rank_sum - np * (np + 1.0) / 2.0;
    return u / (np * static_cast<double>(negatives));
}

double interval_iou(const Span& a, const Span& b) {
    double inter = std::max(0.0, std::min(a.end_s, b.end_s) - std::max(a.start_s, b.start_s));
    double uni = std::max(a.end_s, b.end_s) - std::min(a.start_s, b.start_s);
    if (inter <= 0.0) {
        return 0.0;
    }
    // Overlapping intervals: the union is their combined extent.
    return inter / uni;
}

TemporalF1 temporal_f1(std::span<const TimedPrediction> predictions, std::span<const TimedPrediction> truth,
                       double threshold, Matching matching) {
    for (const auto* list : {&predictions, &truth}) {
        for (const auto& t : *list) {
            if (!(t.span.start_s < t.span.end_s)) {
                throw ValidationError("temporal_f1: malformed span");
            }
        }
    }
    TemporalF1 result;
    if (predictions.empty() && truth.empty()) {
        result.macro_precision = result.macro_recall = result.macro_f1 = 1.0;
        return result;
    }
    std::set<std::string> categories;
    for (const auto& p : predictions) {
        categories.insert(p.category);
    }
    for (const auto& g : truth) {
        categories.insert(g.category);
    }
    for (const auto& cat : categories) {
        std::vector<const TimedPrediction*> ps;
        std::vector<const TimedPrediction*> gs;
        for (const auto& p : predictions) {
            if (p.category == cat) {
                ps.push_back(&p);
            }
        }
        for (const auto& g : truth) {
            if (g.category == cat) {
                gs.push_back(&g);
            }
        }
        int tp = 0;
        if (matching == Matching::greedy) {
            tp = greedy_matching(ps, gs, threshold);
        } else {
            std::vector<std::vector<int>> adjacency(ps.size());
            for (std::size_t p = 0; p < ps.size(); ++p) {
                for (std::size_t g = 0; g < gs.size(); ++g) {
                    if (interval_iou(ps[p]->span, gs[g]->span) >= threshold) {
                        adjacency[p].push_back(static_cast<int>(g));
                    }
                }
            }
            tp = maximum_matching(adjacency, static_cast<int>(gs.size()));
        }
        PrecisionRecall pr;
        pr.tp = tp;
        pr.fp = static_cast<int>(ps.size()) - tp;
        pr.fn = static_cast<int>(gs.size()) - tp;
        finalize(pr);
        result.per_category[cat] = pr;
    }
    for (const auto& [cat, pr] : result.per_category) {
        result.macro_precision += pr.precision;
        result.macro_recall += pr.recall;
        result.macro_f1 += pr.f1;
    }
    const auto n = static_cast<double>(result.per_category.size());
    result.macro_precision /= n;
    result.macro_recall /= n;
    result.macro_f1 /= n;
    return result;
}

Interval bootstrap_ci(const std::function<double(std::span<const std::size_t>)>& metric, std::size_t n,
                      int resamples, double level, std::uint64_t seed, int max_redraws) {
    if (n < 2) {
        throw ValidationError("bootstrap_ci needs at least 2 samples");
    }
    if (resamples < 1 || !(level > 0.0 && level < 1.0)) {
        throw ValidationError("bootstrap_ci: bad resample count or level");
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(resamples));
    std::vector<std::size_t> idx(n);
    int redraws = 0;
    while (static_cast<int>(values.size()) < resamples) {
        for (auto& i : idx) {
            i = pick(rng);
        }
        try {
            values.push_back(metric(idx));
        } catch (const UndefinedMetricError&) {
            if (++redraws > max_redraws) {
                throw UndefinedMetricError("bootstrap_ci: metric undefined on too many resamples");
            }
        }
    }
    std::sort(values.begin(), values.end());
    const double alpha = (1.0 - level) / 2.0;
    return {quantile(values, alpha), quantile(values, 1.0 - alpha)};
}

double random_chance_baseline(int categories) {
    if (categories < 1) {
        throw ValidationError("random_chance_baseline needs at least one category");
    }
    return 1.0 / categories;
}

double relative_improvement(double accuracy, int categories) {
    return accuracy / random_chance_baseline(categories);
}

nlohmann::ordered_json report_to_json(std::span<const ReportEntry> entries) {
    auto out = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
        nlohmann::ordered_json j;
        j["task"] = e.task_id;
        j["tag"] = e.tag;
        j["metric"] = e.metric;
        j["value"] = e.value;
        j["ci_low"] = e.ci_low;
        j["ci_high"] = e.ci_high;
        j["n"] = e.n;
        out.push_back(std::move(j));
    }
    return out;
}

} // namespace surgimap
