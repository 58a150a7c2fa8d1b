#pragma once

#include "surgimap/corpus.hpp"

#include <map>
#include <random>
#include <string>
#include <vector>

namespace surgimap::oracle {

struct NearestMeanResult {
    double joint = 0.0;
    std::map<std::string, double> per_tag;
    std::size_t samples = 0;
};

// Monte-Carlo accuracy of the nearest-mean classifier that searches every
// category combination of the task. With isotropic Gaussian noise this is
// the Bayes-optimal joint decision.
inline NearestMeanResult nearest_mean_accuracy(const SyntheticWorld& world, int task_id, std::size_t samples,
                                               std::uint64_t seed, std::uint64_t index_offset = 50'000'000) {
    const auto& schema = world.taxonomy().schema_for_task(task_id);
    std::vector<std::map<std::string, std::string>> combos(1);
    for (const auto& tag : schema.tags) {
        std::vector<std::map<std::string, std::string>> next;
        for (const auto& c : combos) {
            for (const auto& cat : tag.categories) {
                auto m = c;
                m[tag.key] = cat;
                next.push_back(std::move(m));
            }
        }
        combos = std::move(next);
    }
    std::vector<std::vector<double>> means;
    for (const auto& c : combos) {
        ComponentAnnotation a;
        a.task_id = task_id;
        a.tag_values = c;
        means.push_back(world.clean_feature(a));
    }
    std::mt19937_64 rng(seed);
    NearestMeanResult r;
    r.samples = samples;
    std::map<std::string, std::size_t> hits;
    std::size_t joint = 0;
    for (std::size_t i = 0; i < samples; ++i) {
        auto truth = world.sample_annotation(task_id, rng);
        auto x = world.feature(truth, index_offset + i);
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t k = 0; k < means.size(); ++k) {
            double d = 0.0;
            for (std::size_t j = 0; j < x.size(); ++j) {
                double e = x[j] - means[k][j];
                d += e * e;
            }
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        bool all = true;
        for (const auto& tag : schema.tags) {
            bool ok = combos[best].at(tag.key) == truth.tag_values.at(tag.key);
            hits[tag.key] += ok;
            all = all && ok;
        }
        joint += all;
    }
    r.joint = static_cast<double>(joint) / static_cast<double>(samples);
    for (const auto& [k, v] : hits) {
        r.per_tag[k] = static_cast<double>(v) / static_cast<double>(samples);
    }
    return r;
}

} // namespace surgimap::oracle
