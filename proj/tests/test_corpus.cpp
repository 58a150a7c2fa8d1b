#include "doctest.h"

#include "surgimap/corpus.hpp"
#include "surgimap/errors.hpp"
#include "test_util.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

using namespace surgimap;

namespace {

SyntheticCorpus small_corpus(std::uint64_t seed, int videos = 10, int clips = 5) {
    SynthSpec spec;
    spec.n_videos = videos;
    spec.clips_per_video = clips;
    spec.seed = seed;
    SyntheticWorld world(spec, Taxonomy::builtin());
    return generate_synthetic(world, "features.hsaf");
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string l;
    while (std::getline(ss, l)) {
        out.push_back(l);
    }
    return out;
}

} // namespace

TEST_CASE("manifest round-trip is lossless and byte-deterministic") {
    testing::TempDir dir;
    auto tax = Taxonomy::builtin();
    auto corpus = small_corpus(1);
    corpus.records[3].annotation.source = Source::ai;
    corpus.records[3].annotation.confidence["action"] = 0.75;
    save_manifest(corpus.records, dir / "m.jsonl");
    auto back = load_manifest(dir / "m.jsonl", tax);
    CHECK(back == corpus.records);
    CHECK(back[3].annotation.source == Source::ai);
    CHECK(serialize_manifest(back) == serialize_manifest(corpus.records));
}

TEST_CASE("manifest errors name the line") {
    auto tax = Taxonomy::builtin();
    auto corpus = small_corpus(2);
    auto text = lines(serialize_manifest(corpus.records));
    REQUIRE(text.size() >= 7);
    auto j = nlohmann::json::parse(text[6]);
    auto first_tag = j["tags"].begin().key();
    j["tags"][first_tag] = "no such category";
    text[6] = j.dump();
    std::string joined;
    for (const auto& l : text) {
        joined += l + "\n";
    }
    try {
        parse_manifest(joined, tax);
        FAIL("expected an error");
    } catch (const Error& e) {
        std::string what = e.what();
        CHECK(what.rfind("line 7: unknown category", 0) == 0);
    }
    CHECK_THROWS_WITH_AS(parse_manifest("{\"video_id\":\"a\"}\n", tax), doctest::Contains("line 1"), Error);
    CHECK_THROWS_AS(parse_manifest("not json\n", tax), FormatError);
}

TEST_CASE("fold counts and determinism") {
    auto corpus = small_corpus(3);
    auto folds = make_folds(corpus.records, 5, 42);
    REQUIRE(folds.size() == 5);
    std::set<std::pair<std::string, std::string>> pairs;
    for (const auto& f : folds) {
        CHECK(f.validation_videos.size() == 1);
        CHECK(f.test_videos.size() == 1);
        CHECK(f.train_videos.size() == 8);
        CHECK(check_no_leakage(f, corpus.records).ok());
        pairs.insert({f.validation_videos[0], f.test_videos[0]});
    }
    CHECK(pairs.size() == 5);
    CHECK(make_folds(corpus.records, 5, 42) == folds);

    // With ten videos and five folds every held-out video is distinct.
    std::set<std::string> held;
    for (const auto& f : folds) {
        held.insert(f.validation_videos[0]);
        held.insert(f.test_videos[0]);
    }
    CHECK(held.size() == 10);
}

TEST_CASE("too few videos") {
    auto corpus = small_corpus(4, 2);
    CHECK_THROWS_AS(make_folds(corpus.records, 5, 1), ValidationError);
}

TEST_CASE("leakage checks") {
    auto corpus = small_corpus(5, 4, 2);
    auto split = make_folds(corpus.records, 1, 9)[0];
    SUBCASE("video in two sets") {
        split.train_videos.push_back(split.test_videos[0]);
        auto r = check_no_leakage(split, corpus.records);
        REQUIRE_FALSE(r.ok());
        bool named = false;
        for (const auto& v : r.violations) {
            named = named || v.find("'" + split.test_videos[0] + "'") != std::string::npos;
        }
        CHECK(named);
    }
    SUBCASE("orphan clip") {
        auto records = corpus.records;
        records.push_back(records[0]);
        records.back().video_id = "elsewhere";
        auto r = check_no_leakage(split, records);
        REQUIRE_FALSE(r.ok());
        CHECK(r.violations.back().find("orphan clip") != std::string::npos);
    }
}

TEST_CASE("synthetic generator is reproducible") {
    auto a = small_corpus(6);
    auto b = small_corpus(6);
    CHECK(a.records == b.records);
    CHECK(a.features == b.features);
    auto c = small_corpus(7);
    CHECK_FALSE(a.features == c.features);
    auto tax = Taxonomy::builtin();
    for (const auto& r : a.records) {
        CHECK(tax.validate(r.annotation).ok());
        CHECK(r.span().duration() >= 1.0 - 1e-9);
        CHECK(r.span().duration() <= 20.0 + 1e-9);
    }
}

TEST_CASE("synthetic directions are unit vectors") {
    SynthSpec spec;
    spec.feature_dim = 16;
    SyntheticWorld world(spec, Taxonomy::builtin());
    auto d = world.direction("action", "retraction");
    double norm = 0;
    for (float x : d) {
        norm += static_cast<double>(x) * x;
    }
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK_THROWS_AS(world.direction("action", "juggling"), NotFoundError);
}

TEST_CASE("noiseless limit makes the nearest-mean oracle exact") {
    SynthSpec spec;
    spec.feature_dim = 64;
    spec.separation = 2.0;
    spec.noise_sd = 1e-6;
    spec.tasks = {3};
    SyntheticWorld world(spec, Taxonomy::builtin());
    std::mt19937_64 rng(1);
    const auto& schema = world.taxonomy().schema_for_task(3);
    for (int i = 0; i < 50; ++i) {
        auto a = world.sample_annotation(3, rng);
        auto x = world.feature(a, static_cast<std::uint64_t>(i));
        // exhaustive joint search over all category combinations
        double best = 1e300;
        std::map<std::string, std::string> arg;
        for (const auto& p : schema.tags[0].categories) {
            for (const auto& q : schema.tags[1].categories) {
                ComponentAnnotation c = a;
                c.tag_values = {{schema.tags[0].key, p}, {schema.tags[1].key, q}};
                auto mu = world.clean_feature(c);
                double dist = 0;
                for (std::size_t k = 0; k < mu.size(); ++k) {
                    dist += (x[k] - mu[k]) * (x[k] - mu[k]);
                }
                if (dist < best) {
                    best = dist;
                    arg = c.tag_values;
                }
            }
        }
        CHECK(arg == a.tag_values);
    }
}

TEST_CASE("generator settings validation") {
    SynthSpec spec;
    spec.feature_dim = 3;
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    spec = SynthSpec{};
    spec.noise_sd = 0;
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    spec = SynthSpec{};
    spec.separation = -1;
    CHECK_THROWS_AS(spec.validate(), ValidationError);
}
