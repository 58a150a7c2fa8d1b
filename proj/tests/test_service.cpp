#include "doctest.h"

#include "pipeline_fixtures.hpp"
#include "service_harness.hpp"
#include "test_util.hpp"
#include "surgimap/errors.hpp"
#include "surgimap/fsutil.hpp"
#include "surgimap/service.hpp"

#include "httplib.h"

using namespace surgimap;
using nlohmann::json;
using namespace std::chrono_literals;
using testing::feature_bytes;
using testing::job_status;
using testing::poll;

namespace {

// In-process service with an HTTP front end on a free port.
struct Harness {
    testing::TempDir dir;
    testing::Pipeline pipeline;
    std::unique_ptr<MappingService> service;
    std::unique_ptr<HttpServer> http;
    std::thread thread;
    int port = 0;

    explicit Harness(int delay_ms = 0) {
        ServiceConfig c;
        c.store = dir.path() / "store";
        c.workers = 1;
        c.worker_delay_ms = delay_ms;
        service = std::make_unique<MappingService>(c, pipeline.model, pipeline.vocab, pipeline.taxonomy);
        service->start();
        http = std::make_unique<HttpServer>(*service);
        port = http->bind("127.0.0.1", 0);
        thread = std::thread([this] { http->listen(); });
    }
    ~Harness() {
        http->stop();
        thread.join();
        service->stop();
    }
    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port);
        c.set_read_timeout(30, 0);
        return c;
    }
};

} // namespace

TEST_CASE("uuid and timestamps") {
    auto a = new_uuid();
    auto b = new_uuid();
    CHECK(a != b);
    CHECK(a.size() == 36);
    CHECK(a[14] == '4');
    CHECK(std::string("89ab").find(a[19]) != std::string::npos);
    CHECK(utc_now().back() == 'Z');
}

TEST_CASE("video registration validates and deduplicates") {
    Harness h;
    auto cli = h.client();
    auto bytes = feature_bytes(90, 16, 1);
    auto r = cli.Post("/videos?name=case1", bytes, "application/octet-stream");
    REQUIRE(r);
    CHECK(r->status == 201);
    auto v = json::parse(r->body);
    CHECK(v["name"] == "case1");
    CHECK(v["duration_s"] == 90.0);
    auto again = cli.Post("/videos", bytes, "application/octet-stream");
    CHECK(again->status == 200);
    CHECK(json::parse(again->body)["video_id"] == v["video_id"]);

    auto corrupt = bytes;
    corrupt[0] = 'X';
    auto bad = cli.Post("/videos", corrupt, "application/octet-stream");
    CHECK(bad->status == 422);
    CHECK(bad->body.find("HSAF") != std::string::npos);

    auto wrong_dim = cli.Post("/videos", feature_bytes(10, 8, 1), "application/octet-stream");
    CHECK(wrong_dim->status == 422);
    auto long_duration = cli.Post("/videos?duration_s=500", feature_bytes(10, 16, 2), "application/octet-stream");
    CHECK(long_duration->status == 422);
    auto not_number = cli.Post("/videos?duration_s=abc", feature_bytes(10, 16, 2), "application/octet-stream");
    CHECK(not_number->status == 422);

    auto list = json::parse(cli.Get("/videos")->body);
    REQUIRE(list.size() == 1);
    CHECK(list[0]["video_id"] == v["video_id"]);
}

TEST_CASE("job lifecycle is observable and the timeline is persisted") {
    Harness h(400);
    auto cli = h.client();
    auto video = json::parse(cli.Post("/videos", feature_bytes(150, 16, 3), "application/octet-stream")->body);
    const std::string vid = video["video_id"];

    CHECK(cli.Post("/jobs", R"({"video_id":"nope","task_id":2})", "application/json")->status == 404);
    CHECK(cli.Post("/jobs", json{{"video_id", vid}, {"task_id", 2}, {"fine_window_s", 9}}.dump(), "application/json")->status == 422);
    CHECK(cli.Post("/jobs", json{{"video_id", vid}, {"task_id", 7}}.dump(), "application/json")->status == 422);
    CHECK(cli.Post("/jobs", json{{"video_id", vid}, {"task_id", 2}, {"step_filter", "knitting"}}.dump(), "application/json")->status == 422);
    CHECK(cli.Post("/jobs", "{not json", "application/json")->status == 400);

    auto created = cli.Post("/jobs", json{{"video_id", vid}, {"task_id", 2}, {"idempotency_key", "k1"}}.dump(),
                            "application/json");
    REQUIRE(created->status == 202);
    auto job = json::parse(created->body);
    CHECK(job["status"] == "queued");
    const std::string id = job["job_id"];

    std::vector<std::string> seen = {"queued"};
    bool finished = poll(
        [&] {
            auto s = job_status(cli, id);
            if (!s.empty() && s != seen.back()) {
                seen.push_back(s);
            }
            return s == "done" || s == "failed";
        },
        30s);
    REQUIRE(finished);
    CHECK(seen == std::vector<std::string>{"queued", "running", "done"});

    auto dup = cli.Post("/jobs", json{{"video_id", vid}, {"task_id", 2}, {"idempotency_key", "k1"}}.dump(),
                        "application/json");
    CHECK(dup->status == 200);
    CHECK(json::parse(dup->body)["job_id"] == id);

    auto done = json::parse(cli.Get("/jobs/" + id)->body);
    const std::string locator = done["result"];
    auto timeline = cli.Get("/videos/" + vid + "/timeline?task=2");
    REQUIRE(timeline->status == 200);
    CHECK(timeline->body == read_file(h.dir.path() / "store" / locator));
    auto parsed = timeline_from_json(json::parse(timeline->body));
    CHECK(check_containment(parsed).ok());
    CHECK(parsed.video_id == vid);

    auto missing = cli.Get("/videos/" + vid + "/timeline?task=3");
    CHECK(missing->status == 404);
    CHECK(missing->body.find("POST /jobs") != std::string::npos);
    CHECK(cli.Get("/videos/" + vid + "/timeline")->status == 422);
    CHECK(cli.Get("/jobs/00000000-0000-4000-8000-000000000000")->status == 404);
    CHECK(cli.Get("/jobs/..%2F..%2Fetc")->status == 404);

    auto summary = json::parse(cli.Get("/summary")->body);
    CHECK(summary["videos"] == 1);
    CHECK(summary["segment_count"].get<std::size_t>() == parsed.segments.size());
    auto per_video = json::parse(cli.Get("/summary?video_id=" + vid)->body);
    CHECK(per_video == summary);
}

TEST_CASE("summary aggregates proportions across videos and is empty without jobs") {
    testing::TempDir dir;
    JobStore store(dir.path() / "store");
    auto empty_service_summary = [&] {
        testing::Pipeline p;
        ServiceConfig c;
        c.store = dir.path() / "store";
        MappingService s(c, p.model, p.vocab, p.taxonomy);
        return s.summary(std::nullopt);
    };
    auto empty = empty_service_summary();
    CHECK(empty["videos"] == 0);
    CHECK(empty["segment_count"] == 0);
    CHECK(empty["proficiency"]["high_fraction"] == 0.0);

    auto make = [&](const std::string& video, int high) {
        Timeline t;
        t.video_id = video;
        t.task_id = 3;
        t.selected = {{0, 40}};
        TimelineSegment c;
        c.span = {0, 30};
        c.task_id = 1;
        c.tags = {{"step", "suturing"}};
        t.segments.push_back(c);
        for (int i = 0; i < 10; ++i) {
            TimelineSegment f;
            f.span = {i * 3.0, i * 3.0 + 3.0};
            f.task_id = 3;
            f.stage = Stage::fine;
            f.parent = 0;
            f.tags = {{"phase", "driving"}, {"proficiency", i < high ? "high" : "low"}};
            t.segments.push_back(f);
        }
        store.commit_timeline(new_uuid(), t);
    };
    make("videoa", 6);
    make("videob", 8);
    auto s = empty_service_summary();
    CHECK(s["videos"] == 2);
    CHECK(s["proficiency"]["fine_segments"] == 20);
    CHECK(s["proficiency"]["high_fraction"].get<double>() == doctest::Approx(0.7));
}

TEST_CASE("killing the server mid-job leaves no job running after restart") {
    const char* bin = std::getenv("SURGIMAP_BIN");
    if (bin == nullptr) {
        MESSAGE("SURGIMAP_BIN not set; skipping process test");
        return;
    }
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

    pid_t pid = testing::spawn_server(bin, checkpoint, store, port, 60000, log);
    REQUIRE(poll(up, 20s));
    auto video = json::parse(cli.Post("/videos", feature_bytes(120, 16, 5), "application/octet-stream")->body);
    const std::string vid = video["video_id"];
    auto request = json{{"video_id", vid}, {"task_id", 2}, {"step_filter", "suturing"}}.dump();
    const std::string first = json::parse(cli.Post("/jobs", request, "application/json")->body)["job_id"];
    REQUIRE(poll([&] { return job_status(cli, first) == "running"; }, 20s));
    ::kill(pid, SIGKILL);
    int status = 0;
    ::waitpid(pid, &status, 0);
    CHECK(WIFSIGNALED(status));

    pid = testing::spawn_server(bin, checkpoint, store, port, 0, log);
    REQUIRE(poll(up, 20s));
    auto recovered = json::parse(cli.Get("/jobs/" + first)->body);
    CHECK(recovered["status"] == "failed");
    CHECK(recovered["failure"].get<std::string>().find("interrupted") != std::string::npos);
    for (const auto& entry : std::filesystem::directory_iterator(store / "jobs")) {
        CHECK(json::parse(read_file(entry.path()))["status"] != "running");
    }

    const std::string second = json::parse(cli.Post("/jobs", request, "application/json")->body)["job_id"];
    REQUIRE(poll([&] { return job_status(cli, second) == "done"; }, 60s));
    auto bytes = cli.Get("/videos/" + vid + "/timeline?task=2")->body;
    CHECK(check_containment(timeline_from_json(json::parse(bytes))).ok());

    ::kill(pid, SIGTERM);
    ::waitpid(pid, &status, 0);
    CHECK(WIFEXITED(status));
    CHECK(WEXITSTATUS(status) == 0);

    // Same request on a fresh process: identical bytes, and the committed result is untouched.
    pid = testing::spawn_server(bin, checkpoint, store, port, 0, log);
    REQUIRE(poll(up, 20s));
    CHECK(cli.Get("/videos/" + vid + "/timeline?task=2")->body == bytes);
    auto locator = json::parse(cli.Get("/jobs/" + second)->body)["result"].get<std::string>();
    CHECK(read_file(store / locator) == bytes);
    const std::string third = json::parse(cli.Post("/jobs", request, "application/json")->body)["job_id"];
    REQUIRE(poll([&] { return job_status(cli, third) == "done"; }, 60s));
    CHECK(cli.Get("/videos/" + vid + "/timeline?task=2")->body == bytes);
    ::kill(pid, SIGTERM);
    ::waitpid(pid, &status, 0);
}
