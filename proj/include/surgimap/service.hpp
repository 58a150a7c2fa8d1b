#pragma once

#include "surgimap/hsaf.hpp"
#include "surgimap/inference.hpp"
#include "surgimap/model.hpp"
#include "surgimap/taxonomy.hpp"
#include "surgimap/tokenizer.hpp"
#include "surgimap/workflow.hpp"

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

namespace surgimap {

struct ServiceConfig {
    std::filesystem::path store = "store";
    std::filesystem::path checkpoint = "model.ckpt";
    std::filesystem::path vocab; // defaults to vocab.txt beside the checkpoint
    std::string host = "127.0.0.1";
    int port = 8080;
    int workers = 2;
    int worker_delay_ms = 0; // pause before each job runs; lets tests observe "running"

    void validate() const;
};

enum class JobStatus { queued, running, done, failed };

std::string_view to_string(JobStatus status);
JobStatus parse_job_status(std::string_view text);

struct MappingJob {
    std::string job_id;
    MappingRequest request;
    JobStatus status = JobStatus::queued;
    std::string created_at;
    std::string updated_at;
    std::string result; // store-relative path of the immutable timeline, when done
    std::string failure;
    std::string idempotency_key;

    nlohmann::ordered_json to_json() const;
    static MappingJob from_json(const nlohmann::json& j);
};

struct VideoInfo {
    std::string video_id;
    std::string name;
    double duration_s = 0.0;
    std::uint32_t rows = 0;
    std::uint32_t dim = 0;
    std::string created_at;

    nlohmann::ordered_json to_json() const;
    static VideoInfo from_json(const nlohmann::json& j);
};

// On-disk state:
//   videos/<id>/{meta.json, features.hsaf}
//   jobs/<id>.json
//   results/<job id>.json             immutable timeline of a done job
//   timelines/<video>/<task>.json     latest done timeline per video and task
class JobStore {
public:
    explicit JobStore(std::filesystem::path root);

    const std::filesystem::path& root() const { return root_; }

    // Content-addressed; returns the existing record for identical features.
    std::pair<VideoInfo, bool> register_video(std::string_view hsaf_bytes, std::optional<double> duration_s,
                                              const std::string& name);
    std::vector<VideoInfo> videos() const;
    VideoInfo video(const std::string& video_id) const;
    FeatureMatrix features(const std::string& video_id) const;

    void save_job(const MappingJob& job);
    MappingJob job(const std::string& job_id) const;
    std::vector<MappingJob> jobs() const;

    // Writes the result then the per-task timeline; returns the result locator.
    std::string commit_timeline(const std::string& job_id, const Timeline& timeline);
    std::string timeline_bytes(const std::string& video_id, int task_id) const;
    std::vector<Timeline> timelines(const std::optional<std::string>& video_id) const;

private:
    std::filesystem::path root_;
    mutable std::mutex mutex_;
};

std::string new_uuid();
std::string utc_now();

class MappingService {
public:
    MappingService(ServiceConfig config, Model model, Vocabulary vocab, Taxonomy taxonomy);
    // Loads the checkpoint and vocabulary named in `config`.
    static std::unique_ptr<MappingService> open(const ServiceConfig& config);
    ~MappingService();

    MappingService(const MappingService&) = delete;
    MappingService& operator=(const MappingService&) = delete;

    // Marks interrupted jobs failed, re-queues queued jobs and starts workers.
    void start();
    void stop();

    std::pair<VideoInfo, bool> register_video(std::string_view hsaf_bytes, std::optional<double> duration_s,
                                              const std::string& name);
    std::vector<VideoInfo> videos() const { return store_.videos(); }
    // Body: {video_id, task_id, step_filter?, fine_window_s?, idempotency_key?}
    std::pair<MappingJob, bool> create_job(const nlohmann::json& body);
    MappingJob job(const std::string& job_id) const { return store_.job(job_id); }
    std::string timeline(const std::string& video_id, int task_id) const;
    nlohmann::ordered_json summary(const std::optional<std::string>& video_id) const;

    // Blocks until no job is queued or running, or the timeout passes.
    bool wait_idle(std::chrono::milliseconds timeout) const;
    std::size_t recovered_jobs() const { return recovered_; }
    const ServiceConfig& config() const { return config_; }

private:
    void worker_loop();
    void run_job(const std::string& job_id);

    ServiceConfig config_;
    Taxonomy taxonomy_;
    Vocabulary vocab_;
    Model model_;
    std::unique_ptr<Predictor> predictor_;
    JobStore store_;

    mutable std::mutex mutex_;
    mutable std::condition_variable cv_;
    std::deque<std::string> queue_;
    std::map<std::string, std::string> idempotency_;
    std::size_t active_ = 0;
    std::size_t recovered_ = 0;
    bool stopping_ = false;
    std::vector<std::thread> threads_;
};

// HTTP/JSON front end:
//   POST /videos?name=&duration_s=   body: HSAF bytes
//   GET  /videos
//   POST /jobs                       body: create_job JSON
//   GET  /jobs/{id}
//   GET  /videos/{id}/timeline?task=
//   GET  /summary[?video_id=]
class HttpServer {
public:
    explicit HttpServer(MappingService& service);
    ~HttpServer();

    // Binds (port 0 picks a free port) and returns the bound port.
    int bind(const std::string& host, int port);
    // Serves until stop(); call after bind().
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace surgimap
