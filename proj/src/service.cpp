#include "surgimap/service.hpp"

#include "surgimap/errors.hpp"
#include "surgimap/fsutil.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <tuple>
#include <ctime>
#include <random>

#include "httplib.h"

namespace surgimap {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

void ServiceConfig::validate() const {
    if (workers < 1) {
        throw ValidationError("service needs at least one worker");
    }
    if (port < 0 || port > 65535) {
        throw ValidationError("port must lie in [0, 65535]");
    }
    if (worker_delay_ms < 0) {
        throw ValidationError("worker_delay_ms must be >= 0");
    }
}

std::string_view to_string(JobStatus status) {
    switch (status) {
    case JobStatus::queued:
        return "queued";
    case JobStatus::running:
        return "running";
    case JobStatus::done:
        return "done";
    case JobStatus::failed:
        return "failed";
    }
    return "failed";
}

JobStatus parse_job_status(std::string_view text) {
    for (auto s : {JobStatus::queued, JobStatus::running, JobStatus::done, JobStatus::failed}) {
        if (to_string(s) == text) {
            return s;
        }
    }
    throw FormatError("unknown job status '" + std::string(text) + "'");
}

ordered_json MappingJob::to_json() const {
    ordered_json j;
    j["job_id"] = job_id;
    j["video_id"] = request.video_id;
    ordered_json r;
    r["task_id"] = request.task_id;
    r["step_filter"] = request.step_filter ? ordered_json(*request.step_filter) : ordered_json();
    r["fine_window_s"] = request.fine_window_s;
    j["request"] = r;
    j["status"] = to_string(status);
    j["created_at"] = created_at;
    j["updated_at"] = updated_at;
    j["result"] = result.empty() ? ordered_json() : ordered_json(result);
    j["failure"] = failure.empty() ? ordered_json() : ordered_json(failure);
    j["idempotency_key"] = idempotency_key.empty() ? ordered_json() : ordered_json(idempotency_key);
    return j;
}

MappingJob MappingJob::from_json(const json& j) {
    MappingJob m;
    try {
        m.job_id = j.at("job_id").get<std::string>();
        m.request.video_id = j.at("video_id").get<std::string>();
        const auto& r = j.at("request");
        m.request.task_id = r.at("task_id").get<int>();
        if (!r.at("step_filter").is_null()) {
            m.request.step_filter = r.at("step_filter").get<std::string>();
        }
        m.request.fine_window_s = r.at("fine_window_s").get<double>();
        m.status = parse_job_status(j.at("status").get<std::string>());
        m.created_at = j.at("created_at").get<std::string>();
        m.updated_at = j.at("updated_at").get<std::string>();
        auto text = [&](const char* key) {
            auto it = j.find(key);
            return it == j.end() || it->is_null() ? std::string() : it->get<std::string>();
        };
        m.result = text("result");
        m.failure = text("failure");
        m.idempotency_key = text("idempotency_key");
    } catch (const json::exception& e) {
        throw FormatError(std::string("job record: ") + e.what());
    }
    return m;
}

ordered_json VideoInfo::to_json() const {
    ordered_json j;
    j["video_id"] = video_id;
    j["name"] = name;
    j["duration_s"] = duration_s;
    j["rows"] = rows;
    j["dim"] = dim;
    j["created_at"] = created_at;
    return j;
}

VideoInfo VideoInfo::from_json(const json& j) {
    VideoInfo v;
    try {
        v.video_id = j.at("video_id").get<std::string>();
        v.name = j.at("name").get<std::string>();
        v.duration_s = j.at("duration_s").get<double>();
        v.rows = j.at("rows").get<std::uint32_t>();
        v.dim = j.at("dim").get<std::uint32_t>();
        v.created_at = j.at("created_at").get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("video record: ") + e.what());
    }
    return v;
}

std::string new_uuid() {
    thread_local std::mt19937_64 rng{std::random_device{}() ^
                                     static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count())};
    std::uint64_t hi = rng();
    std::uint64_t lo = rng();
    hi = (hi & ~0xF000ULL) | 0x4000ULL;               // version 4
    lo = (lo & ~(0xC0ULL << 56)) | (0x80ULL << 56);   // RFC 4122 variant
    char buf[37];
    std::snprintf(buf, sizeof(buf), "%08x-%04x-%04x-%04x-%012llx", static_cast<unsigned>(hi >> 32),
                  static_cast<unsigned>((hi >> 16) & 0xFFFF), static_cast<unsigned>(hi & 0xFFFF),
                  static_cast<unsigned>(lo >> 48), static_cast<unsigned long long>(lo & 0xFFFFFFFFFFFFULL));
    return buf;
}

std::string utc_now() {
    auto now = std::chrono::system_clock::now();
    auto secs = std::chrono::system_clock::to_time_t(now);
    auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&secs, &tm);
    char buf[40];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
    char out[48];
    std::snprintf(out, sizeof(out), "%s.%03dZ", buf, static_cast<int>(ms));
    return out;
}

namespace {

bool safe_id(const std::string& id) {
    if (id.empty() || id.size() > 64) {
        return false;
    }
    for (char c : id) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-')) {
            return false;
        }
    }
    return true;
}

void require_id(const std::string& id, const char* what) {
    if (!safe_id(id)) {
        throw NotFoundError(std::string("unknown ") + what + " '" + id + "'");
    }
}

} // namespace

JobStore::JobStore(fs::path root) : root_(std::move(root)) {
    for (const char* d : {"videos", "jobs", "results", "timelines"}) {
        fs::create_directories(root_ / d);
    }
}

std::pair<VideoInfo, bool> JobStore::register_video(std::string_view hsaf_bytes, std::optional<double> duration_s,
                                                    const std::string& name) {
    auto matrix = decode_hsaf(hsaf_bytes);
    if (matrix.count == 0 || matrix.dim == 0) {
        throw ValidationError("HSAF upload has no feature rows");
    }
    double duration = duration_s.value_or(static_cast<double>(matrix.count));
    if (!(duration > 0.0) || !std::isfinite(duration)) {
        throw ValidationError("duration_s must be positive");
    }
    if (duration > static_cast<double>(matrix.count)) {
        throw ValidationError("duration_s " + std::to_string(duration) + " exceeds the " +
                              std::to_string(matrix.count) + " per-second feature rows");
    }
    const std::string id = sha256_hex(hsaf_bytes).substr(0, 16);
    std::lock_guard lock(mutex_);
    const auto dir = root_ / "videos" / id;
    if (fs::exists(dir / "meta.json")) {
        return {VideoInfo::from_json(json::parse(read_file(dir / "meta.json"))), false};
    }
    fs::create_directories(dir);
    VideoInfo info;
    info.video_id = id;
    info.name = name.empty() ? id : name;
    info.duration_s = duration;
    info.rows = matrix.count;
    info.dim = matrix.dim;
    info.created_at = utc_now();
    write_file_atomic(dir / "features.hsaf", hsaf_bytes);
    // meta.json is written last; its presence marks a complete registration.
    write_file_atomic(dir / "meta.json", info.to_json().dump(2));
    return {info, true};
}

std::vector<VideoInfo> JobStore::videos() const {
    std::lock_guard lock(mutex_);
    std::vector<VideoInfo> out;
    for (const auto& entry : fs::directory_iterator(root_ / "videos")) {
        auto meta = entry.path() / "meta.json";
        if (fs::exists(meta)) {
            out.push_back(VideoInfo::from_json(json::parse(read_file(meta))));
        }
    }
    std::sort(out.begin(), out.end(), [](const VideoInfo& a, const VideoInfo& b) {
        return std::tie(a.created_at, a.video_id) < std::tie(b.created_at, b.video_id);
    });
    return out;
}

VideoInfo JobStore::video(const std::string& video_id) const {
    require_id(video_id, "video");
    auto meta = root_ / "videos" / video_id / "meta.json";
    if (!fs::exists(meta)) {
        throw NotFoundError("unknown video '" + video_id + "'");
    }
    return VideoInfo::from_json(json::parse(read_file(meta)));
}

FeatureMatrix JobStore::features(const std::string& video_id) const {
    video(video_id);
    return read_hsaf(root_ / "videos" / video_id / "features.hsaf");
}

void JobStore::save_job(const MappingJob& job) {
    require_id(job.job_id, "job");
    write_file_atomic(root_ / "jobs" / (job.job_id + ".json"), job.to_json().dump(2));
}

MappingJob JobStore::job(const std::string& job_id) const {
    require_id(job_id, "job");
    auto path = root_ / "jobs" / (job_id + ".json");
    if (!fs::exists(path)) {
        throw NotFoundError("unknown job '" + job_id + "'");
    }
    return MappingJob::from_json(json::parse(read_file(path)));
}

std::vector<MappingJob> JobStore::jobs() const {
    std::vector<MappingJob> out;
    for (const auto& entry : fs::directory_iterator(root_ / "jobs")) {
        if (entry.path().extension() == ".json") {
            out.push_back(MappingJob::from_json(json::parse(read_file(entry.path()))));
        }
    }
    std::sort(out.begin(), out.end(), [](const MappingJob& a, const MappingJob& b) {
        return std::tie(a.created_at, a.job_id) < std::tie(b.created_at, b.job_id);
    });
    return out;
}

std::string JobStore::commit_timeline(const std::string& job_id, const Timeline& timeline) {
    const std::string bytes = timeline_to_json(timeline).dump(2);
    const std::string locator = "results/" + job_id + ".json";
    std::lock_guard lock(mutex_);
    const auto result = root_ / locator;
    if (fs::exists(result)) {
        // A re-executed job must reproduce its committed result.
        if (read_file(result) != bytes) {
            throw IntegrityError("result for job " + job_id + " already exists with different content");
        }
    } else {
        write_file_atomic(result, bytes);
    }
    const auto dir = root_ / "timelines" / timeline.video_id;
    fs::create_directories(dir);
    write_file_atomic(dir / (std::to_string(timeline.task_id) + ".json"), bytes);
    return locator;
}

std::string JobStore::timeline_bytes(const std::string& video_id, int task_id) const {
    require_id(video_id, "video");
    auto path = root_ / "timelines" / video_id / (std::to_string(task_id) + ".json");
    if (!fs::exists(path)) {
        throw NotFoundError("no completed mapping for video '" + video_id + "' and task " +
                            std::to_string(task_id) + "; create one with POST /jobs");
    }
    return read_file(path);
}

std::vector<Timeline> JobStore::timelines(const std::optional<std::string>& video_id) const {
    std::vector<Timeline> out;
    std::vector<fs::path> dirs;
    if (video_id) {
        video(*video_id);
        auto d = root_ / "timelines" / *video_id;
        if (fs::exists(d)) {
            dirs.push_back(d);
        }
    } else {
        for (const auto& entry : fs::directory_iterator(root_ / "timelines")) {
            dirs.push_back(entry.path());
        }
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(d)) {
            if (entry.path().extension() == ".json") {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            out.push_back(timeline_from_json(json::parse(read_file(f))));
        }
    }
    return out;
}

MappingService::MappingService(ServiceConfig config, Model model, Vocabulary vocab, Taxonomy taxonomy)
    : config_(std::move(config)),
      taxonomy_(std::move(taxonomy)),
      vocab_(std::move(vocab)),
      model_(std::move(model)),
      store_(config_.store) {
    config_.validate();
    predictor_ = std::make_unique<Predictor>(model_, vocab_, taxonomy_);
}

std::unique_ptr<MappingService> MappingService::open(const ServiceConfig& config) {
    auto vocab_path = config.vocab.empty() ? config.checkpoint.parent_path() / "vocab.txt" : config.vocab;
    auto model = load_checkpoint(config.checkpoint);
    auto vocab = Vocabulary::load(vocab_path);
    return std::make_unique<MappingService>(config, std::move(model), std::move(vocab), Taxonomy::builtin());
}

MappingService::~MappingService() {
    stop();
}

void MappingService::start() {
    std::lock_guard lock(mutex_);
    if (!threads_.empty()) {
        return;
    }
    stopping_ = false;
    for (auto job : store_.jobs()) {
        if (!job.idempotency_key.empty()) {
            idempotency_.emplace(job.idempotency_key, job.job_id);
        }
        if (job.status == JobStatus::running) {
            job.status = JobStatus::failed;
            job.failure = "interrupted: the service stopped while the job was running";
            job.updated_at = utc_now();
            store_.save_job(job);
            ++recovered_;
            spdlog::warn("job {} was running at shutdown; marked failed", job.job_id);
        } else if (job.status == JobStatus::queued &&
                   std::find(queue_.begin(), queue_.end(), job.job_id) == queue_.end()) {
            queue_.push_back(job.job_id);
        }
    }
    for (int i = 0; i < config_.workers; ++i) {
        threads_.emplace_back([this] { worker_loop(); });
    }
    cv_.notify_all();
}

void MappingService::stop() {
    {
        std::lock_guard lock(mutex_);
        stopping_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) {
        t.join();
    }
    threads_.clear();
}

std::pair<VideoInfo, bool> MappingService::register_video(std::string_view hsaf_bytes,
                                                          std::optional<double> duration_s,
                                                          const std::string& name) {
    auto header = decode_hsaf(hsaf_bytes);
    if (static_cast<int>(header.dim) != model_.config().feature_dim) {
        throw ValidationError("feature dimension " + std::to_string(header.dim) + " does not match the model (" +
                              std::to_string(model_.config().feature_dim) + ")");
    }
    return store_.register_video(hsaf_bytes, duration_s, name);
}

std::pair<MappingJob, bool> MappingService::create_job(const json& body) {
    if (!body.is_object()) {
        throw ValidationError("job request must be a JSON object");
    }
    MappingJob job;
    try {
        job.request.video_id = body.at("video_id").get<std::string>();
        job.request.task_id = body.at("task_id").get<int>();
        if (auto it = body.find("step_filter"); it != body.end() && !it->is_null()) {
            job.request.step_filter = normalize_name(it->get<std::string>());
        }
        if (auto it = body.find("fine_window_s"); it != body.end() && !it->is_null()) {
            job.request.fine_window_s = it->get<double>();
        }
        if (auto it = body.find("idempotency_key"); it != body.end() && !it->is_null()) {
            job.idempotency_key = it->get<std::string>();
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad job request: ") + e.what());
    }
    store_.video(job.request.video_id);
    job.request.validate();
    try {
        taxonomy_.schema_for_task(job.request.task_id);
    } catch (const NotFoundError& e) {
        throw ValidationError(e.what());
    }
    if (job.request.step_filter) {
        const auto* step = taxonomy_.schema_for_task(kCoarseTask).find_tag("step");
        if (step == nullptr || step->index_of(*job.request.step_filter) < 0) {
            throw ValidationError("unknown step filter '" + *job.request.step_filter + "'");
        }
    }

    std::lock_guard lock(mutex_);
    if (!job.idempotency_key.empty()) {
        if (auto it = idempotency_.find(job.idempotency_key); it != idempotency_.end()) {
            return {store_.job(it->second), false};
        }
    }
    job.job_id = new_uuid();
    job.status = JobStatus::queued;
    job.created_at = job.updated_at = utc_now();
    store_.save_job(job);
    if (!job.idempotency_key.empty()) {
        idempotency_.emplace(job.idempotency_key, job.job_id);
    }
    queue_.push_back(job.job_id);
    cv_.notify_all();
    return {job, true};
}

std::string MappingService::timeline(const std::string& video_id, int task_id) const {
    store_.video(video_id);
    return store_.timeline_bytes(video_id, task_id);
}

ordered_json MappingService::summary(const std::optional<std::string>& video_id) const {
    auto timelines = store_.timelines(video_id);
    std::vector<TimelineSegment> all;
    std::set<std::string> mapped;
    for (const auto& t : timelines) {
        mapped.insert(t.video_id);
        all.insert(all.end(), t.segments.begin(), t.segments.end());
    }
    ordered_json j;
    j["videos"] = mapped.size();
    j["timelines"] = timelines.size();
    const auto totals = summarize(all);
    for (auto it = totals.begin(); it != totals.end(); ++it) {
        j[it.key()] = it.value();
    }
    return j;
}

bool MappingService::wait_idle(std::chrono::milliseconds timeout) const {
    std::unique_lock lock(mutex_);
    return cv_.wait_for(lock, timeout, [&] { return queue_.empty() && active_ == 0; });
}

void MappingService::worker_loop() {
    for (;;) {
        std::string id;
        {
            std::unique_lock lock(mutex_);
            cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
            if (stopping_) {
                return;
            }
            id = queue_.front();
            queue_.pop_front();
            ++active_;
        }
        try {
            run_job(id);
        } catch (const std::exception& e) {
            spdlog::error("job {}: {}", id, e.what());
        }
        {
            std::lock_guard lock(mutex_);
            --active_;
        }
        cv_.notify_all();
    }
}

void MappingService::run_job(const std::string& job_id) {
    auto job = store_.job(job_id);
    if (job.status != JobStatus::queued) {
        return;
    }
    job.status = JobStatus::running;
    job.updated_at = utc_now();
    store_.save_job(job);
    spdlog::info("job {} running (video {}, task {})", job_id, job.request.video_id, job.request.task_id);

    if (config_.worker_delay_ms > 0) {
        std::unique_lock lock(mutex_);
        cv_.wait_for(lock, std::chrono::milliseconds(config_.worker_delay_ms), [&] { return stopping_; });
    }
    try {
        auto info = store_.video(job.request.video_id);
        auto features = store_.features(job.request.video_id);
        auto timeline = run_workflow(*predictor_, features, info.duration_s, job.request);
        auto report = check_containment(timeline);
        if (!report.ok()) {
            throw IntegrityError(report.violations.front());
        }
        job.result = store_.commit_timeline(job_id, timeline);
        job.status = JobStatus::done;
    } catch (const std::exception& e) {
        job.status = JobStatus::failed;
        job.failure = e.what();
        spdlog::warn("job {} failed: {}", job_id, e.what());
    }
    job.updated_at = utc_now();
    store_.save_job(job);
}

struct HttpServer::Impl {
    MappingService& service;
    httplib::Server server;

    explicit Impl(MappingService& s) : service(s) {}
};

namespace {

void send_json(httplib::Response& res, int status, const ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(2), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, status, {{"error", message}});
}

template <typename F>
auto guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const NotFoundError& e) {
            send_error(res, 404, e.what());
        } catch (const ValidationError& e) {
            send_error(res, 422, e.what());
        } catch (const FormatError& e) {
            send_error(res, 422, e.what());
        } catch (const json::exception& e) {
            send_error(res, 400, std::string("malformed JSON: ") + e.what());
        } catch (const std::exception& e) {
            send_error(res, 500, e.what());
        }
    };
}

std::optional<double> number_param(const httplib::Request& req, const char* key) {
    if (!req.has_param(key)) {
        return std::nullopt;
    }
    const auto text = req.get_param_value(key);
    try {
        std::size_t used = 0;
        double v = std::stod(text, &used);
        if (used != text.size()) {
            throw std::invalid_argument(text);
        }
        return v;
    } catch (const std::exception&) {
        throw ValidationError(std::string(key) + " must be a number, got '" + text + "'");
    }
}

} // namespace

HttpServer::HttpServer(MappingService& service) : impl_(std::make_unique<Impl>(service)) {
    auto& svr = impl_->server;
    auto& s = impl_->service;

    svr.Post("/videos", guarded([&s](const httplib::Request& req, httplib::Response& res) {
                 auto name = req.has_param("name") ? req.get_param_value("name") : std::string();
                 auto [info, created] = s.register_video(req.body, number_param(req, "duration_s"), name);
                 send_json(res, created ? 201 : 200, info.to_json());
             }));
    svr.Get("/videos", guarded([&s](const httplib::Request&, httplib::Response& res) {
                auto list = ordered_json::array();
                for (const auto& v : s.videos()) {
                    list.push_back(v.to_json());
                }
                send_json(res, 200, list);
            }));
    svr.Post("/jobs", guarded([&s](const httplib::Request& req, httplib::Response& res) {
                 auto [job, created] = s.create_job(json::parse(req.body));
                 send_json(res, created ? 202 : 200, job.to_json());
             }));
    svr.Get(R"(/jobs/([^/]+))", guarded([&s](const httplib::Request& req, httplib::Response& res) {
                send_json(res, 200, s.job(req.matches[1]).to_json());
            }));
    svr.Get(R"(/videos/([^/]+)/timeline)", guarded([&s](const httplib::Request& req, httplib::Response& res) {
                if (!req.has_param("task")) {
                    throw ValidationError("query parameter 'task' is required");
                }
                auto task = number_param(req, "task");
                if (*task != std::floor(*task)) {
                    throw ValidationError("task must be an integer");
                }
                res.status = 200;
                res.set_content(s.timeline(req.matches[1], static_cast<int>(*task)), "application/json");
            }));
    svr.Get("/summary", guarded([&s](const httplib::Request& req, httplib::Response& res) {
                std::optional<std::string> video;
                if (req.has_param("video_id")) {
                    video = req.get_param_value("video_id");
                }
                send_json(res, 200, s.summary(video));
            }));
}

HttpServer::~HttpServer() {
    stop();
}

int HttpServer::bind(const std::string& host, int port) {
    auto& svr = impl_->server;
    if (port == 0) {
        int bound = svr.bind_to_any_port(host);
        if (bound < 0) {
            throw IoError("cannot bind " + host);
        }
        return bound;
    }
    if (!svr.bind_to_port(host, port)) {
        throw IoError("cannot bind " + host + ":" + std::to_string(port));
    }
    return port;
}

void HttpServer::listen() {
    impl_->server.listen_after_bind();
}

void HttpServer::stop() {
    if (impl_) {
        impl_->server.stop();
    }
}

} // namespace surgimap
