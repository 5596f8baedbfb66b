#pragma once

// Job-running HTTP service for concept training and generation.
//
// Storage layout under the configured root:
//
//   jobs/<id>.json       job record (written via temp file + rename)
//   concepts/<id>.dcc    trained concept; the id is the finetune job id
//   results/<id>.png     generated image
//   inputs/<id>/         uploaded files of a job
//
// The filesystem is the source of truth: on start-up queued jobs are queued
// again in submission order and jobs left running are marked failed.

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "dcc/external_backbone.hpp"
#include "dcc/trainer.hpp"
#include "httplib.h"

namespace dcc::service {

struct Config {
  std::filesystem::path storage_root = "dcc-data";
  std::string backbone = "toy";
  std::string host = "127.0.0.1";
  int port = 8080;
  TrainConfig train;
  diffusion::SampleConfig sampling;
  double default_scale = 1.2;

  // Optional JSON file, then DCC_STORAGE_ROOT / DCC_BACKBONE / DCC_HOST /
  // DCC_PORT from the environment.
  static Config load(const std::optional<std::filesystem::path>& file) {
    Config c;
    if (file) {
      const auto bytes = read_file(*file);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
        if (j.contains("storage_root")) c.storage_root = j.at("storage_root").get<std::string>();
        if (j.contains("backbone")) c.backbone = j.at("backbone").get<std::string>();
        if (j.contains("host")) c.host = j.at("host").get<std::string>();
        if (j.contains("port")) c.port = j.at("port").get<int>();
        if (j.contains("steps")) c.sampling.steps = j.at("steps").get<int>();
        if (j.contains("cfg")) c.sampling.guidance = j.at("cfg").get<double>();
        if (j.contains("train_seed")) c.train.seed = j.at("train_seed").get<std::uint64_t>();
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(file->string() + ": " + e.what());
      }
    }
    if (const char* v = std::getenv("DCC_STORAGE_ROOT")) c.storage_root = v;
    if (const char* v = std::getenv("DCC_BACKBONE")) c.backbone = v;
    if (const char* v = std::getenv("DCC_HOST")) c.host = v;
    if (const char* v = std::getenv("DCC_PORT")) {
      try {
        c.port = std::stoi(v);
      } catch (const std::exception&) {
        throw std::invalid_argument("DCC_PORT is not a number: " + std::string(v));
      }
    }
    return c;
  }
};

enum class JobKind { finetune, generate };
enum class JobState { queued, running, done, failed };

inline std::string to_string(JobKind k) { return k == JobKind::finetune ? "finetune" : "generate"; }

inline std::string to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "?";
}

inline JobState job_state_from_string(const std::string& s) {
  if (s == "queued") return JobState::queued;
  if (s == "running") return JobState::running;
  if (s == "done") return JobState::done;
  if (s == "failed") return JobState::failed;
  throw FormatError("unknown job state '" + s + "'");
}

struct Job {
  std::string id;
  JobKind kind = JobKind::generate;
  JobState state = JobState::queued;
  std::uint64_t sequence = 0;  // submission order
  nlohmann::json request = nlohmann::json::object();
  std::vector<std::string> results;  // paths relative to the storage root
  std::int64_t created_ms = 0;
  std::int64_t started_ms = 0;
  std::int64_t finished_ms = 0;
  double progress = 0.0;
  std::string error;
  std::vector<std::pair<JobState, std::int64_t>> history;

  nlohmann::json to_json() const {
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& [s, t] : history) hist.push_back({{"state", to_string(s)}, {"at_ms", t}});
    nlohmann::json j = {{"id", id},
                        {"kind", to_string(kind)},
                        {"state", to_string(state)},
                        {"sequence", sequence},
                        {"request", request},
                        {"results", results},
                        {"created_ms", created_ms},
                        {"started_ms", started_ms},
                        {"finished_ms", finished_ms},
                        {"progress", progress},
                        {"history", hist}};
    if (!error.empty()) j["error"] = error;
    return j;
  }

  static Job from_json(const nlohmann::json& j) {
    Job job;
    job.id = j.at("id").get<std::string>();
    job.kind = j.at("kind").get<std::string>() == "finetune" ? JobKind::finetune : JobKind::generate;
    job.state = job_state_from_string(j.at("state").get<std::string>());
    job.sequence = j.value("sequence", std::uint64_t{0});
    job.request = j.value("request", nlohmann::json::object());
    job.results = j.value("results", std::vector<std::string>{});
    job.created_ms = j.value("created_ms", std::int64_t{0});
    job.started_ms = j.value("started_ms", std::int64_t{0});
    job.finished_ms = j.value("finished_ms", std::int64_t{0});
    job.progress = j.value("progress", 0.0);
    job.error = j.value("error", std::string());
    for (const auto& h : j.value("history", nlohmann::json::array()))
      job.history.emplace_back(job_state_from_string(h.at("state").get<std::string>()), h.at("at_ms").get<std::int64_t>());
    return job;
  }
};

// HTTP-facing failure with a status code.
struct ApiError : std::runtime_error {
  int status;
  ApiError(int s, const std::string& m) : std::runtime_error(m), status(s) {}
};

class Storage {
 public:
  explicit Storage(std::filesystem::path root) : root_(std::move(root)) {
    for (const char* d : {"jobs", "concepts", "results", "inputs"}) std::filesystem::create_directories(root_ / d);
  }

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path job_path(const std::string& id) const { return root_ / "jobs" / (id + ".json"); }
  std::filesystem::path concept_path(const std::string& id) const { return root_ / "concepts" / (id + ".dcc"); }
  std::filesystem::path result_path(const std::string& id) const { return root_ / "results" / (id + ".png"); }
  std::filesystem::path input_dir(const std::string& id) const { return root_ / "inputs" / id; }

  void save(const Job& job) const { write_file_atomic(job_path(job.id), job.to_json().dump(2)); }

  std::optional<Job> load(const std::string& id) const {
    if (!valid_id(id) || !std::filesystem::exists(job_path(id))) return std::nullopt;
    const auto bytes = read_file(job_path(id));
    return Job::from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
  }

  // All job records in submission order; unreadable records are skipped.
  std::vector<Job> list() const {
    std::vector<Job> jobs;
    for (const auto& e : std::filesystem::directory_iterator(root_ / "jobs")) {
      if (e.path().extension() != ".json") continue;
      try {
        const auto bytes = read_file(e.path());
        jobs.push_back(Job::from_json(nlohmann::json::parse(bytes.begin(), bytes.end())));
      } catch (const std::exception& ex) {
        log::warn("skipping unreadable job record " + e.path().string() + ": " + ex.what());
      }
    }
    std::sort(jobs.begin(), jobs.end(), [](const Job& a, const Job& b) {
      return std::tie(a.sequence, a.created_ms, a.id) < std::tie(b.sequence, b.created_ms, b.id);
    });
    return jobs;
  }

  static bool valid_id(const std::string& id) {
    return !id.empty() && id.size() <= 64 &&
           std::all_of(id.begin(), id.end(), [](unsigned char c) { return std::isalnum(c) || c == '-'; });
  }

 private:
  std::filesystem::path root_;
};

class Service {
 public:
  Service(Config config, std::shared_ptr<const Backbone> backbone)
      : config_(std::move(config)), backbone_(std::move(backbone)), storage_(config_.storage_root) {
    recover();
    worker_ = std::thread([this] { work(); });
  }

  ~Service() { stop(); }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  void stop() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      if (stopping_) return;
      stopping_ = true;
    }
    server_.stop();
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
    if (listener_.joinable()) listener_.join();
  }

  // Makes a blocking listen() return; jobs keep running until stop().
  void stop_listening() { server_.stop(); }

  const Config& config() const { return config_; }
  const Backbone& backbone() const { return *backbone_; }
  Storage& storage() { return storage_; }

  nlohmann::json public_config() const {
    const auto& info = backbone_->info();
    return {{"backbone", {{"family", info.family}, {"fingerprint", info.fingerprint()}, {"layers", info.layers.size()}}},
            {"image_size", info.image_size},
            {"sketch", {{"width", info.image_size}, {"height", info.image_size}, {"channels", 1},
                        {"polarity", "white strokes on black"}}},
            {"defaults", {{"scale", config_.default_scale},
                          {"steps", config_.sampling.steps},
                          {"cfg", config_.sampling.guidance},
                          {"finetune_steps", {{"identity", config_.train.identity_steps}, {"style", config_.train.style_steps}}}}}};
  }

  // ---- job submission -----------------------------------------------------

  struct FinetuneInput {
    std::vector<unsigned char> image;
    std::string superclass;
    std::string kind;
    std::optional<std::vector<unsigned char>> region_mask;
    std::optional<int> steps;
    std::optional<std::uint64_t> seed;
  };

  std::string submit_finetune(const FinetuneInput& in) {
    ConceptKind kind;
    try {
      kind = concept_kind_from_string(in.kind);
      backbone_->tokenizer().superclass_token(in.superclass);
    } catch (const std::exception& e) {
      throw ApiError(400, e.what());
    }
    if (in.steps && *in.steps < 1) throw ApiError(400, "steps must be >= 1");
    const Image image = decode_upload(in.image, "image");
    require_size(image, "image");
    if (in.region_mask) require_size(decode_upload(*in.region_mask, "region_mask"), "region_mask");

    Job job = new_job(JobKind::finetune);
    const auto dir = storage_.input_dir(job.id);
    std::filesystem::create_directories(dir);
    write_file_atomic(dir / "image.png", encode_png(image));
    job.request = {{"superclass", in.superclass}, {"kind", to_string(kind)}, {"image", "inputs/" + job.id + "/image.png"}};
    if (in.region_mask) {
      write_file_atomic(dir / "region_mask.png", encode_png(decode_upload(*in.region_mask, "region_mask")));
      job.request["region_mask"] = "inputs/" + job.id + "/region_mask.png";
    }
    if (in.steps) job.request["steps"] = *in.steps;
    job.request["seed"] = in.seed.value_or(config_.train.seed);
    return enqueue(std::move(job));
  }

  // JSON body; "sketch" may hold a base64 PNG, or sketch_bytes is supplied
  // from a multipart upload.
  std::string submit_generate(nlohmann::json body, std::optional<std::vector<unsigned char>> sketch_bytes = {}) {
    if (!body.is_object()) throw ApiError(400, "request body must be a JSON object");
    nlohmann::json req = nlohmann::json::object();
    try {
      const nlohmann::json concepts = body.value("concepts", nlohmann::json::object());
      const nlohmann::json scales = body.value("scales", nlohmann::json::object());
      const nlohmann::json sampling = body.value("sampling", nlohmann::json::object());
      auto pick = [&](const nlohmann::json& nested, const char* nested_key, const char* flat_key) -> nlohmann::json {
        if (nested.contains(nested_key)) return nested.at(nested_key);
        if (body.contains(flat_key)) return body.at(flat_key);
        return nullptr;
      };
      const auto id = pick(concepts, "identity", "identity");
      const auto style = pick(concepts, "style", "style");
      if (id.is_null() && style.is_null()) throw ApiError(400, "request names no concept (identity and/or style)");
      if (!id.is_null()) req["identity"] = concept_ready(id.get<std::string>());
      if (!style.is_null()) req["style"] = concept_ready(style.get<std::string>());
      if (auto v = pick(scales, "identity", "identity_scale"); !v.is_null()) req["identity_scale"] = v.get<double>();
      if (auto v = pick(scales, "style", "style_scale"); !v.is_null()) req["style_scale"] = v.get<double>();
      if (auto v = pick(sampling, "steps", "steps"); !v.is_null()) req["steps"] = v.get<int>();
      else req["steps"] = config_.sampling.steps;
      if (auto v = pick(sampling, "cfg", "cfg"); !v.is_null()) req["cfg"] = v.get<double>();
      else req["cfg"] = config_.sampling.guidance;
      if (auto v = pick(sampling, "seed", "seed"); !v.is_null()) req["seed"] = v.get<std::uint64_t>();
      else req["seed"] = 0;
      if (body.contains("prompt")) req["prompt"] = body.at("prompt").get<std::string>();
      if (body.contains("negative_prompt")) req["negative_prompt"] = body.at("negative_prompt").get<std::string>();
      if (!sketch_bytes && body.contains("sketch") && !body.at("sketch").is_null()) {
        std::string b64 = body.at("sketch").get<std::string>();
        if (auto comma = b64.find(','); b64.rfind("data:", 0) == 0 && comma != std::string::npos) b64 = b64.substr(comma + 1);
        sketch_bytes = base64_decode(b64);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ApiError(400, std::string("malformed generate request: ") + e.what());
    } catch (const ApiError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ApiError(400, e.what());
    }
    if (req["steps"].get<int>() < 1) throw ApiError(400, "steps must be >= 1");
    if (req["cfg"].get<double>() < 0) throw ApiError(400, "cfg must be >= 0");

    std::optional<Image> sketch;
    if (sketch_bytes) {
      sketch = decode_upload(*sketch_bytes, "sketch");
      require_size(*sketch, "sketch");
    }
    Job job = new_job(JobKind::generate);
    if (sketch) {
      const auto dir = storage_.input_dir(job.id);
      std::filesystem::create_directories(dir);
      write_file_atomic(dir / "sketch.png", *sketch_bytes);
      req["sketch"] = "inputs/" + job.id + "/sketch.png";
    }
    job.request = std::move(req);
    return enqueue(std::move(job));
  }

  std::optional<Job> job(const std::string& id) {
    std::lock_guard<std::mutex> lock(mutex_);
    return storage_.load(id);
  }

  nlohmann::json list_concepts() {
    std::lock_guard<std::mutex> lock(mutex_);
    nlohmann::json out = nlohmann::json::array();
    for (const auto& j : storage_.list()) {
      if (j.kind != JobKind::finetune) continue;
      nlohmann::json c = {{"id", j.id},
                          {"kind", j.request.value("kind", "")},
                          {"superclass", j.request.value("superclass", "")},
                          {"state", to_string(j.state)},
                          {"created_ms", j.created_ms}};
      if (j.state == JobState::done) c["default_scale"] = config_.default_scale;
      out.push_back(std::move(c));
    }
    return out;
  }

  // Blocks until the job leaves queued/running or the timeout expires.
  std::optional<Job> wait(const std::string& id, std::chrono::milliseconds timeout) {
    const auto until = std::chrono::steady_clock::now() + timeout;
    while (std::chrono::steady_clock::now() < until) {
      auto j = job(id);
      if (!j) return std::nullopt;
      if (j->state == JobState::done || j->state == JobState::failed) return j;
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    return job(id);
  }

  // ---- HTTP ---------------------------------------------------------------

  // Binds and serves on a background thread; returns the bound port
  // (pass port 0 to pick a free one).
  int listen_background(const std::string& host, int port) {
    routes();
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw std::runtime_error("could not bind " + host + ":" + std::to_string(port));
    listener_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound;
  }

  // Serves in the calling thread until stop().
  void listen(const std::string& host, int port) {
    routes();
    if (!server_.listen(host, port)) throw std::runtime_error("could not listen on " + host + ":" + std::to_string(port));
  }

 private:
  static Image decode_upload(const std::vector<unsigned char>& bytes, const std::string& field) {
    try {
      return decode_image(bytes);
    } catch (const std::exception& e) {
      throw ApiError(400, field + " is not a decodable PNG/JPEG: " + e.what());
    }
  }

  void require_size(const Image& img, const std::string& field) const {
    const int s = backbone_->info().image_size;
    if (img.width != s || img.height != s)
      throw ApiError(422, field + " is " + img.size_str() + "; expected " + std::to_string(s) + "x" + std::to_string(s));
  }

  std::string concept_ready(const std::string& id) {
    auto j = job(id);
    if (!j || j->kind != JobKind::finetune) throw ApiError(404, "unknown concept '" + id + "'");
    if (j->state == JobState::failed) throw ApiError(409, "concept '" + id + "' failed to train: " + j->error);
    if (j->state != JobState::done) throw ApiError(409, "concept '" + id + "' is not finished (state " + to_string(j->state) + ")");
    return id;
  }

  std::string fresh_id() {
    static std::atomic<std::uint64_t> counter{0};
    std::random_device rd;
    char buf[40];
    std::snprintf(buf, sizeof buf, "%011llx-%04llx-%08x", static_cast<unsigned long long>(unix_millis()),
                  static_cast<unsigned long long>(counter++ & 0xFFFF), rd());
    return buf;
  }

  Job new_job(JobKind kind) {
    Job j;
    j.id = fresh_id();
    j.kind = kind;
    j.created_ms = unix_millis();
    return j;
  }

  std::string enqueue(Job job) {
    const std::string id = job.id;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      job.sequence = ++sequence_;
      job.state = JobState::queued;
      job.history.emplace_back(JobState::queued, job.created_ms);
      storage_.save(job);
      queue_.push_back(job.id);
    }
    cv_.notify_one();
    return id;
  }

  void recover() {
    for (auto& j : storage_.list()) {
      sequence_ = std::max(sequence_, j.sequence);
      if (j.state == JobState::queued) {
        queue_.push_back(j.id);
      } else if (j.state == JobState::running) {
        j.state = JobState::failed;
        j.error = "interrupted: the service stopped while this job was running";
        j.finished_ms = unix_millis();
        j.history.emplace_back(JobState::failed, j.finished_ms);
        storage_.save(j);
      }
    }
    if (!queue_.empty()) log::info("re-queued " + std::to_string(queue_.size()) + " pending job(s)");
  }

  void update(const std::string& id, const std::function<void(Job&)>& f) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto j = storage_.load(id);
    if (!j) return;
    f(*j);
    storage_.save(*j);
  }

  void work() {
    for (;;) {
      std::string id;
      {
        std::unique_lock<std::mutex> lock(mutex_);
        cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
        if (stopping_) return;
        id = queue_.front();
        queue_.pop_front();
      }
      run(id);
    }
  }

  void run(const std::string& id) {
    std::optional<Job> job;
    update(id, [&](Job& j) {
      j.state = JobState::running;
      j.started_ms = unix_millis();
      j.history.emplace_back(JobState::running, j.started_ms);
      job = j;
    });
    if (!job) return;
    std::string stage = "setup";
    try {
      std::vector<std::string> results =
          job->kind == JobKind::finetune ? run_finetune(*job, stage) : run_generate(*job, stage);
      update(id, [&](Job& j) {
        j.state = JobState::done;
        j.results = results;
        j.progress = 1.0;
        j.finished_ms = unix_millis();
        j.history.emplace_back(JobState::done, j.finished_ms);
      });
    } catch (const std::exception& e) {
      log::error("job " + id + " failed during " + stage + ": " + e.what());
      update(id, [&](Job& j) {
        j.state = JobState::failed;
        j.error = stage + ": " + e.what();
        j.finished_ms = unix_millis();
        j.history.emplace_back(JobState::failed, j.finished_ms);
      });
    }
  }

  void report_progress(const std::string& id, double p) {
    update(id, [&](Job& j) { j.progress = p; });
  }

  std::vector<std::string> run_finetune(const Job& job, std::string& stage) {
    stage = "loading inputs";
    const auto& r = job.request;
    const Image image = read_image(storage_.root() / r.at("image").get<std::string>());
    std::optional<Image> region;
    if (r.contains("region_mask")) region = read_image(storage_.root() / r.at("region_mask").get<std::string>());
    TrainConfig cfg = config_.train;
    if (r.contains("steps")) cfg.steps = r.at("steps").get<int>();
    cfg.seed = r.value("seed", cfg.seed);
    stage = "fine-tuning";
    Concept c = finetune(image, r.at("superclass").get<std::string>(), concept_kind_from_string(r.at("kind").get<std::string>()),
                         *backbone_, cfg, region ? &*region : nullptr,
                         [&](int step, int total, const LossTerms&) { report_progress(job.id, double(step) / total); });
    c.default_scale = static_cast<float>(config_.default_scale);
    stage = "saving concept";
    save_concept(c, storage_.concept_path(job.id));
    return {"concepts/" + job.id + ".dcc"};
  }

  std::vector<std::string> run_generate(const Job& job, std::string& stage) {
    stage = "loading concepts";
    const auto& r = job.request;
    std::optional<Concept> id;
    std::optional<Concept> style;
    if (r.contains("identity")) id = load_concept(storage_.concept_path(r.at("identity").get<std::string>()), *backbone_);
    if (r.contains("style")) style = load_concept(storage_.concept_path(r.at("style").get<std::string>()), *backbone_);
    GenerateRequest g;
    g.identity = id ? &*id : nullptr;
    g.style = style ? &*style : nullptr;
    if (r.contains("identity_scale")) g.identity_scale = r.at("identity_scale").get<double>();
    if (r.contains("style_scale")) g.style_scale = r.at("style_scale").get<double>();
    g.sampling.steps = r.at("steps").get<int>();
    g.sampling.guidance = r.at("cfg").get<double>();
    g.sampling.negative_prompt = r.value("negative_prompt", std::string());
    g.seed = r.at("seed").get<std::uint64_t>();
    g.prompt = r.value("prompt", std::string());
    if (r.contains("sketch")) g.sketch = read_image(storage_.root() / r.at("sketch").get<std::string>());
    g.on_step = [&](int step, int total) { report_progress(job.id, double(step) / total); };
    stage = "sampling";
    const auto out = generate(*backbone_, g);
    stage = "writing result";
    write_png(storage_.result_path(job.id), out.image);
    return {"results/" + job.id + ".png"};
  }

  static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, status, {{"error", message}});
  }

  template <class F>
  static void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const ApiError& e) {
      send_error(res, e.status, e.what());
    } catch (const ResolutionMismatch& e) {
      send_error(res, 422, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  }

  void routes() {
    server_.Get("/config", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { send_json(res, 200, public_config()); });
    });

    server_.Get("/concepts", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { send_json(res, 200, list_concepts()); });
    });

    server_.Post("/concepts", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        if (!req.is_multipart_form_data()) throw ApiError(400, "POST /concepts expects multipart/form-data");
        auto field = [&](const char* k) -> std::optional<std::string> {
          if (!req.has_file(k)) return std::nullopt;
          return req.get_file_value(k).content;
        };
        FinetuneInput in;
        const auto image = field("image");
        const auto superclass = field("superclass");
        const auto kind = field("kind");
        if (!image || !superclass || !kind) throw ApiError(400, "multipart fields image, superclass and kind are required");
        in.image.assign(image->begin(), image->end());
        in.superclass = *superclass;
        in.kind = *kind;
        if (auto m = field("region_mask")) in.region_mask = std::vector<unsigned char>(m->begin(), m->end());
        try {
          if (auto s = field("steps")) in.steps = std::stoi(*s);
          if (auto s = field("seed")) in.seed = std::stoull(*s);
        } catch (const std::exception&) {
          throw ApiError(400, "steps and seed must be integers");
        }
        const auto id = submit_finetune(in);
        send_json(res, 202, {{"job_id", id}, {"concept_id", id}});
      });
    });

    server_.Post("/generate", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        nlohmann::json body;
        std::optional<std::vector<unsigned char>> sketch;
        try {
          if (req.is_multipart_form_data()) {
            if (!req.has_file("request")) throw ApiError(400, "multipart generate needs a 'request' JSON field");
            body = nlohmann::json::parse(req.get_file_value("request").content);
            if (req.has_file("sketch")) {
              const auto& c = req.get_file_value("sketch").content;
              sketch = std::vector<unsigned char>(c.begin(), c.end());
            }
          } else {
            body = nlohmann::json::parse(req.body);
          }
        } catch (const nlohmann::json::exception& e) {
          throw ApiError(400, std::string("request is not valid JSON: ") + e.what());
        }
        send_json(res, 202, {{"job_id", submit_generate(std::move(body), std::move(sketch))}});
      });
    });

    server_.Get(R"(/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        auto j = job(req.matches[1]);
        if (!j) throw ApiError(404, "unknown job '" + std::string(req.matches[1]) + "'");
        send_json(res, 200, j->to_json());
      });
    });

    server_.Get(R"(/results/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string id = req.matches[1];
        auto j = job(id);
        if (!j) throw ApiError(404, "unknown job '" + id + "'");
        if (j->state == JobState::failed) throw ApiError(404, "job failed: " + j->error);
        if (j->state != JobState::done) throw ApiError(404, "job is " + to_string(j->state) + "; no result yet");
        if (j->kind != JobKind::generate) throw ApiError(404, "job " + id + " is a finetune job; it has no image result");
        const auto bytes = read_file(storage_.result_path(id));
        res.status = 200;
        res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
      });
    });
  }

  Config config_;
  std::shared_ptr<const Backbone> backbone_;
  Storage storage_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::string> queue_;
  std::uint64_t sequence_ = 0;
  bool stopping_ = false;
  std::thread worker_;
  std::thread listener_;
  httplib::Server server_;
};

}  // namespace dcc::service
