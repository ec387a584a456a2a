#include "beatframe/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <string_view>

#include "beatframe/audio.hpp"
#include "beatframe/error.hpp"
#include "beatframe/prompt.hpp"
#include "httplib.h"
#include "json.hpp"

namespace beatframe::service {

using json = nlohmann::json;

namespace {

const std::regex kIdPattern("[0-9a-f]{16}");
const std::regex kCandidatePattern("s[0-9]+c[0-9]+");

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

std::string random_id() {
  static std::mutex mutex;
  static std::mt19937_64 gen{std::random_device{}() ^ static_cast<std::uint64_t>(now_seconds() * 1e6)};
  std::lock_guard lock(mutex);
  static const char* hex = "0123456789abcdef";
  std::string id(16, '0');
  std::uint64_t v = gen();
  for (auto& c : id) {
    c = hex[v & 0xF];
    v >>= 4;
  }
  return id;
}

bool valid_id(const std::string& id) { return std::regex_match(id, kIdPattern); }

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void sync_dir(const fs::path& dir) {
  const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
  if (fd >= 0) {
    ::fsync(fd);
    ::close(fd);
  }
}

// Write to a sibling temp file, fsync, rename over the target, fsync the directory.
void durable_write(const fs::path& path, std::string_view data) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.parent_path() / ("." + path.filename().string() + "." + random_id());
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw Error("cannot write " + tmp.string());
  std::size_t written = 0;
  while (written < data.size()) {
    const auto n = ::write(fd, data.data() + written, data.size() - written);
    if (n <= 0) {
      ::close(fd);
      fs::remove(tmp);
      throw Error("write failed: " + tmp.string());
    }
    written += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
  fs::rename(tmp, path);
  sync_dir(path.parent_path());
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(2) + "\n", "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message, json detail = json::array()) {
  send_json(res, status, {{"error", message}, {"detail", std::move(detail)}});
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception&) {
    throw ValidationError("request body is not valid JSON");
  }
}

// Maps library exceptions onto status codes.
void guarded(httplib::Response& res, const std::function<void()>& body) {
  try {
    body();
  } catch (const pipeline::EditError& e) {
    json detail = json::array();
    for (auto i : e.offending()) detail.push_back({{"index", i}, {"message", e.what()}});
    send_json(res, 422, {{"error", e.what()}, {"detail", detail}, {"offending", e.offending()}});
  } catch (const ValidationError& e) {
    send_error(res, 422, e.what());
  } catch (const FormatError& e) {
    send_error(res, 422, e.what());
  } catch (const DecodeError& e) {
    send_error(res, 422, e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, e.what());
  }
}

std::string violation_kind(prompt::ViolationKind k) {
  switch (k) {
    case prompt::ViolationKind::kUnknownCategory:
      return "unknown_category";
    case prompt::ViolationKind::kUnknownKeyword:
      return "unknown_keyword";
    case prompt::ViolationKind::kDuplicateCategory:
      return "duplicate_category";
    case prompt::ViolationKind::kDuplicateKeyword:
      return "duplicate_keyword";
  }
  return "invalid";
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

// Per-field detail: the offending entry is the last one naming the violation's category.
json keyword_detail(const std::vector<prompt::KeywordChoice>& selection, const std::vector<prompt::Violation>& v) {
  json detail = json::array();
  for (const auto& violation : v) {
    std::size_t index = selection.size();
    for (std::size_t i = 0; i < selection.size(); ++i) {
      if (lower(selection[i].category) != lower(violation.category)) continue;
      if (violation.kind != prompt::ViolationKind::kUnknownCategory && violation.kind != prompt::ViolationKind::kDuplicateCategory &&
          lower(selection[i].keyword) != lower(violation.keyword)) {
        continue;
      }
      index = i;
    }
    const bool on_category = violation.kind == prompt::ViolationKind::kUnknownCategory ||
                             violation.kind == prompt::ViolationKind::kDuplicateCategory;
    std::string field = "keywords";
    if (index < selection.size()) field += "[" + std::to_string(index) + "]." + (on_category ? "category" : "keyword");
    detail.push_back({{"field", field},
                      {"kind", violation_kind(violation.kind)},
                      {"category", violation.category},
                      {"keyword", violation.keyword},
                      {"message", violation.message}});
  }
  return detail;
}

std::vector<prompt::KeywordChoice> keywords_from_body(const json& body) {
  if (!body.is_object() || !body.contains("keywords") || !body.at("keywords").is_array()) {
    throw ValidationError("body must be {\"keywords\": [{\"category\", \"keyword\"}, ...]}");
  }
  std::vector<prompt::KeywordChoice> out;
  for (const auto& k : body.at("keywords")) {
    if (!k.is_object() || !k.contains("category") || !k.contains("keyword") || !k.at("category").is_string() ||
        !k.at("keyword").is_string()) {
      throw ValidationError("keywords[" + std::to_string(out.size()) + "] needs string category and keyword");
    }
    out.push_back({k.at("category").get<std::string>(), k.at("keyword").get<std::string>()});
  }
  return out;
}

void merge_dirty(std::vector<std::string>& dirty, const std::vector<std::string>& more) {
  static const std::vector<std::string> kOrder = {"prompt", "plan", "keyframes", "compose"};
  std::set<std::string> all(dirty.begin(), dirty.end());
  all.insert(more.begin(), more.end());
  dirty.clear();
  for (const auto& s : kOrder) {
    if (all.count(s) != 0) dirty.push_back(s);
  }
}

std::string project_url(const std::string& id) { return "/projects/" + id; }

json project_view(const ProjectRecord& r) {
  const auto& p = r.project;
  json kw = json::array();
  for (const auto& k : p.keywords) kw.push_back({{"category", k.category}, {"keyword", k.keyword}});
  json lines = json::array();
  for (const auto& l : p.lines) {
    lines.push_back({{"start", l.start}, {"text", l.text}, {"previous", l.previous}, {"prompt", l.prompt}});
  }
  json segments = json::array();
  for (std::size_t i = 0; i < p.segments.size(); ++i) {
    const auto& s = p.segments[i];
    json cands = json::array();
    for (const auto& c : s.candidates) {
      json thumbs = json::array();
      for (std::size_t k = 0; k < c.digests.size(); ++k) {
        thumbs.push_back(project_url(p.id) + "/segments/" + std::to_string(i) + "/candidates/" + c.id + "/keyframes/" +
                         std::to_string(k));
      }
      cands.push_back({{"id", c.id}, {"nsfw", c.nsfw}, {"digests", c.digests}, {"thumbnails", thumbs}});
    }
    segments.push_back({{"index", i},
                        {"start", s.start},
                        {"end", s.end},
                        {"transition", s.transition},
                        {"weights", s.weights},
                        {"chosen", s.chosen},
                        {"candidates", cands}});
  }
  const bool rendered = !p.video_path.empty() && fs::exists(p.video_path);
  return {{"id", p.id},
          {"original_name", r.original_name},
          {"created_at", r.created_at},
          {"duration", p.duration},
          {"seed", p.seed},
          {"keywords", kw},
          {"generated", p.generated()},
          {"lines", lines},
          {"segments", segments},
          {"order", p.order},
          {"dirty", r.dirty_stages},
          {"active_job", r.active_job.empty() ? json(nullptr) : json(r.active_job)},
          {"video", rendered ? json(project_url(p.id) + "/video") : json(nullptr)},
          {"subtitles", rendered ? json(project_url(p.id) + "/subtitles") : json(nullptr)}};
}

json taxonomy_json() {
  json cats = json::array();
  for (const auto& c : prompt::keyword_catalog().categories()) {
    json kws = json::array();
    for (const auto& k : c.keywords) kws.push_back(k.text);
    cats.push_back({{"name", c.name}, {"keywords", kws}});
  }
  return {{"categories", cats}};
}

void map_paths(pipeline::Project& p, const std::function<fs::path(const fs::path&)>& f) {
  for (fs::path* path : {&p.audio_path, &p.output_dir, &p.video_path, &p.subtitles_path, &p.manifest_path}) {
    if (!path->empty()) *path = f(*path);
  }
  for (auto& s : p.segments) {
    for (auto& c : s.candidates) {
      if (!c.artifact.empty()) c.artifact = f(c.artifact);
    }
  }
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void ServiceConfig::validate() const {
  if (port < 0 || port > 65535) throw ValidationError("port must lie in [0, 65535]");
  if (workers == 0) throw ValidationError("workers must be at least 1");
  if (data_dir.empty()) throw ValidationError("data_dir is required");
  if (max_upload_bytes == 0) throw ValidationError("max_upload_bytes must be positive");
  if (!(max_audio_seconds > 0.0)) throw ValidationError("max_audio_seconds must be positive");
  backend.validate();
  pipeline.validate();
}

ServiceConfig ServiceConfig::from_json(const std::string& text) {
  static const std::set<std::string> kKeys = {"host",       "port",           "data_dir",         "workers",
                                              "backend",    "checkpoint",     "webui_dir",        "max_upload_bytes",
                                              "max_audio_seconds", "pipeline"};
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("service config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("service config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (kKeys.count(key) == 0) throw FormatError("unknown service config key '" + key + "'");
  }
  ServiceConfig c;
  try {
    read_if(j, "host", c.host);
    read_if(j, "port", c.port);
    if (j.contains("data_dir")) c.data_dir = j.at("data_dir").get<std::string>();
    read_if(j, "workers", c.workers);
    if (j.contains("checkpoint")) c.checkpoint = j.at("checkpoint").get<std::string>();
    if (j.contains("webui_dir")) c.webui_dir = j.at("webui_dir").get<std::string>();
    read_if(j, "max_upload_bytes", c.max_upload_bytes);
    read_if(j, "max_audio_seconds", c.max_audio_seconds);
    if (j.contains("backend")) {
      const auto& b = j.at("backend");
      if (b.contains("kind")) {
        const auto kind = b.at("kind").get<std::string>();
        if (kind == "stub") {
          c.backend.kind = backend::BackendKind::kStub;
        } else if (kind == "remote") {
          c.backend.kind = backend::BackendKind::kRemote;
        } else {
          throw FormatError("backend.kind must be 'stub' or 'remote'");
        }
      }
      read_if(b, "endpoint", c.backend.endpoint);
      read_if(b, "api_key", c.backend.api_key);
      read_if(b, "timeout_seconds", c.backend.timeout_seconds);
      read_if(b, "max_in_flight", c.backend.max_in_flight);
      read_if(b, "max_attempts", c.backend.max_attempts);
      read_if(b, "embedding_dim", c.backend.embedding_dim);
      read_if(b, "latent_shape", c.backend.latent_shape);
      read_if(b, "image_width", c.backend.image_width);
      read_if(b, "image_height", c.backend.image_height);
    }
    if (j.contains("pipeline")) {
      const auto& p = j.at("pipeline");
      read_if(p, "clip_seconds", c.pipeline.clip_seconds);
      read_if(p, "min_clip_seconds", c.pipeline.min_clip_seconds);
      read_if(p, "alternatives", c.pipeline.alternatives);
      read_if(p, "fps", c.pipeline.timeline.fps);
      read_if(p, "keyframes_per_transition", c.pipeline.timeline.keyframes_per_transition);
      read_if(p, "burn_subtitles", c.pipeline.burn_subtitles);
      read_if(p, "couple_lyrics_to_order", c.pipeline.couple_lyrics_to_order);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("service config: ") + e.what());
  }
  return c;
}

ServiceConfig ServiceConfig::load(const fs::path& path) {
  auto c = from_json(read_text(path));
  const auto base = path.parent_path();
  for (fs::path* p : {&c.data_dir, &c.checkpoint, &c.webui_dir}) {
    if (!p->empty() && p->is_relative()) *p = base / *p;
  }
  return c;
}

void apply_env_overrides(ServiceConfig& config, const EnvLookup& lookup) {
  const auto get = [&](const char* name) -> const char* {
    const char* v = lookup ? lookup(name) : std::getenv(name);
    return (v != nullptr && *v != '\0') ? v : nullptr;
  };
  if (const char* v = get("BEATFRAME_HOST")) config.host = v;
  if (const char* v = get("BEATFRAME_PORT")) {
    try {
      config.port = std::stoi(v);
    } catch (const std::exception&) {
      throw ValidationError(std::string("BEATFRAME_PORT is not a number: ") + v);
    }
  }
  if (const char* v = get("BEATFRAME_DATA_DIR")) config.data_dir = v;
  if (const char* v = get("BEATFRAME_WORKERS")) {
    try {
      config.workers = static_cast<std::size_t>(std::stoul(v));
    } catch (const std::exception&) {
      throw ValidationError(std::string("BEATFRAME_WORKERS is not a number: ") + v);
    }
  }
  if (const char* v = get("BEATFRAME_BACKEND")) {
    const std::string kind = v;
    if (kind == "stub") {
      config.backend.kind = backend::BackendKind::kStub;
    } else if (kind == "remote") {
      config.backend.kind = backend::BackendKind::kRemote;
    } else {
      throw ValidationError("BEATFRAME_BACKEND must be 'stub' or 'remote'");
    }
  }
  if (const char* v = get("BEATFRAME_BACKEND_URL")) config.backend.endpoint = v;
  if (const char* v = get("BEATFRAME_BACKEND_KEY")) config.backend.api_key = v;
  if (const char* v = get("BEATFRAME_CHECKPOINT")) config.checkpoint = v;
  if (const char* v = get("BEATFRAME_WEBUI_DIR")) config.webui_dir = v;
}

std::string to_string(JobState state) {
  switch (state) {
    case JobState::kQueued:
      return "queued";
    case JobState::kRunning:
      return "running";
    case JobState::kDone:
      return "done";
    case JobState::kFailed:
      return "failed";
  }
  return "failed";
}

JobState job_state_from(const std::string& text) {
  if (text == "queued") return JobState::kQueued;
  if (text == "running") return JobState::kRunning;
  if (text == "done") return JobState::kDone;
  if (text == "failed") return JobState::kFailed;
  throw FormatError("unknown job state '" + text + "'");
}

std::string Job::to_json() const {
  json stats = json::object();
  for (const auto& [name, s] : stages) stats[name] = {{"hits", s.hits}, {"runs", s.runs}};
  return json{{"id", id},
              {"project_id", project_id},
              {"state", to_string(state)},
              {"stage", stage.empty() ? json(nullptr) : json(stage)},
              {"diagnostic", diagnostic.empty() ? json(nullptr) : json(diagnostic)},
              {"progress", progress},
              {"created_at", created_at},
              {"started_at", started_at},
              {"finished_at", finished_at},
              {"stages", stats}}
             .dump(2) +
         "\n";
}

Job Job::from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    Job job;
    job.id = j.at("id");
    job.project_id = j.at("project_id");
    job.state = job_state_from(j.at("state"));
    if (!j.at("stage").is_null()) job.stage = j.at("stage");
    if (!j.at("diagnostic").is_null()) job.diagnostic = j.at("diagnostic");
    job.progress = j.at("progress");
    job.created_at = j.at("created_at");
    job.started_at = j.at("started_at");
    job.finished_at = j.at("finished_at");
    for (const auto& [name, s] : j.at("stages").items()) job.stages[name] = {s.at("hits"), s.at("runs")};
    return job;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed job: ") + e.what());
  }
}

std::string ProjectRecord::to_json() const {
  return json{{"project", json::parse(project.to_json())},
              {"original_name", original_name},
              {"dirty_stages", dirty_stages},
              {"active_job", active_job},
              {"created_at", created_at}}
             .dump(2) +
         "\n";
}

ProjectRecord ProjectRecord::from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    ProjectRecord r;
    r.project = pipeline::Project::from_json(j.at("project").dump());
    r.original_name = j.at("original_name");
    r.dirty_stages = j.at("dirty_stages").get<std::vector<std::string>>();
    r.active_job = j.at("active_job");
    r.created_at = j.at("created_at");
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed project record: ") + e.what());
  }
}

std::string sniff_audio_format(std::string_view b) {
  if (b.size() >= 12 && b.substr(0, 4) == "RIFF" && b.substr(8, 4) == "WAVE") return "wav";
  if (b.size() >= 3 && b.substr(0, 3) == "ID3") return "mp3";
  if (b.size() >= 2 && static_cast<unsigned char>(b[0]) == 0xFF && (static_cast<unsigned char>(b[1]) & 0xE0) == 0xE0) {
    // MPEG audio frame sync with layer bits set.
    if ((static_cast<unsigned char>(b[1]) & 0x06) != 0) return "mp3";
  }
  return "";
}

Service::Service(ServiceConfig config, ServiceDeps deps) : config_(std::move(config)) {
  config_.validate();
  config_.data_dir = fs::absolute(config_.data_dir).lexically_normal();
  fs::create_directories(config_.data_dir / "projects");
  fs::create_directories(config_.data_dir / "jobs");
  cache_ = std::make_unique<pipeline::StageCache>(config_.data_dir / "cache");
  if (deps.backend != nullptr) {
    backend_ = deps.backend;
  } else {
    owned_backend_ = backend::make_backend(config_.backend);
    backend_ = owned_backend_.get();
  }
  if (deps.model != nullptr) {
    model_ = deps.model;
  } else if (config_.checkpoint.empty()) {
    owned_model_ = std::make_unique<lyrics::LyricModel>(pipeline::toy_lyric_model());
    model_ = owned_model_.get();
  } else {
    owned_model_ = std::make_unique<lyrics::LyricModel>(lyrics::LyricModel::load(config_.checkpoint));
    model_ = owned_model_.get();
  }
  recover();
  server_ = std::make_unique<httplib::Server>();
  install_routes();
  for (std::size_t i = 0; i < config_.workers; ++i) workers_.emplace_back([this] { worker_loop(); });
}

Service::~Service() { stop(); }

fs::path Service::project_dir(const std::string& id) const { return config_.data_dir / "projects" / id; }
fs::path Service::project_file(const std::string& id) const { return project_dir(id) / "project.json"; }
fs::path Service::job_file(const std::string& id) const { return config_.data_dir / "jobs" / (id + ".json"); }

// Paths inside data_dir are stored relative to it so the directory can move.
std::string Service::stored_json(ProjectRecord record) const {
  map_paths(record.project, [&](const fs::path& p) {
    const auto rel = p.lexically_relative(config_.data_dir);
    return (rel.empty() || *rel.begin() == "..") ? p : rel;
  });
  return record.to_json();
}

std::optional<ProjectRecord> Service::read_project(const std::string& id) const {
  if (!valid_id(id)) return std::nullopt;
  const auto path = project_file(id);
  if (!fs::exists(path)) return std::nullopt;
  auto record = ProjectRecord::from_json(read_text(path));
  map_paths(record.project, [&](const fs::path& p) { return p.is_relative() ? config_.data_dir / p : p; });
  return record;
}

void Service::write_project(const ProjectRecord& record) const {
  durable_write(project_file(record.project.id), stored_json(record));
}

void Service::write_job(const Job& job) const { durable_write(job_file(job.id), job.to_json()); }

std::shared_ptr<std::mutex> Service::project_lock(const std::string& id) {
  std::lock_guard lock(locks_mutex_);
  auto& m = locks_[id];
  if (!m) m = std::make_shared<std::mutex>();
  return m;
}

std::optional<Job> Service::find_job(const std::string& id) {
  std::lock_guard lock(jobs_mutex_);
  const auto it = jobs_.find(id);
  if (it == jobs_.end()) return std::nullopt;
  return it->second;
}

void Service::update_job(const std::string& id, const std::function<void(Job&)>& change) {
  std::lock_guard lock(jobs_mutex_);
  auto& job = jobs_.at(id);
  change(job);
  write_job(job);
}

// Jobs interrupted by a restart fail; projects stop pointing at them.
void Service::recover() {
  for (const auto& entry : fs::directory_iterator(config_.data_dir / "jobs")) {
    if (entry.path().extension() != ".json" || entry.path().filename().string().front() == '.') continue;
    Job job = Job::from_json(read_text(entry.path()));
    if (job.active()) {
      job.diagnostic = "service restarted while the job was " + to_string(job.state);
      job.state = JobState::kFailed;
      job.finished_at = now_seconds();
      write_job(job);
    }
    jobs_[job.id] = job;
  }
  for (const auto& entry : fs::directory_iterator(config_.data_dir / "projects")) {
    const auto id = entry.path().filename().string();
    auto record = read_project(id);
    if (!record || record->active_job.empty()) continue;
    const auto it = jobs_.find(record->active_job);
    if (it == jobs_.end() || !it->second.active()) {
      record->active_job.clear();
      write_project(*record);
    }
  }
}

int Service::start() {
  if (config_.port == 0) {
    port_ = server_->bind_to_any_port(config_.host);
  } else {
    port_ = server_->bind_to_port(config_.host, config_.port) ? config_.port : -1;
  }
  if (port_ < 0) throw Error("cannot bind " + config_.host + ":" + std::to_string(config_.port));
  listener_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void Service::run() {
  if (config_.port == 0) {
    port_ = server_->bind_to_any_port(config_.host);
  } else {
    port_ = server_->bind_to_port(config_.host, config_.port) ? config_.port : -1;
  }
  if (port_ < 0) throw Error("cannot bind " + config_.host + ":" + std::to_string(config_.port));
  server_->listen_after_bind();
}

void Service::stop() {
  if (server_) server_->stop();
  if (listener_.joinable()) listener_.join();
  {
    std::lock_guard lock(jobs_mutex_);
    stopping_ = true;
  }
  jobs_cv_.notify_all();
  for (auto& w : workers_) {
    if (w.joinable()) w.join();
  }
  workers_.clear();
}

void Service::wait_idle() {
  std::unique_lock lock(jobs_mutex_);
  idle_cv_.wait(lock, [this] { return queue_.empty() && busy_ == 0; });
}

void Service::worker_loop() {
  for (;;) {
    std::string id;
    {
      std::unique_lock lock(jobs_mutex_);
      jobs_cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      id = queue_.front();
      queue_.pop_front();
      ++busy_;
    }
    execute(id);
    {
      std::lock_guard lock(jobs_mutex_);
      --busy_;
    }
    idle_cv_.notify_all();
  }
}

void Service::execute(const std::string& job_id) {
  std::string project_id;
  update_job(job_id, [&](Job& j) {
    j.state = JobState::kRunning;
    j.stage = "lyric";
    j.started_at = now_seconds();
    project_id = j.project_id;
  });

  std::optional<pipeline::PipelineResult> result;
  std::string failure;
  try {
    pipeline::Project snapshot;
    {
      const auto lock = project_lock(project_id);
      std::lock_guard guard(*lock);
      const auto record = read_project(project_id);
      if (!record) throw Error("project " + project_id + " disappeared");
      snapshot = record->project;
    }
    pipeline::Environment env;
    env.cache = cache_.get();
    env.backend = backend_;
    env.model = model_;
    env.on_progress = [&](const pipeline::Progress& p) {
      std::lock_guard lock(jobs_mutex_);
      auto& j = jobs_.at(job_id);
      // 1.0 is reserved for the done state, which follows persistence.
      j.progress = std::max(j.progress, std::min(p.fraction, 0.99));
      if (p.stage != "done" && p.stage != j.stage) {
        j.stage = p.stage;
        write_job(j);
      }
    };
    result = pipeline::run_pipeline(snapshot, env);
  } catch (const std::exception& e) {
    failure = e.what();
  }

  {
    const auto lock = project_lock(project_id);
    std::lock_guard guard(*lock);
    if (auto record = read_project(project_id)) {
      if (result) {
        record->project = result->project;
        record->dirty_stages.clear();
      }
      record->active_job.clear();
      write_project(*record);
    }
  }
  update_job(job_id, [&](Job& j) {
    j.finished_at = now_seconds();
    if (result) {
      j.state = JobState::kDone;
      j.stage.clear();
      j.progress = 1.0;
      j.stages = result->report.stages;
    } else {
      j.state = JobState::kFailed;
      j.diagnostic = failure;
    }
  });
}

void Service::install_routes() {
  auto& s = *server_;
  s.set_payload_max_length(config_.max_upload_bytes + (1u << 20));
  if (!config_.webui_dir.empty()) {
    if (!s.set_mount_point("/", config_.webui_dir.string())) {
      throw ValidationError("webui_dir " + config_.webui_dir.string() + " is not a directory");
    }
  }
  s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    } catch (...) {
      send_error(res, 500, "unknown error");
    }
  });

  const auto not_found = [](httplib::Response& res, const std::string& what) {
    send_error(res, 404, "unknown " + what);
  };

  s.Get("/keywords", [](const httplib::Request&, httplib::Response& res) { send_json(res, 200, taxonomy_json()); });

  s.Get("/projects", [this](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      json ids = json::array();
      for (const auto& e : fs::directory_iterator(config_.data_dir / "projects")) {
        const auto id = e.path().filename().string();
        if (valid_id(id) && fs::exists(project_file(id))) ids.push_back(id);
      }
      std::vector<std::string> sorted = ids.get<std::vector<std::string>>();
      std::sort(sorted.begin(), sorted.end());
      send_json(res, 200, {{"projects", sorted}});
    });
  });

  s.Post("/projects", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!req.is_multipart_form_data() || !req.has_file("audio")) {
        send_error(res, 422, "expected a multipart upload with an 'audio' file",
                   json::array({{{"field", "audio"}, {"message", "missing"}}}));
        return;
      }
      const auto file = req.get_file_value("audio");
      if (file.content.size() > config_.max_upload_bytes) {
        send_error(res, 413, "upload exceeds " + std::to_string(config_.max_upload_bytes) + " bytes");
        return;
      }
      const auto format = sniff_audio_format(file.content);
      if (format.empty()) {
        send_error(res, 415, "only WAV and MP3 audio are accepted",
                   json::array({{{"field", "audio"}, {"message", "not a WAV or MP3 file"}}}));
        return;
      }
      std::uint64_t seed = 0;
      if (req.has_file("seed")) {
        try {
          seed = std::stoull(req.get_file_value("seed").content);
        } catch (const std::exception&) {
          send_error(res, 422, "seed must be a non-negative integer",
                     json::array({{{"field", "seed"}, {"message", "not an integer"}}}));
          return;
        }
      }
      const std::string id = random_id();
      const auto dir = project_dir(id);
      const auto staging = config_.data_dir / "projects" / (".upload-" + id);
      fs::create_directories(staging);
      const auto audio_path = staging / ("audio." + format);
      try {
        durable_write(audio_path, file.content);
        double duration = 0.0;
        try {
          duration = audio::load_audio(audio_path).duration_seconds();
        } catch (const Error& e) {
          fs::remove_all(staging);
          send_error(res, 422, std::string("cannot decode audio: ") + e.what(),
                     json::array({{{"field", "audio"}, {"message", e.what()}}}));
          return;
        }
        if (duration > config_.max_audio_seconds || duration <= 0.0) {
          fs::remove_all(staging);
          send_error(res, 422, "audio must be between 0 and " + std::to_string(config_.max_audio_seconds) + " s long",
                     json::array({{{"field", "audio"}, {"message", "duration " + std::to_string(duration) + " s"}}}));
          return;
        }
        ProjectRecord record;
        record.project.id = id;
        record.project.audio_path = dir / audio_path.filename();
        record.project.seed = seed;
        record.project.config = config_.pipeline;
        record.project.duration = duration;
        record.project.output_dir = dir / "out";
        record.original_name = file.filename;
        record.created_at = now_seconds();
        durable_write(staging / "project.json", stored_json(record));
        fs::rename(staging, dir);
        sync_dir(dir.parent_path());
        send_json(res, 201, project_view(record));
      } catch (...) {
        std::error_code ec;
        fs::remove_all(staging, ec);
        throw;
      }
    });
  });

  s.Get(R"(/projects/([^/]+))", [this, not_found](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto record = read_project(req.matches[1]);
      if (!record) return not_found(res, "project");
      send_json(res, 200, project_view(*record));
    });
  });

  // Shared shape of the mutating endpoints: lock, load, refuse while a job runs, change, persist, respond.
  const auto mutate = [this, not_found](const httplib::Request& req, httplib::Response& res,
                                        const std::function<void(ProjectRecord&)>& change) {
    guarded(res, [&] {
      const std::string id = req.matches[1];
      if (!valid_id(id)) return not_found(res, "project");
      const auto lock = project_lock(id);
      std::lock_guard guard(*lock);
      auto record = read_project(id);
      if (!record) return not_found(res, "project");
      if (!record->active_job.empty()) {
        send_json(res, 409, {{"error", "a generation job is active for this project"},
                             {"detail", json::array()},
                             {"job", record->active_job}});
        return;
      }
      change(*record);
      if (res.status >= 400) return;
      write_project(*record);
      send_json(res, 200, project_view(*record));
    });
  };

  s.Put(R"(/projects/([^/]+)/keywords)", [mutate](const httplib::Request& req, httplib::Response& res) {
    mutate(req, res, [&](ProjectRecord& r) {
      const auto selection = keywords_from_body(parse_body(req));
      if (const auto v = prompt::validate_keywords(selection); !v.empty()) {
        send_error(res, 422, "invalid keyword selection", keyword_detail(selection, v));
        return;
      }
      // Store catalog spelling.
      std::vector<prompt::KeywordChoice> canonical;
      for (const auto& k : selection) {
        const auto* cat = prompt::keyword_catalog().find_category(k.category);
        canonical.push_back({cat->name, prompt::keyword_catalog().find_keyword(k.category, k.keyword)->text});
      }
      const auto key = [](const std::vector<prompt::KeywordChoice>& v) {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& k : v) out.emplace_back(k.category, k.keyword);
        std::sort(out.begin(), out.end());
        return out;
      };
      if (key(canonical) != key(r.project.keywords) && r.project.generated()) {
        merge_dirty(r.dirty_stages, {"prompt", "plan", "keyframes", "compose"});
      }
      r.project.keywords = canonical;
    });
  });

  s.Put(R"(/projects/([^/]+)/order)", [mutate](const httplib::Request& req, httplib::Response& res) {
    mutate(req, res, [&](ProjectRecord& r) {
      if (!r.project.generated()) {
        send_error(res, 409, "project has not been generated yet");
        return;
      }
      const auto body = parse_body(req);
      if (!body.is_object() || !body.contains("order") || !body.at("order").is_array()) {
        throw ValidationError("body must be {\"order\": [..]}");
      }
      std::vector<std::size_t> order;
      std::vector<std::size_t> bad;
      for (std::size_t i = 0; i < body.at("order").size(); ++i) {
        const auto& v = body.at("order")[i];
        if (v.is_number_integer() && v.get<long long>() >= 0) {
          order.push_back(v.get<std::size_t>());
        } else {
          order.push_back(r.project.segments.size());
          bad.push_back(i);
        }
      }
      if (!bad.empty()) throw pipeline::EditError("order entries must be non-negative integers", bad);
      auto outcome = pipeline::apply_edit(r.project, pipeline::Reorder{order});
      r.project = std::move(outcome.project);
      merge_dirty(r.dirty_stages, outcome.dirty_stages);
    });
  });

  s.Put(R"(/projects/([^/]+)/segments/(\d+)/choice)", [mutate](const httplib::Request& req, httplib::Response& res) {
    mutate(req, res, [&](ProjectRecord& r) {
      if (!r.project.generated()) {
        send_error(res, 409, "project has not been generated yet");
        return;
      }
      const std::size_t segment = std::stoul(req.matches[2]);
      if (segment >= r.project.segments.size()) {
        send_error(res, 404, "unknown segment " + std::to_string(segment));
        return;
      }
      const auto body = parse_body(req);
      if (!body.is_object() || !body.contains("candidate") || !body.at("candidate").is_string()) {
        throw ValidationError("body must be {\"candidate\": \"<id>\"}");
      }
      auto outcome = pipeline::apply_edit(r.project, pipeline::Substitute{segment, body.at("candidate")});
      r.project = std::move(outcome.project);
      merge_dirty(r.dirty_stages, outcome.dirty_stages);
    });
  });

  s.Post(R"(/projects/([^/]+)/generate)", [this, not_found](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string id = req.matches[1];
      if (!valid_id(id)) return not_found(res, "project");
      const auto lock = project_lock(id);
      std::lock_guard guard(*lock);
      auto record = read_project(id);
      if (!record) return not_found(res, "project");
      if (!record->active_job.empty()) {
        if (const auto job = find_job(record->active_job); job && job->active()) {
          send_json(res, 200, json::parse(job->to_json()));
          return;
        }
      }
      Job job;
      job.id = random_id();
      job.project_id = id;
      job.created_at = now_seconds();
      {
        std::lock_guard jl(jobs_mutex_);
        jobs_[job.id] = job;
        write_job(job);
      }
      record->active_job = job.id;
      write_project(*record);
      {
        std::lock_guard jl(jobs_mutex_);
        queue_.push_back(job.id);
      }
      jobs_cv_.notify_one();
      res.set_header("Location", "/jobs/" + job.id);
      send_json(res, 202, json::parse(job.to_json()));
    });
  });

  s.Get(R"(/jobs/([^/]+))", [this, not_found](const httplib::Request& req, httplib::Response& res) {
    const auto job = find_job(req.matches[1]);
    if (!job) return not_found(res, "job");
    send_json(res, 200, json::parse(job->to_json()));
  });

  s.Get(R"(/projects/([^/]+)/video)", [this, not_found](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto record = read_project(req.matches[1]);
      if (!record) return not_found(res, "project");
      const auto path = record->project.video_path;
      if (path.empty() || !fs::exists(path)) return not_found(res, "video (project not rendered)");
      // Opened once so a concurrent re-render cannot mix two files into one response.
      auto stream = std::make_shared<std::ifstream>(path, std::ios::binary);
      const auto size = static_cast<std::size_t>(fs::file_size(path));
      res.set_header("Accept-Ranges", "bytes");
      res.set_content_provider(size, "video/mp4",
                               [stream](std::size_t offset, std::size_t length, httplib::DataSink& sink) {
                                 std::vector<char> buf(std::min<std::size_t>(length, 1u << 16));
                                 stream->clear();
                                 stream->seekg(static_cast<std::streamoff>(offset));
                                 stream->read(buf.data(), static_cast<std::streamsize>(buf.size()));
                                 const auto n = static_cast<std::size_t>(stream->gcount());
                                 return n > 0 && sink.write(buf.data(), n);
                               });
    });
  });

  s.Get(R"(/projects/([^/]+)/subtitles)", [this, not_found](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto record = read_project(req.matches[1]);
      if (!record) return not_found(res, "project");
      const auto path = record->project.subtitles_path;
      if (path.empty() || !fs::exists(path)) return not_found(res, "subtitles (project not rendered)");
      res.set_content(read_text(path), "text/vtt");
    });
  });

  s.Get(R"(/projects/([^/]+)/segments/(\d+)/candidates/([^/]+)/keyframes/(\d+))",
        [this, not_found](const httplib::Request& req, httplib::Response& res) {
          guarded(res, [&] {
            const auto record = read_project(req.matches[1]);
            if (!record) return not_found(res, "project");
            const std::size_t segment = std::stoul(req.matches[2]);
            const std::string cid = req.matches[3];
            const std::size_t k = std::stoul(req.matches[4]);
            if (segment >= record->project.segments.size() || !std::regex_match(cid, kCandidatePattern)) {
              return not_found(res, "segment or candidate");
            }
            const auto* c = record->project.segments[segment].find(cid);
            if (c == nullptr || k >= c->digests.size()) return not_found(res, "keyframe");
            const auto path = c->keyframe_path(k);
            if (!fs::exists(path)) return not_found(res, "keyframe");
            res.set_content(read_text(path), "image/png");
          });
        });
}

}  // namespace beatframe::service
