#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "beatframe/backend.hpp"
#include "beatframe/lyric_model.hpp"
#include "beatframe/pipeline.hpp"

namespace httplib {
class Server;
}

namespace beatframe::service {

namespace fs = std::filesystem;

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  fs::path data_dir = "beatframe-data";
  std::size_t workers = 1;
  backend::BackendDescriptor backend;
  fs::path checkpoint;  // empty: built-in toy model
  fs::path webui_dir;   // empty: no static files
  std::size_t max_upload_bytes = 50u * 1024u * 1024u;
  double max_audio_seconds = 600.0;
  pipeline::PipelineConfig pipeline;

  void validate() const;

  /// JSON object; absent keys keep their defaults.
  static ServiceConfig from_json(const std::string& text);
  static ServiceConfig load(const fs::path& path);
};

using EnvLookup = std::function<const char*(const char*)>;

/// BEATFRAME_HOST, BEATFRAME_PORT, BEATFRAME_DATA_DIR, BEATFRAME_WORKERS,
/// BEATFRAME_BACKEND (stub | remote, remote reads BEATFRAME_BACKEND_URL and
/// BEATFRAME_BACKEND_KEY), BEATFRAME_CHECKPOINT, BEATFRAME_WEBUI_DIR.
void apply_env_overrides(ServiceConfig& config, const EnvLookup& lookup = {});

enum class JobState { kQueued, kRunning, kDone, kFailed };

std::string to_string(JobState state);
JobState job_state_from(const std::string& text);

struct Job {
  std::string id;
  std::string project_id;
  JobState state = JobState::kQueued;
  std::string stage;       // while running
  std::string diagnostic;  // when failed
  double progress = 0.0;
  double created_at = 0.0;  // unix seconds
  double started_at = 0.0;
  double finished_at = 0.0;
  std::map<std::string, pipeline::StageStats> stages;

  bool active() const { return state == JobState::kQueued || state == JobState::kRunning; }
  std::string to_json() const;
  static Job from_json(const std::string& text);
};

/// Service-side project document: the pipeline project plus editor state.
struct ProjectRecord {
  pipeline::Project project;
  std::string original_name;
  std::vector<std::string> dirty_stages;  // edits not yet rendered
  std::string active_job;
  double created_at = 0.0;

  std::string to_json() const;
  static ProjectRecord from_json(const std::string& text);
};

/// Injected collaborators; null members are built from the config.
struct ServiceDeps {
  backend::IllustrationBackend* backend = nullptr;
  const lyrics::LyricModel* model = nullptr;
};

/// HTTP API over the pipeline with on-disk persistence under data_dir:
///   projects/<id>/project.json, projects/<id>/audio.<ext>, projects/<id>/out/
///   jobs/<id>.json, cache/
/// Every mutation is written (atomic replace) before its response is sent.
class Service {
 public:
  explicit Service(ServiceConfig config, ServiceDeps deps = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds the socket and serves on a background thread. Returns the port.
  int start();
  /// Serves on the calling thread until stop().
  void run();
  void stop();

  int port() const { return port_; }
  const ServiceConfig& config() const { return config_; }

  /// Blocks until no job is queued or running.
  void wait_idle();

 private:
  void install_routes();
  void worker_loop();
  void execute(const std::string& job_id);
  void recover();

  std::shared_ptr<std::mutex> project_lock(const std::string& id);
  fs::path project_dir(const std::string& id) const;
  fs::path project_file(const std::string& id) const;
  fs::path job_file(const std::string& id) const;
  std::string stored_json(ProjectRecord record) const;
  std::optional<ProjectRecord> read_project(const std::string& id) const;
  void write_project(const ProjectRecord& record) const;
  void write_job(const Job& job) const;
  std::optional<Job> find_job(const std::string& id);
  void update_job(const std::string& id, const std::function<void(Job&)>& change);

  ServiceConfig config_;
  std::unique_ptr<backend::IllustrationBackend> owned_backend_;
  std::unique_ptr<lyrics::LyricModel> owned_model_;
  backend::IllustrationBackend* backend_ = nullptr;
  const lyrics::LyricModel* model_ = nullptr;
  std::unique_ptr<pipeline::StageCache> cache_;
  std::unique_ptr<httplib::Server> server_;
  int port_ = 0;
  std::thread listener_;

  std::mutex locks_mutex_;
  std::map<std::string, std::shared_ptr<std::mutex>> locks_;

  std::mutex jobs_mutex_;
  std::condition_variable jobs_cv_;
  std::condition_variable idle_cv_;
  std::map<std::string, Job> jobs_;
  std::deque<std::string> queue_;
  std::size_t busy_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

/// Sniffs the container from magic bytes: "wav", "mp3" or empty.
std::string sniff_audio_format(std::string_view bytes);

}  // namespace beatframe::service
