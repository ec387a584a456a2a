#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "beatframe/audio.hpp"
#include "beatframe/backend.hpp"
#include "beatframe/compositor.hpp"
#include "beatframe/error.hpp"
#include "beatframe/lyric_model.hpp"
#include "beatframe/prompt.hpp"

namespace beatframe::pipeline {

namespace fs = std::filesystem;

inline constexpr int kProjectSchemaVersion = 1;

/// A stage failed; names the stage and the digest of its inputs.
class StageError : public Error {
 public:
  StageError(std::string stage, std::string digest, const std::string& what)
      : Error("stage '" + stage + "' failed (input " + digest.substr(0, 12) + "): " + what),
        stage_(std::move(stage)),
        digest_(std::move(digest)) {}
  const std::string& stage() const { return stage_; }
  const std::string& digest() const { return digest_; }

 private:
  std::string stage_;
  std::string digest_;
};

/// Invalid editor action. `offending` lists the rejected indices, if any.
class EditError : public ValidationError {
 public:
  EditError(const std::string& what, std::vector<std::size_t> offending = {})
      : ValidationError(what), offending_(std::move(offending)) {}
  const std::vector<std::size_t>& offending() const { return offending_; }

 private:
  std::vector<std::size_t> offending_;
};

struct PipelineConfig {
  double clip_seconds = 5.0;
  // A trailing clip shorter than this joins the previous one.
  double min_clip_seconds = 1.0;
  std::size_t alternatives = 3;
  compositor::TimelineConfig timeline;
  lyrics::SamplingConfig sampling = default_sampling();
  audio::HpssParams hpss;
  audio::MelSpectrogramParams beat_mel;
  bool burn_subtitles = false;
  // Reordering also moves the lyric subtitles with their illustrations.
  bool couple_lyrics_to_order = false;

  static lyrics::SamplingConfig default_sampling() {
    lyrics::SamplingConfig s;
    s.max_tokens = 10;
    s.min_tokens = 1;
    return s;
  }
  void validate() const;
};

struct LyricLineRecord {
  std::size_t clip_index = 0;
  double start = 0.0;
  std::string previous;
  std::string text;
  std::string prompt;
};

/// One generated keyframe sequence for a segment.
struct Candidate {
  std::string id;
  std::uint64_t seed_from = 0;
  std::uint64_t seed_to = 0;
  fs::path artifact;  // cache directory holding keyframe_K.png
  std::vector<std::string> digests;
  bool nsfw = false;

  fs::path keyframe_path(std::size_t k) const;
};

struct SegmentState {
  double start = 0.0;
  double end = 0.0;
  bool transition = false;
  std::vector<double> weights;
  std::vector<Candidate> candidates;  // [0] is the primary
  std::string chosen;

  const Candidate* find(const std::string& id) const;
};

struct Project {
  int schema_version = kProjectSchemaVersion;
  std::string id;
  fs::path audio_path;
  std::string audio_digest;
  std::vector<prompt::KeywordChoice> keywords;
  std::uint64_t seed = 0;
  PipelineConfig config;
  double duration = 0.0;
  std::vector<LyricLineRecord> lines;
  std::vector<SegmentState> segments;
  std::vector<std::size_t> order;
  fs::path output_dir;
  fs::path video_path;
  fs::path subtitles_path;
  fs::path manifest_path;

  bool generated() const { return !segments.empty(); }
  /// Ordering is a permutation, choices exist, lyric context chains.
  void validate() const;

  std::string to_json() const;
  static Project from_json(const std::string& text);
  /// Atomic replace: write to a sibling temp file, then rename.
  void save(const fs::path& path) const;
  static Project load(const fs::path& path);
};

/// Offending entries of a proposed ordering of n segments: out-of-range or
/// repeated values, by position. Empty when it is a permutation of 0..n-1.
std::vector<std::size_t> permutation_problems(const std::vector<std::size_t>& order, std::size_t n);

struct StageStats {
  std::size_t hits = 0;
  std::size_t runs = 0;
};

/// Content-addressed artifact store: (stage, input digest) -> directory.
/// Entries are published atomically and never modified afterwards.
class StageCache {
 public:
  explicit StageCache(fs::path root);

  const fs::path& root() const { return root_; }
  fs::path entry_path(const std::string& stage, const std::string& digest) const;
  std::optional<fs::path> lookup(const std::string& stage, const std::string& digest) const;
  /// Returns the entry, running `produce(dir)` into a fresh directory on a miss.
  fs::path get_or_create(const std::string& stage, const std::string& digest,
                         const std::function<void(const fs::path&)>& produce, bool* hit = nullptr);

 private:
  fs::path root_;
};

struct RunReport {
  std::map<std::string, StageStats> stages;
  std::size_t runs() const;
  std::size_t hits() const;
  std::string to_json() const;
};

struct Progress {
  std::string stage;
  double fraction = 0.0;
};

struct Environment {
  StageCache* cache = nullptr;
  backend::IllustrationBackend* backend = nullptr;
  const lyrics::LyricModel* model = nullptr;
  std::function<void(const Progress&)> on_progress;
};

struct PipelineResult {
  Project project;
  RunReport report;
};

/// clips -> lyric lines -> prompts -> beat weights -> plans -> keyframes
/// (+ alternatives) -> timeline -> video. Every stage is cached by input digest.
PipelineResult run_pipeline(const Project& project, Environment& env);

struct Reorder {
  std::vector<std::size_t> order;
};
struct Substitute {
  std::size_t segment = 0;
  std::string candidate;
};
using Edit = std::variant<Reorder, Substitute>;

struct EditOutcome {
  Project project;
  std::vector<std::string> dirty_stages;
};

/// Touches only the ordering or chosen candidate; dirties the compose stage.
EditOutcome apply_edit(const Project& project, const Edit& edit);

/// Clip start times for audio of `duration` seconds.
std::vector<double> clip_starts(double duration, const PipelineConfig& config);

/// Untrained miniature lyric model over a small built-in vocabulary, sized
/// for 5 s clips. Used when no checkpoint is given.
lyrics::LyricModel toy_lyric_model(std::uint64_t seed = 7);

/// The timeline with chosen candidates laid into the ordered slots.
compositor::Timeline assemble_timeline(const Project& project);

}  // namespace beatframe::pipeline
