#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "beatframe/audio.hpp"
#include "beatframe/lyric_model.hpp"

namespace beatframe::dataset {

inline constexpr const char* kStartLine = "<START>";
inline constexpr const char* kUnknownGenre = "unknown";

struct LineAnnotation {
  double start = 0.0;
  double end = 0.0;
  std::string text;
};

struct SongRecord {
  std::string song_id;
  std::string genre = kUnknownGenre;
  std::filesystem::path audio_path;
  std::vector<LineAnnotation> lines;

  /// Sorted, non-negative, end >= start. Throws ValidationError.
  void validate() const;
};

/// One (clip, previous line, target line) pair. The clip is referenced by
/// song audio path and window start (audio::slice_clip).
struct MusicLyricPair {
  std::string song_id;
  std::string genre;
  std::filesystem::path audio_path;
  std::size_t line_index = 0;
  double clip_start = 0.0;
  double clip_seconds = 5.0;
  std::string previous_line;
  std::string target_line;
};

struct SkippedLine {
  std::string song_id;
  std::size_t line_index = 0;
  std::string reason;
};

struct PairBuild {
  std::vector<MusicLyricPair> pairs;
  std::vector<SkippedLine> skipped;
};

/// One pair per line whose start lies inside the audio; later lines are
/// reported as skipped. previous_line chains from "<START>".
PairBuild build_pairs(const SongRecord& song, double audio_duration, double clip_seconds = 5.0);

/// Accompaniment separation is external; this returns its input.
audio::AudioBuffer separate_accompaniment(const audio::AudioBuffer& mix);

/// {"id", "genre"?, "audio", "lines": [{"start", "end", "text"}]}. The audio
/// path is resolved against the annotation's directory.
SongRecord load_song(const std::filesystem::path& annotation);
/// Every *.json annotation in `dir`, sorted by song_id.
std::vector<SongRecord> load_corpus(const std::filesystem::path& dir);

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> test;
  std::vector<std::string> warnings;
  /// song_id -> "train" | "test"
  std::map<std::string, std::string> assignment() const;
};

/// Song-level split stratified by genre: each genre contributes
/// round(train_fraction * songs) songs to train, chosen by a seeded shuffle.
Split stratified_split(const std::vector<SongRecord>& songs, double train_fraction, std::uint64_t seed = 0);

struct Ingest {
  std::vector<MusicLyricPair> pairs;
  std::vector<SkippedLine> skipped;
};

/// Builds pairs for every song (reading audio only to learn its duration),
/// in song_id order.
Ingest ingest(const std::vector<SongRecord>& songs, double clip_seconds = 5.0);

/// JSONL, one pair per line, audio paths relative to the manifest directory.
void write_manifest(const std::vector<MusicLyricPair>& pairs, const std::filesystem::path& path);
std::vector<MusicLyricPair> read_manifest(const std::filesystem::path& path);
void write_split(const Split& split, const std::filesystem::path& path);

/// Loads each song's audio once and computes the model's spectrogram per pair.
std::vector<lyrics::TrainingExample> load_training_examples(const std::vector<MusicLyricPair>& pairs,
                                                            const audio::MelSpectrogramParams& mel);

}  // namespace beatframe::dataset
