#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "beatframe/backend.hpp"
#include "beatframe/dataset.hpp"
#include "beatframe/lyric_model.hpp"
#include "beatframe/metrics.hpp"

namespace beatframe::evaluation {

struct EvaluationOptions {
  lyrics::SamplingConfig sampling = default_sampling();
  std::uint64_t seed = 0;
  std::size_t frequency_limit = 2000;
  double clip_scale = 2.5;

  static lyrics::SamplingConfig default_sampling() {
    lyrics::SamplingConfig s;
    s.min_tokens = 1;
    return s;
  }
};

struct GeneratedSong {
  std::string song_id;
  std::vector<std::string> references;
  std::vector<std::string> lines;
};

struct Evaluation {
  metrics::MetricReport report;
  std::vector<GeneratedSong> songs;
};

/// Song ids per split: "train" / "test" from a split file assignment.
struct SongSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

SongSplit split_from_assignment(const std::map<std::string, std::string>& assignment);
/// Stratified by the genres recorded in the pairs.
SongSplit split_pairs(const std::vector<dataset::MusicLyricPair>& pairs, double train_fraction, std::uint64_t seed);
std::map<std::string, std::string> read_split(const std::filesystem::path& path);

/// Generates one line per test pair, chaining each song's generated lines as
/// context, and scores them. References are the annotated target lines;
/// novelty lists come from the training split's target lines; CLIPScore
/// pairs each line with an illustration rendered from it.
Evaluation evaluate(const lyrics::LyricModel& model, const std::vector<dataset::MusicLyricPair>& pairs,
                    const SongSplit& split, backend::IllustrationBackend& backend, const EvaluationOptions& options = {});

}  // namespace beatframe::evaluation
