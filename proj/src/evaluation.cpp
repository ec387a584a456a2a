#include "beatframe/evaluation.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "beatframe/error.hpp"
#include "beatframe/random.hpp"
#include "json.hpp"

namespace beatframe::evaluation {

using json = nlohmann::json;

SongSplit split_from_assignment(const std::map<std::string, std::string>& assignment) {
  SongSplit s;
  for (const auto& [song, side] : assignment) {
    if (side == "train") {
      s.train.push_back(song);
    } else if (side == "test") {
      s.test.push_back(song);
    } else {
      throw FormatError("split assigns song '" + song + "' to '" + side + "'");
    }
  }
  return s;
}

SongSplit split_pairs(const std::vector<dataset::MusicLyricPair>& pairs, double train_fraction, std::uint64_t seed) {
  std::map<std::string, dataset::SongRecord> songs;
  for (const auto& p : pairs) {
    auto& r = songs[p.song_id];
    r.song_id = p.song_id;
    r.genre = p.genre;
  }
  std::vector<dataset::SongRecord> records;
  for (auto& [id, r] : songs) records.push_back(std::move(r));
  const auto split = dataset::stratified_split(records, train_fraction, seed);
  return {split.train, split.test};
}

std::map<std::string, std::string> read_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DecodeError("cannot read split file '" + path.string() + "'");
  try {
    return json::parse(in).get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw FormatError("split file '" + path.string() + "': " + e.what());
  }
}

Evaluation evaluate(const lyrics::LyricModel& model, const std::vector<dataset::MusicLyricPair>& pairs,
                    const SongSplit& split, backend::IllustrationBackend& backend, const EvaluationOptions& options) {
  const std::set<std::string> train(split.train.begin(), split.train.end());
  const std::set<std::string> test(split.test.begin(), split.test.end());
  for (const auto& id : test) {
    if (train.count(id) != 0) throw ValidationError("song '" + id + "' is in both splits");
  }

  std::vector<std::string> train_lines;
  std::map<std::string, std::vector<const dataset::MusicLyricPair*>> by_song;
  for (const auto& p : pairs) {
    if (train.count(p.song_id) != 0) train_lines.push_back(p.target_line);
    if (test.count(p.song_id) != 0) by_song[p.song_id].push_back(&p);
  }
  if (by_song.empty()) throw ValidationError("the test split has no pairs");

  Evaluation out;
  std::map<std::filesystem::path, audio::AudioBuffer> audio_cache;
  std::vector<std::string> candidates;
  std::vector<std::string> references;
  std::vector<std::vector<std::string>> per_song;
  double clip_total = 0.0;
  for (auto& [song_id, song_pairs] : by_song) {
    std::stable_sort(song_pairs.begin(), song_pairs.end(),
                     [](const auto* a, const auto* b) { return a->line_index < b->line_index; });
    GeneratedSong g;
    g.song_id = song_id;
    std::string previous = dataset::kStartLine;
    for (const auto* p : song_pairs) {
      auto it = audio_cache.find(p->audio_path);
      if (it == audio_cache.end()) {
        it = audio_cache.emplace(p->audio_path, dataset::separate_accompaniment(audio::load_audio(p->audio_path))).first;
      }
      const auto clip = audio::slice_clip(it->second, p->clip_start, p->clip_seconds);
      auto sampling = options.sampling;
      sampling.seed = derive_seed(derive_seed(options.seed, fnv1a64(song_id)), p->line_index);
      const auto line = model.generate(model.music_features(clip), previous, sampling).text;

      const auto frame = backend.generate({backend.text_embed(line), backend.make_noise(sampling.seed), line, {}, {}});
      clip_total += metrics::clip_score(backend.image_embed(frame), backend.text_embed(line), options.clip_scale);

      g.lines.push_back(line);
      g.references.push_back(p->target_line);
      candidates.push_back(line);
      references.push_back(p->target_line);
      previous = line;
    }
    per_song.push_back(g.lines);
    out.songs.push_back(std::move(g));
  }

  auto& r = out.report;
  r.lines = candidates.size();
  r.songs = per_song.size();
  r.bleu_2 = metrics::bleu_n(candidates, references, 2);
  r.bleu_3 = metrics::bleu_n(candidates, references, 3);
  std::string warning;
  r.distinct_2 = metrics::distinct_n(candidates, 2, &warning);
  if (!warning.empty()) r.warnings.push_back("distinct-2: " + warning);
  warning.clear();
  r.distinct_3 = metrics::distinct_n(candidates, 3, &warning);
  if (!warning.empty()) r.warnings.push_back("distinct-3: " + warning);
  for (std::size_t n : {2u, 3u}) {
    const auto frequent = metrics::build_frequency_list(train_lines, n, options.frequency_limit);
    if (frequent.entries.empty()) {
      throw ValidationError("the training split has no content " + std::to_string(n) +
                            "-grams to build the novelty frequency list from");
    }
    (n == 2 ? r.novelty_2 : r.novelty_3) = metrics::novelty_n(candidates, frequent, n);
  }
  const auto c = metrics::coherence(per_song);
  r.coherence = c.normalized;
  r.coherence_raw = c.raw;
  r.clip_score = clip_total / static_cast<double>(candidates.size());
  return out;
}

}  // namespace beatframe::evaluation
