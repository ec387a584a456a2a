#include "beatframe/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "beatframe/error.hpp"
#include "beatframe/random.hpp"
#include "json.hpp"

namespace beatframe::dataset {

namespace fs = std::filesystem;
using json = nlohmann::json;

void SongRecord::validate() const {
  if (song_id.empty()) throw ValidationError("song has no id");
  double last_start = 0.0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& l = lines[i];
    if (!std::isfinite(l.start) || !std::isfinite(l.end) || l.start < 0.0 || l.end < l.start) {
      throw ValidationError("song '" + song_id + "' line " + std::to_string(i) + " has an invalid time interval");
    }
    if (l.start < last_start) {
      throw ValidationError("song '" + song_id + "' lines are not sorted by start time (line " + std::to_string(i) + ")");
    }
    last_start = l.start;
  }
}

PairBuild build_pairs(const SongRecord& song, double audio_duration, double clip_seconds) {
  if (!(clip_seconds > 0.0)) throw ValidationError("clip_seconds must be positive");
  song.validate();
  PairBuild out;
  std::string previous = kStartLine;
  for (std::size_t i = 0; i < song.lines.size(); ++i) {
    const auto& line = song.lines[i];
    if (line.start >= audio_duration) {
      out.skipped.push_back({song.song_id, i, "line starts at " + std::to_string(line.start) + " s, after the audio ends (" +
                                                  std::to_string(audio_duration) + " s)"});
      continue;
    }
    MusicLyricPair p;
    p.song_id = song.song_id;
    p.genre = song.genre;
    p.audio_path = song.audio_path;
    p.line_index = i;
    p.clip_start = line.start;
    p.clip_seconds = clip_seconds;
    p.previous_line = previous;
    p.target_line = line.text;
    out.pairs.push_back(std::move(p));
    previous = line.text;
  }
  return out;
}

audio::AudioBuffer separate_accompaniment(const audio::AudioBuffer& mix) { return mix; }

SongRecord load_song(const fs::path& annotation) {
  std::ifstream in(annotation);
  if (!in) throw Error("cannot read annotation '" + annotation.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("annotation '" + annotation.string() + "' is not valid JSON: " + e.what());
  }
  SongRecord s;
  try {
    s.song_id = j.at("id").get<std::string>();
    if (j.contains("genre") && j["genre"].is_string() && !j["genre"].get<std::string>().empty()) {
      s.genre = j["genre"].get<std::string>();
    }
    fs::path audio = j.at("audio").get<std::string>();
    s.audio_path = audio.is_absolute() ? audio : (annotation.parent_path() / audio).lexically_normal();
    for (const auto& l : j.at("lines")) {
      s.lines.push_back({l.at("start").get<double>(), l.at("end").get<double>(), l.at("text").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw FormatError("annotation '" + annotation.string() + "' is missing a field: " + e.what());
  }
  s.validate();
  return s;
}

std::vector<SongRecord> load_corpus(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("corpus directory '" + dir.string() + "' does not exist");
  std::vector<SongRecord> songs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") songs.push_back(load_song(entry.path()));
  }
  std::sort(songs.begin(), songs.end(), [](const auto& a, const auto& b) { return a.song_id < b.song_id; });
  for (std::size_t i = 1; i < songs.size(); ++i) {
    if (songs[i].song_id == songs[i - 1].song_id) throw ValidationError("duplicate song id '" + songs[i].song_id + "'");
  }
  return songs;
}

std::map<std::string, std::string> Split::assignment() const {
  std::map<std::string, std::string> m;
  for (const auto& id : train) m[id] = "train";
  for (const auto& id : test) m[id] = "test";
  return m;
}

Split stratified_split(const std::vector<SongRecord>& songs, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw ValidationError("train_fraction must lie in [0, 1]");
  std::map<std::string, std::vector<std::string>> by_genre;
  std::set<std::string> seen;
  for (const auto& s : songs) {
    if (!seen.insert(s.song_id).second) throw ValidationError("duplicate song id '" + s.song_id + "'");
    by_genre[s.genre.empty() ? kUnknownGenre : s.genre].push_back(s.song_id);
  }
  Split split;
  for (auto& [genre, ids] : by_genre) {
    std::sort(ids.begin(), ids.end());
    if (ids.size() == 1) {
      split.train.push_back(ids[0]);
      split.warnings.push_back("genre '" + genre + "' has a single song; assigned to train");
      continue;
    }
    Rng rng(derive_seed(seed, fnv1a64(genre)));
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
    const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(ids.size()) + 0.5));
    split.train.insert(split.train.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.test.insert(split.test.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

Ingest ingest(const std::vector<SongRecord>& songs, double clip_seconds) {
  std::vector<const SongRecord*> ordered;
  for (const auto& s : songs) ordered.push_back(&s);
  std::sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->song_id < b->song_id; });
  Ingest out;
  for (const auto* s : ordered) {
    const auto audio = audio::load_audio(s->audio_path);
    auto built = build_pairs(*s, audio.duration_seconds(), clip_seconds);
    std::move(built.pairs.begin(), built.pairs.end(), std::back_inserter(out.pairs));
    std::move(built.skipped.begin(), built.skipped.end(), std::back_inserter(out.skipped));
  }
  return out;
}

void write_manifest(const std::vector<MusicLyricPair>& pairs, const fs::path& path) {
  const fs::path base = fs::absolute(path).parent_path();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write manifest '" + path.string() + "'");
  for (const auto& p : pairs) {
    const json j{{"song_id", p.song_id},
                 {"genre", p.genre},
                 {"audio", fs::absolute(p.audio_path).lexically_relative(base).generic_string()},
                 {"line_index", p.line_index},
                 {"clip_start", p.clip_start},
                 {"clip_seconds", p.clip_seconds},
                 {"previous_line", p.previous_line},
                 {"target_line", p.target_line}};
    out << j.dump() << '\n';
  }
}

std::vector<MusicLyricPair> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read manifest '" + path.string() + "'");
  const fs::path base = fs::absolute(path).parent_path();
  std::vector<MusicLyricPair> pairs;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      MusicLyricPair p;
      p.song_id = j.at("song_id");
      p.genre = j.value("genre", kUnknownGenre);
      p.audio_path = (base / j.at("audio").get<std::string>()).lexically_normal();
      p.line_index = j.at("line_index");
      p.clip_start = j.at("clip_start");
      p.clip_seconds = j.at("clip_seconds");
      p.previous_line = j.at("previous_line");
      p.target_line = j.at("target_line");
      pairs.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw FormatError("manifest '" + path.string() + "' line " + std::to_string(number) + ": " + e.what());
    }
  }
  return pairs;
}

void write_split(const Split& split, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write split file '" + path.string() + "'");
  out << json(split.assignment()).dump(2) << '\n';
}

std::vector<lyrics::TrainingExample> load_training_examples(const std::vector<MusicLyricPair>& pairs,
                                                            const audio::MelSpectrogramParams& mel) {
  std::map<fs::path, audio::AudioBuffer> cache;
  std::vector<lyrics::TrainingExample> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    auto it = cache.find(p.audio_path);
    if (it == cache.end()) it = cache.emplace(p.audio_path, separate_accompaniment(audio::load_audio(p.audio_path))).first;
    const auto clip = audio::slice_clip(it->second, p.clip_start, p.clip_seconds);
    out.push_back({audio::mel_spectrogram(clip, mel), p.previous_line, p.target_line});
  }
  return out;
}

}  // namespace beatframe::dataset
