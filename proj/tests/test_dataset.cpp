#include <fstream>
#include <set>

#include "beatframe/dataset.hpp"
#include "beatframe/error.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace beatframe;
using namespace beatframe::dataset;

namespace {

SongRecord song(std::string id, std::string genre, std::vector<LineAnnotation> lines = {}) {
  SongRecord s;
  s.song_id = std::move(id);
  s.genre = std::move(genre);
  s.audio_path = s.song_id + ".wav";
  s.lines = std::move(lines);
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("build_pairs chains previous lines from <START>") {
  const auto s = song("s1", "pop", {{0.0, 2.0, "one"}, {3.0, 5.0, "two"}, {6.0, 8.0, "three"}});
  const auto built = build_pairs(s, 10.0);
  REQUIRE(built.pairs.size() == 3);
  CHECK(built.skipped.empty());
  CHECK(built.pairs[0].previous_line == "<START>");
  CHECK(built.pairs[1].previous_line == "one");
  CHECK(built.pairs[2].previous_line == "two");
  CHECK(built.pairs[2].target_line == "three");
  CHECK(built.pairs[1].clip_start == 3.0);
  CHECK(built.pairs[1].clip_seconds == 5.0);

  CHECK(build_pairs(song("empty", "pop"), 10.0).pairs.empty());
}

TEST_CASE("build_pairs skips lines past the audio and validates order") {
  const auto s = song("s1", "pop", {{0.0, 2.0, "one"}, {9.0, 11.0, "late"}, {12.0, 13.0, "later"}});
  const auto built = build_pairs(s, 10.0);
  CHECK(built.pairs.size() == 2);
  REQUIRE(built.skipped.size() == 1);
  CHECK(built.skipped[0].line_index == 2);
  CHECK(built.skipped[0].reason.find("after the audio ends") != std::string::npos);

  CHECK_THROWS_AS(build_pairs(song("bad", "pop", {{3.0, 4.0, "a"}, {1.0, 2.0, "b"}}), 10.0), ValidationError);
  CHECK_THROWS_AS(build_pairs(song("bad", "pop", {{3.0, 2.0, "a"}}), 10.0), ValidationError);
}

TEST_CASE("clip window near the end is zero-padded") {
  const auto audio = test_support::sine(440.0, 10.0);
  const auto s = song("s", "pop", {{8.0, 9.5, "end"}});
  const auto pair = build_pairs(s, audio.duration_seconds()).pairs.at(0);
  const auto clip = audio::slice_clip(audio, pair.clip_start, pair.clip_seconds);
  REQUIRE(clip.samples.size() == 5 * 16000);
  for (std::size_t i = 0; i < 2 * 16000; ++i) REQUIRE(clip.samples[i] == audio.samples[8 * 16000 + i]);
  for (std::size_t i = 2 * 16000; i < clip.samples.size(); ++i) REQUIRE(clip.samples[i] == 0.0f);
}

TEST_CASE("stratified_split examples") {
  std::vector<SongRecord> songs;
  for (int i = 0; i < 10; ++i) songs.push_back(song("pop" + std::to_string(i), "pop"));
  for (int i = 0; i < 10; ++i) songs.push_back(song("rock" + std::to_string(i), "rock"));
  const auto split = stratified_split(songs, 0.8);
  CHECK(split.train.size() == 16);
  CHECK(split.test.size() == 4);
  auto count = [](const std::vector<std::string>& ids, const std::string& prefix) {
    return std::count_if(ids.begin(), ids.end(), [&](const auto& id) { return id.rfind(prefix, 0) == 0; });
  };
  CHECK(count(split.train, "pop") == 8);
  CHECK(count(split.train, "rock") == 8);
  CHECK(count(split.test, "pop") == 2);

  const auto all = stratified_split(songs, 1.0);
  CHECK(all.test.empty());
  CHECK(all.train.size() == 20);

  CHECK(stratified_split(songs, 0.8, 3).train == stratified_split(songs, 0.8, 3).train);
  CHECK_THROWS_AS(stratified_split(songs, 1.2), ValidationError);
}

TEST_CASE("stratified_split at full corpus scale") {
  std::vector<SongRecord> songs;
  const std::pair<const char*, int> genres[] = {{"pop", 500}, {"rock", 500}, {"jazz", 500}, {"folk", 500}, {"metal", 590}};
  for (const auto& [g, n] : genres) {
    for (int i = 0; i < n; ++i) songs.push_back(song(std::string(g) + std::to_string(i), g));
  }
  REQUIRE(songs.size() == 2590);
  const auto split = stratified_split(songs, 0.8, 42);
  CHECK(split.train.size() == 2072);
  CHECK(split.test.size() == 518);
  std::set<std::string> train(split.train.begin(), split.train.end());
  for (const auto& id : split.test) REQUIRE(train.count(id) == 0);
}

TEST_CASE("single-song genres go to train with a warning") {
  std::vector<SongRecord> songs{song("a", "pop"), song("b", "pop"), song("c", "polka"), song("d", "")};
  const auto split = stratified_split(songs, 0.5);
  CHECK(split.warnings.size() == 2);
  CHECK(std::find(split.train.begin(), split.train.end(), "c") != split.train.end());
  CHECK(std::find(split.train.begin(), split.train.end(), "d") != split.train.end());
  CHECK(split.assignment().size() == 4);
}

TEST_CASE("corpus ingestion, manifest and split files") {
  test_support::TempDir dir;
  const auto songs_dir = dir.path() / "songs";
  std::filesystem::create_directories(songs_dir / "audio");
  audio::write_wav(songs_dir / "audio" / "b.wav", test_support::sine(330.0, 6.0));
  audio::write_wav(songs_dir / "audio" / "a.wav", test_support::sine(220.0, 4.0));
  {
    std::ofstream(songs_dir / "b.json") << R"({"id": "b", "genre": "rock", "audio": "audio/b.wav",
      "lines": [{"start": 0.5, "end": 2.0, "text": "first b"}, {"start": 3.0, "end": 5.0, "text": "second b"}]})";
    std::ofstream(songs_dir / "a.json") << R"({"id": "a", "audio": "audio/a.wav",
      "lines": [{"start": 0.0, "end": 1.0, "text": "only a"}, {"start": 4.5, "end": 5.0, "text": "too late"}]})";
  }
  const auto songs = load_corpus(songs_dir);
  REQUIRE(songs.size() == 2);
  CHECK(songs[0].song_id == "a");
  CHECK(songs[0].genre == "unknown");

  const auto result = ingest(songs);
  // Sum of line counts minus skipped lines.
  CHECK(result.pairs.size() == 4 - result.skipped.size());
  CHECK(result.skipped.size() == 1);
  CHECK(result.pairs[0].song_id == "a");

  const auto manifest = dir.path() / "out" / "pairs.jsonl";
  std::filesystem::create_directories(manifest.parent_path());
  write_manifest(result.pairs, manifest);
  const auto first = slurp(manifest);
  CHECK(first.find("\"audio\":\"../songs/audio/a.wav\"") != std::string::npos);
  write_manifest(ingest(load_corpus(songs_dir)).pairs, manifest);
  CHECK(slurp(manifest) == first);

  const auto back = read_manifest(manifest);
  REQUIRE(back.size() == result.pairs.size());
  CHECK(std::filesystem::equivalent(back[1].audio_path, songs_dir / "audio" / "b.wav"));
  CHECK(back[2].previous_line == "first b");

  write_split(stratified_split(songs, 0.8), dir.path() / "split.json");
  CHECK(slurp(dir.path() / "split.json").find("\"a\": \"train\"") != std::string::npos);

  audio::MelSpectrogramParams mel;
  const auto examples = load_training_examples(back, mel);
  REQUIRE(examples.size() == 3);
  CHECK(examples[0].mel.frames == 498);
  CHECK(examples[0].previous_line == "<START>");
}

TEST_CASE("annotation errors") {
  test_support::TempDir dir;
  std::ofstream(dir / "bad.json") << "{not json";
  CHECK_THROWS_AS(load_song(dir / "bad.json"), FormatError);
  std::ofstream(dir / "missing.json") << R"({"id": "x"})";
  CHECK_THROWS_AS(load_song(dir / "missing.json"), FormatError);
  CHECK_THROWS_AS(load_corpus(dir / "nowhere"), Error);
}
