#include <cstdlib>
#include <fstream>

#include "beatframe/compositor.hpp"
#include "beatframe/error.hpp"
#include "beatframe/random.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace beatframe;
using namespace beatframe::compositor;

namespace {

Image random_image(Rng& rng, int w, int h) {
  Image img(w, h);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

std::vector<LyricCue> cues(std::initializer_list<double> starts) {
  std::vector<LyricCue> out;
  for (double s : starts) out.push_back({s, "line at " + std::to_string(static_cast<int>(s))});
  return out;
}

// Fills every keyframe with a distinct flat color.
void resolve(Timeline& t, int w = 32, int h = 32) {
  int n = 0;
  for (auto& s : t.segments) {
    for (auto& k : s.keyframes) {
      k.image = Image(w, h, static_cast<std::uint8_t>(20 + 37 * n++ % 200));
    }
  }
}

class EnvOverride {
 public:
  EnvOverride(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old;
    setenv(name, value, 1);
  }
  ~EnvOverride() {
    if (old_.empty()) {
      unsetenv(name_);
    } else {
      setenv(name_, old_.c_str(), 1);
    }
  }

 private:
  const char* name_;
  std::string old_;
};

}  // namespace

TEST_CASE("six lines over thirty seconds") {
  const auto t = build_timeline(cues({0, 5, 10, 15, 20, 25}), 30.0);
  REQUIRE(t.segments.size() == 6);
  CHECK(t.transition_count() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& s = t.segments[i];
    CHECK(s.transition);
    CHECK(s.start == doctest::Approx(5.0 * i));
    CHECK(s.end == doctest::Approx(5.0 * (i + 1)));
    REQUIRE(s.keyframes.size() == 5);
    for (std::size_t k = 1; k < 5; ++k) CHECK(s.keyframes[k].time > s.keyframes[k - 1].time);
    CHECK(s.keyframes.front().time == doctest::Approx(s.start));
    CHECK(s.keyframes.back().time == doctest::Approx(s.end));
    CHECK(s.morph_steps == std::vector<std::size_t>{14, 14, 14, 14});
  }
  const auto& hold = t.segments.back();
  CHECK_FALSE(hold.transition);
  CHECK(hold.start == doctest::Approx(25.0));
  CHECK(hold.end == doctest::Approx(30.0));
  CHECK(hold.keyframes.size() == 1);
  CHECK(t.frame_count() == 360);
  CHECK(t.segments[2].lyric == "line at 10");
}

TEST_CASE("degenerate timelines") {
  for (const auto& lines : {cues({}), cues({0})}) {
    const auto t = build_timeline(lines, 12.0);
    REQUIRE(t.segments.size() == 1);
    CHECK(t.segments[0].start == 0.0);
    CHECK(t.segments[0].end == 12.0);
    CHECK_FALSE(t.segments[0].transition);
  }
  CHECK_THROWS_AS(build_timeline(cues({5, 0}), 10.0), ValidationError);
  CHECK_THROWS_AS(build_timeline(cues({0, 11}), 10.0), ValidationError);
  CHECK_THROWS_AS(build_timeline(cues({0, 0.1}), 10.0), ValidationError);
  CHECK_THROWS_AS(build_timeline(cues({0}), 0.0), ValidationError);
  CHECK_THROWS_AS(build_timeline(cues({0}), 1.0, {0, 5}), ValidationError);
}

TEST_CASE("segments tile the duration and frames land on the grid") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const int fps = 1 + static_cast<int>(rng.below(30));
    const double duration = 5.0 + rng.uniform() * 60.0;
    std::vector<LyricCue> lines{{0.0, "a"}};
    while (true) {
      const double next = lines.back().start + 1.0 + rng.uniform() * 8.0;
      if (next > duration) break;
      lines.push_back({next, "b"});
    }
    Timeline t;
    try {
      t = build_timeline(lines, duration, {fps, 5});
    } catch (const ValidationError&) {
      continue;  // lines closer than the keyframe spacing at low fps
    }
    CHECK(t.segments.front().start == 0.0);
    CHECK(t.segments.back().end == duration);
    for (std::size_t i = 1; i < t.segments.size(); ++i) CHECK(t.segments[i].start == t.segments[i - 1].end);
    std::size_t last_frame = 0;
    bool first = true;
    for (const auto& s : t.segments) {
      for (const auto& k : s.keyframes) {
        CHECK(k.time * fps == doctest::Approx(static_cast<double>(k.frame)));
        if (!first) CHECK(k.frame >= last_frame);
        last_frame = k.frame;
        first = false;
      }
    }
    resolve(t, 2, 2);
    VideoSpec spec;
    spec.fps = fps;
    std::size_t count = 0;
    std::size_t expected_index = 0;
    for_each_frame(t, spec, [&](std::size_t i, const Image&) {
      CHECK(i == expected_index++);
      ++count;
    });
    CHECK(std::abs(static_cast<double>(count) - fps * duration) <= 1.0);
  }
}

TEST_CASE("morph_frames examples") {
  const Image black(4, 3, 0);
  const Image white(4, 3, 255);
  CHECK(morph_frames(black, white, 0).empty());
  const auto mid = morph_frames(black, white, 1);
  REQUIRE(mid.size() == 1);
  CHECK(mid[0] == Image(4, 3, 128));

  Rng rng(3);
  const auto a = random_image(rng, 9, 7);
  for (const auto& f : morph_frames(a, a, 6)) CHECK(f == a);
  CHECK_THROWS_AS(morph_frames(a, black, 2), ShapeError);

  // (1 - t) a + t b, rounded half up, computed independently in double.
  const auto b = random_image(rng, 9, 7);
  const auto frames = morph_frames(a, b, 4);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const double t = static_cast<double>(i + 1) / 5.0;
    for (std::size_t p = 0; p < a.rgb.size(); ++p) {
      const double v = (1.0 - t) * a.rgb[p] + t * b.rgb[p];
      const double expected = std::floor(v + 0.5 + 1e-9);
      REQUIRE(frames[i].rgb[p] == static_cast<int>(expected));
    }
  }
}

TEST_CASE("cross-dissolve is symmetric") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_image(rng, 8, 8);
    const auto b = random_image(rng, 8, 8);
    const std::size_t steps = 1 + rng.below(20);
    const auto forward = morph_frames(a, b, steps);
    const auto backward = morph_frames(b, a, steps);
    for (std::size_t i = 0; i < steps; ++i) REQUIRE(forward[i] == backward[steps - 1 - i]);
  }
}

TEST_CASE("custom morpher hook") {
  const Image a(2, 2, 10);
  const Image b(2, 2, 50);
  std::vector<std::pair<std::size_t, std::size_t>> calls;
  const Morpher hold_first = [&](const Image& x, const Image&, std::size_t i, std::size_t d) {
    calls.emplace_back(i, d);
    return x;
  };
  const auto frames = morph_frames(a, b, 3, hold_first);
  CHECK(frames.size() == 3);
  CHECK(frames[2] == a);
  CHECK(calls == std::vector<std::pair<std::size_t, std::size_t>>{{1, 4}, {2, 4}, {3, 4}});
}

TEST_CASE("subtitles only touch the lower band") {
  auto t = build_timeline({{0.0, "first words here"}, {5.0, "second line"}}, 10.0);
  resolve(t, 64, 64);
  VideoSpec plain;
  VideoSpec burned;
  burned.burn_subtitles = true;
  std::vector<Image> a;
  std::vector<Image> b;
  for_each_frame(t, plain, [&](std::size_t, const Image& f) { a.push_back(f); });
  for_each_frame(t, burned, [&](std::size_t, const Image& f) { b.push_back(f); });
  REQUIRE(a.size() == b.size());
  const auto band = subtitle_band(64, burned.subtitle_band);
  CHECK(band.bottom == 64);
  CHECK(band.top == 51);
  for (std::size_t i = 0; i < a.size(); ++i) {
    bool band_differs = false;
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) {
        for (int c = 0; c < 3; ++c) {
          if (y < band.top) {
            REQUIRE(a[i].at(x, y, c) == b[i].at(x, y, c));
          } else if (a[i].at(x, y, c) != b[i].at(x, y, c)) {
            band_differs = true;
          }
        }
      }
    }
    CHECK(band_differs);
  }
}

TEST_CASE("webvtt cues follow segment times") {
  const auto t = build_timeline({{0.0, "first <one>"}, {5.0, "second"}, {10.0, "third"}}, 14.5);
  const auto vtt = webvtt(t);
  CHECK(vtt ==
        "WEBVTT\n\n"
        "1\n00:00:00.000 --> 00:00:05.000\nfirst &lt;one&gt;\n\n"
        "2\n00:00:05.000 --> 00:00:10.000\nsecond\n\n"
        "3\n00:00:10.000 --> 00:00:14.500\nthird\n\n");
  CHECK(format_vtt_time(3725.0004) == "01:02:05.000");
}

TEST_CASE("frame manifest round trip") {
  auto t = build_timeline({{0.0, "x"}, {2.0, "y"}}, 3.0);
  resolve(t, 8, 8);
  const auto m = frame_manifest(t, {});
  CHECK(m.digests.size() == 36);
  CHECK(m.width == 8);
  CHECK(FrameManifest::from_json(m.to_json()) == m);
  CHECK(frame_manifest(t, {}) == m);
  CHECK_THROWS_AS(FrameManifest::from_json("{}"), FormatError);
}

TEST_CASE("render_video writes an mp4 matching the audio") {
  test_support::TempDir dir;
  const auto audio = test_support::fixture_song(4.0);
  auto t = build_timeline({{0.0, "one"}, {2.0, "two"}}, audio.duration_seconds());
  resolve(t, 64, 48);
  VideoSpec spec;
  spec.output = dir / "out" / "video.mp4";
  const auto result = render_video(t, audio, spec);
  REQUIRE(std::filesystem::exists(spec.output));
  CHECK(result.frames == 48);
  CHECK(result.manifest == frame_manifest(t, spec));
  const auto info = probe_media(spec.output);
  CHECK(info.video_codec == "h264");
  CHECK(info.audio_codec == "aac");
  CHECK(info.width == 64);
  CHECK(info.height == 48);
  CHECK(info.video_frames == 48);
  CHECK(std::abs(info.duration - 4.0) <= 0.1);
  // Only the video remains next to it.
  std::size_t entries = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir / "out")) ++entries;
  CHECK(entries == 1);
}

TEST_CASE("render_video failure paths write nothing") {
  test_support::TempDir dir;
  VideoSpec spec;
  spec.output = dir / "empty.mp4";
  CHECK_THROWS_AS(render_video(Timeline{}, test_support::sine(440, 1.0), spec), ValidationError);
  CHECK_FALSE(std::filesystem::exists(spec.output));

  auto unresolved = build_timeline({{0.0, "x"}}, 1.0);
  CHECK_THROWS_AS(render_video(unresolved, test_support::sine(440, 1.0), spec), ValidationError);
  CHECK_FALSE(std::filesystem::exists(spec.output));

  auto t = build_timeline({{0.0, "x"}}, 1.0);
  resolve(t, 16, 16);
  {
    EnvOverride env("BEATFRAME_FFMPEG", "/nonexistent/ffmpeg");
    CHECK_THROWS_WITH(render_video(t, test_support::sine(440, 1.0), spec), doctest::Contains("'ffmpeg'"));
  }
  CHECK_FALSE(std::filesystem::exists(spec.output));
}
