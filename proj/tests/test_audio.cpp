#include <algorithm>
#include <cmath>
#include <random>

#include "beatframe/audio.hpp"
#include "beatframe/error.hpp"
#include "beatframe/process.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace beatframe;
using namespace beatframe::audio;
using test_support::TempDir;

TEST_CASE("load_audio resamples silence to the target rate") {
  TempDir dir;
  const auto path = dir / "silence.wav";
  test_support::write_pcm16(path, {std::vector<float>(44100, 0.0f)}, 44100);
  const auto audio = load_audio(path, 16000);
  CHECK(audio.sample_rate == 16000);
  REQUIRE(audio.samples.size() == 16000);
  CHECK(std::all_of(audio.samples.begin(), audio.samples.end(), [](float s) { return s == 0.0f; }));
}

TEST_CASE("load_audio preserves duration of a 2 s tone") {
  TempDir dir;
  const auto path = dir / "tone.wav";
  const auto tone = test_support::sine(440.0, 2.0, 44100, 0.8);
  test_support::write_pcm16(path, {tone.samples}, 44100);
  const auto audio = load_audio(path, 16000);
  CHECK(audio.duration_seconds() == doctest::Approx(2.0).epsilon(1.0 / 16000.0));
  float peak = 0.0f;
  for (float s : audio.samples) peak = std::max(peak, std::abs(s));
  CHECK(peak <= 1.0f);
  CHECK(peak > 0.7f);
}

TEST_CASE("stereo channels in antiphase mix to silence") {
  TempDir dir;
  const auto path = dir / "stereo.wav";
  auto left = test_support::sine(300.0, 0.5, 16000).samples;
  std::vector<float> right(left.size());
  std::transform(left.begin(), left.end(), right.begin(), [](float s) { return -s; });
  test_support::write_pcm16(path, {left, right}, 16000);
  const auto audio = load_audio(path, 16000);
  REQUIRE(audio.samples.size() == left.size());
  CHECK(std::all_of(audio.samples.begin(), audio.samples.end(), [](float s) { return s == 0.0f; }));
}

TEST_CASE("load_audio error paths") {
  TempDir dir;
  CHECK_THROWS_AS(load_audio(dir / "missing.wav"), DecodeError);
  {
    std::ofstream out(dir / "notes.txt");
    out << "definitely not audio";
  }
  CHECK_THROWS_AS(load_audio(dir / "notes.txt"), FormatError);
  try {
    load_audio(dir / "missing.wav");
  } catch (const DecodeError& e) {
    CHECK(std::string(e.what()).find("missing.wav") != std::string::npos);
  }
}

TEST_CASE("load_audio decodes MP3 through ffmpeg") {
  const auto ffmpeg = process::find_executable("ffmpeg", "BEATFRAME_FFMPEG");
  if (ffmpeg.empty()) {
    MESSAGE("ffmpeg unavailable, skipping MP3 decode");
    return;
  }
  TempDir dir;
  const auto wav = dir / "src.wav";
  const auto mp3 = dir / "src.mp3";
  write_wav(wav, test_support::sine(440.0, 1.0, 16000));
  const auto r = process::run({ffmpeg.string(), "-v", "error", "-y", "-i", wav.string(), "-c:a", "libmp3lame",
                               "-b:a", "64k", mp3.string()});
  if (r.exit_code != 0) {
    MESSAGE("ffmpeg cannot encode MP3 here: " << r.stderr_text);
    return;
  }
  const auto audio = load_audio(mp3, 16000);
  CHECK(audio.sample_rate == 16000);
  // MP3 frames add encoder delay/padding; allow 0.1 s slack.
  CHECK(audio.duration_seconds() == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("segment_clips partitions and pads") {
  auto make = [](double seconds) {
    AudioBuffer a;
    a.sample_rate = 100;
    a.samples.resize(static_cast<std::size_t>(seconds * 100));
    for (std::size_t i = 0; i < a.samples.size(); ++i) a.samples[i] = static_cast<float>((i % 97) / 97.0);
    return a;
  };

  SUBCASE("30 s into six 5 s clips") {
    const auto clips = segment_clips(make(30), 5.0);
    CHECK(clips.size() == 6);
    for (const auto& c : clips) CHECK(c.samples.size() == 500);
  }
  SUBCASE("12 s into three clips, last padded with 3 s of zeros") {
    const auto audio = make(12);
    const auto clips = segment_clips(audio, 5.0);
    REQUIRE(clips.size() == 3);
    const auto& last = clips[2];
    REQUIRE(last.samples.size() == 500);
    CHECK(std::equal(last.samples.begin(), last.samples.begin() + 200, audio.samples.begin() + 1000));
    CHECK(std::all_of(last.samples.begin() + 200, last.samples.end(), [](float s) { return s == 0.0f; }));
  }
  SUBCASE("exact single clip is bit-identical") {
    const auto audio = make(5);
    const auto clips = segment_clips(audio, 5.0);
    REQUIRE(clips.size() == 1);
    CHECK(clips[0].samples == audio.samples);
  }
  SUBCASE("empty buffer yields no clips") {
    CHECK(segment_clips(AudioBuffer{}, 5.0).empty());
  }
  SUBCASE("non-positive clip length is rejected") {
    CHECK_THROWS_AS(segment_clips(make(1), 0.0), ValidationError);
  }
}

TEST_CASE("segment_clips concatenation reconstructs the input") {
  std::mt19937 rng(11);
  std::uniform_int_distribution<std::size_t> len_dist(1, 5000);
  std::uniform_real_distribution<double> clip_dist(0.01, 0.7);
  std::uniform_real_distribution<float> sample(-1.0f, 1.0f);
  for (int trial = 0; trial < 50; ++trial) {
    AudioBuffer a;
    a.sample_rate = 1000;
    a.samples.resize(len_dist(rng));
    for (float& s : a.samples) s = sample(rng);
    const auto clips = segment_clips(a, clip_dist(rng));
    std::vector<float> joined;
    for (const auto& c : clips) joined.insert(joined.end(), c.samples.begin(), c.samples.end());
    REQUIRE(joined.size() >= a.samples.size());
    joined.resize(a.samples.size());
    CHECK(joined == a.samples);
  }
}

TEST_CASE("mel_spectrogram shape and basic properties") {
  MelSpectrogramParams params;
  const auto tone = test_support::sine(1000.0, 1.0);
  const auto mel = mel_spectrogram(tone, params);
  CHECK(mel.n_mels == 128);
  CHECK(mel.frames == (16000 - 400) / 160 + 1);
  CHECK(std::all_of(mel.values.begin(), mel.values.end(), [](double v) { return std::isfinite(v) && v >= 0.0; }));

  const auto again = mel_spectrogram(tone, params);
  CHECK(again.values == mel.values);

  AudioBuffer silence;
  silence.samples.assign(8000, 0.0f);
  const auto zero = mel_spectrogram(silence, params);
  CHECK(std::all_of(zero.values.begin(), zero.values.end(), [](double v) { return v == 0.0; }));

  auto db = params;
  db.scale = MelScale::kDecibel;
  const auto zero_db = mel_spectrogram(silence, db);
  CHECK(std::all_of(zero_db.values.begin(), zero_db.values.end(), [](double v) { return v == 0.0; }));

  AudioBuffer short_audio;
  short_audio.samples.assign(399, 0.1f);
  CHECK_THROWS_WITH_AS(mel_spectrogram(short_audio, params), doctest::Contains("pad"), ValidationError);

  auto bad = params;
  bad.hop_size = 500;
  CHECK_THROWS_AS(mel_spectrogram(tone, bad), ValidationError);
  bad = params;
  bad.f_max = 9000.0;
  CHECK_THROWS_AS(mel_spectrogram(tone, bad), ValidationError);
}

TEST_CASE("a tone at a band center peaks in that band") {
  MelSpectrogramParams params;
  for (std::size_t band : {40u, 60u, 90u, 120u}) {
    // Center of band m is edge m+1 of the mel-spaced grid.
    const double mel_lo = hz_to_mel(params.f_min);
    const double mel_hi = hz_to_mel(params.f_max);
    const double center = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(band + 1) / (params.n_mels + 1));

    // Analytic triangle response at the center frequency: 1 for the band, < 1 elsewhere.
    auto edge = [&](std::size_t i) {
      return mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / (params.n_mels + 1));
    };
    auto response = [&](std::size_t m, double f) {
      return std::max(0.0, std::min((f - edge(m)) / (edge(m + 1) - edge(m)), (edge(m + 2) - f) / (edge(m + 2) - edge(m + 1))));
    };
    std::size_t best = 0;
    for (std::size_t m = 1; m < params.n_mels; ++m) {
      if (response(m, center) > response(best, center)) best = m;
    }
    CHECK(response(band, center) == doctest::Approx(1.0));
    CHECK(best == band);

    const auto mel = mel_spectrogram(test_support::sine(center, 0.5), params);
    for (std::size_t t = 0; t < mel.frames; ++t) {
      std::size_t argmax = 0;
      for (std::size_t m = 1; m < mel.n_mels; ++m) {
        if (mel.at(m, t) > mel.at(argmax, t)) argmax = m;
      }
      CHECK(argmax == band);
    }
  }
}

TEST_CASE("percussive_component separates tones from clicks") {
  SUBCASE("sustained sine is mostly removed") {
    const auto tone = test_support::sine(440.0, 2.0);
    const auto perc = percussive_component(tone);
    REQUIRE(perc.samples.size() == tone.samples.size());
    CHECK(energy(perc.samples) < 0.1 * energy(tone.samples));
  }
  SUBCASE("impulse train is mostly kept") {
    const auto clicks = test_support::click_train(2.0, 0.25);
    const auto perc = percussive_component(clicks);
    REQUIRE(perc.samples.size() == clicks.samples.size());
    CHECK(energy(perc.samples) >= 0.8 * energy(clicks.samples));
    CHECK(energy(perc.samples) <= energy(clicks.samples));
  }
  SUBCASE("silence stays silent") {
    AudioBuffer silence;
    silence.samples.assign(16000, 0.0f);
    const auto perc = percussive_component(silence);
    CHECK(std::all_of(perc.samples.begin(), perc.samples.end(), [](float s) { return s == 0.0f; }));
  }
  SUBCASE("energy never increases on reapplication") {
    const auto song = test_support::fixture_song(3.0);
    const auto once = percussive_component(song);
    const auto twice = percussive_component(once);
    CHECK(energy(once.samples) <= energy(song.samples));
    CHECK(energy(twice.samples) <= energy(once.samples));
  }
}

namespace {

MelSpectrogram make_mel(std::size_t bands, std::size_t frames, const std::vector<double>& values) {
  MelSpectrogram mel;
  mel.n_mels = bands;
  mel.frames = frames;
  mel.values = values;
  return mel;
}

}  // namespace

TEST_CASE("beat_weights worked examples") {
  SUBCASE("constant amplitude gives the uniform ramp") {
    const auto env = beat_weights(make_mel(2, 10, std::vector<double>(20, 3.5)), 4);
    const std::vector<double> expected{0.25, 0.5, 0.75, 1.0};
    for (std::size_t k = 0; k < 4; ++k) CHECK(env.weights[k] == doctest::Approx(expected[k]).epsilon(1e-12));
  }
  SUBCASE("silence falls back to the uniform ramp") {
    const auto env = beat_weights(make_mel(3, 7, std::vector<double>(21, 0.0)), 4);
    const std::vector<double> expected{0.25, 0.5, 0.75, 1.0};
    for (std::size_t k = 0; k < 4; ++k) CHECK(env.weights[k] == doctest::Approx(expected[k]).epsilon(1e-12));
  }
  SUBCASE("a loud final frame dominates the accumulation") {
    // Column maxima [1, 1, 1, 9]; the quieter band never wins.
    const auto env = beat_weights(make_mel(2, 4, {1, 1, 1, 9, 0.5, 0.2, 0.1, 3}), 4);
    CHECK(env.weights[0] == doctest::Approx(1.0 / 12).epsilon(1e-12));
    CHECK(env.weights[1] == doctest::Approx(2.0 / 12).epsilon(1e-12));
    CHECK(env.weights[2] == doctest::Approx(3.0 / 12).epsilon(1e-12));
    CHECK(env.weights[3] == 1.0);
  }
  SUBCASE("invalid arguments") {
    CHECK_THROWS_AS(beat_weights(make_mel(1, 3, {1, 2, 3}), 0), ValidationError);
    CHECK_THROWS_AS(beat_weights(make_mel(0, 0, {}), 3), ValidationError);
  }
}

TEST_CASE("beat_weights properties over random spectrograms") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> dim(1, 40);
  std::uniform_int_distribution<std::size_t> steps_dist(1, 64);
  std::exponential_distribution<double> value(1.0);
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t bands = dim(rng);
    const std::size_t frames = dim(rng);
    std::vector<double> values(bands * frames);
    for (double& v : values) v = value(rng);
    const auto mel = make_mel(bands, frames, values);
    const std::size_t steps = steps_dist(rng);
    const auto env = beat_weights(mel, steps);
    REQUIRE(env.steps() == steps);
    CHECK(env.weights.back() == 1.0);
    CHECK(env.weights.front() >= 0.0);
    for (std::size_t k = 1; k < steps; ++k) CHECK(env.weights[k] >= env.weights[k - 1]);

    const double c = scale(rng);
    auto scaled = mel;
    for (double& v : scaled.values) v *= c;
    const auto env_scaled = beat_weights(scaled, steps);
    for (std::size_t k = 0; k < steps; ++k) CHECK(std::abs(env_scaled.weights[k] - env.weights[k]) <= 1e-9);
  }
}

TEST_CASE("resample_linear aligns endpoints") {
  const std::vector<double> v{0.0, 10.0};
  const auto r = resample_linear(v, 5);
  CHECK(r == std::vector<double>{0.0, 2.5, 5.0, 7.5, 10.0});
  CHECK(resample_linear(v, 2) == v);
}

TEST_CASE("WAV encode/decode round trip within quantization") {
  const auto tone = test_support::sine(523.25, 0.3, 16000, 0.6);
  const auto bytes = encode_wav(tone);
  const auto back = decode_wav(bytes, 16000);
  REQUIRE(back.samples.size() == tone.samples.size());
  for (std::size_t i = 0; i < tone.samples.size(); ++i) CHECK(std::abs(back.samples[i] - tone.samples[i]) < 1e-4);
}
