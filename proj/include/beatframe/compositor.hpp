#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "beatframe/audio.hpp"
#include "beatframe/image.hpp"

namespace beatframe::compositor {

struct LyricCue {
  double start = 0.0;
  std::string text;
};

struct Keyframe {
  double time = 0.0;   // seconds, on the fps grid
  std::size_t frame = 0;  // time * fps
  std::string id;      // illustration id, filled by the caller
  Image image;
};

struct SegmentPlan {
  double start = 0.0;
  double end = 0.0;
  std::string lyric;
  bool transition = false;  // false for the terminal hold / static segment
  std::vector<Keyframe> keyframes;
  // Frames synthesized between consecutive keyframes, one entry per gap.
  std::vector<std::size_t> morph_steps;
};

struct TimelineConfig {
  int fps = 12;
  std::size_t keyframes_per_transition = 5;

  void validate() const;
};

struct Timeline {
  std::vector<SegmentPlan> segments;
  int fps = 12;
  double total_duration = 0.0;

  /// round(fps * total_duration)
  std::size_t frame_count() const;
  std::size_t transition_count() const;
};

/// One transition per adjacent pair of lines plus a terminal hold on the last
/// illustration. Fewer than two lines give one static segment. Segment and
/// keyframe times are quantized to the frame grid; the first segment starts at 0.
Timeline build_timeline(const std::vector<LyricCue>& lines, double duration, const TimelineConfig& config = {});

/// Blend `i / denom` of the way from a to b. Must be exact under swapping
/// (a, b, i) with (b, a, denom - i).
using Morpher = std::function<Image(const Image& a, const Image& b, std::size_t i, std::size_t denom)>;

/// Integer cross-dissolve, rounding half up.
Image cross_dissolve(const Image& a, const Image& b, std::size_t i, std::size_t denom);

/// Frames at t = i / (steps + 1), i = 1..steps.
std::vector<Image> morph_frames(const Image& a, const Image& b, std::size_t steps, const Morpher& morpher = {});

struct VideoSpec {
  std::filesystem::path output;
  int fps = 12;
  // 0 keeps the keyframe size; otherwise keyframes are rescaled.
  int width = 0;
  int height = 0;
  bool burn_subtitles = false;
  // Lower fraction of the frame reserved for burned-in text.
  double subtitle_band = 0.2;
  Morpher morpher;
};

struct SubtitleBand {
  int top = 0;
  int bottom = 0;
};
SubtitleBand subtitle_band(int height, double fraction);

/// Draws `text` inside the band; pixels outside it are untouched.
void burn_subtitle(Image& frame, const std::string& text, double band_fraction);

/// Calls `sink(index, frame)` for every frame of the timeline in order.
void for_each_frame(const Timeline& timeline, const VideoSpec& spec,
                    const std::function<void(std::size_t, const Image&)>& sink);

struct FrameManifest {
  int fps = 0;
  int width = 0;
  int height = 0;
  std::vector<std::string> digests;

  std::string to_json() const;
  static FrameManifest from_json(const std::string& text);
  bool operator==(const FrameManifest&) const = default;
};

FrameManifest frame_manifest(const Timeline& timeline, const VideoSpec& spec);

struct RenderResult {
  std::filesystem::path video;
  FrameManifest manifest;
  std::size_t frames = 0;
};

/// Writes an H.264/AAC MP4 through ffmpeg. Nothing is written on failure.
RenderResult render_video(const Timeline& timeline, const audio::AudioBuffer& audio, const VideoSpec& spec);

std::string webvtt(const Timeline& timeline);
std::string format_vtt_time(double seconds);

struct MediaInfo {
  double duration = 0.0;
  std::size_t video_frames = 0;
  std::string video_codec;
  std::string audio_codec;
  int width = 0;
  int height = 0;
};

/// Container facts from ffmpeg's own reporting; decodes the video to count frames.
MediaInfo probe_media(const std::filesystem::path& path);

}  // namespace beatframe::compositor
