#include "beatframe/compositor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <opencv2/imgproc.hpp>
#include <random>
#include <regex>
#include <sstream>

#include "beatframe/digest.hpp"
#include "beatframe/error.hpp"
#include "beatframe/process.hpp"
#include "json.hpp"

namespace beatframe::compositor {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::size_t grid_frame(double seconds, int fps) {
  return static_cast<std::size_t>(std::llround(std::max(0.0, seconds) * fps));
}

double grid_time(std::size_t frame, int fps) { return static_cast<double>(frame) / fps; }

std::size_t segment_start_frame(const SegmentPlan& s) { return s.keyframes.front().frame; }

class ScratchDir {
 public:
  explicit ScratchDir(const fs::path& near) {
    std::random_device rd;
    path_ = near / (".render-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string escape_vtt(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '\n': out += ' '; break;
      default: out += c;
    }
  }
  return out;
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

}  // namespace

void TimelineConfig::validate() const {
  if (fps < 1) throw ValidationError("fps must be at least 1");
  if (keyframes_per_transition < 2) throw ValidationError("a transition needs at least two keyframes");
}

std::size_t Timeline::frame_count() const { return grid_frame(total_duration, fps); }

std::size_t Timeline::transition_count() const {
  return static_cast<std::size_t>(
      std::count_if(segments.begin(), segments.end(), [](const SegmentPlan& s) { return s.transition; }));
}

Timeline build_timeline(const std::vector<LyricCue>& lines, double duration, const TimelineConfig& config) {
  config.validate();
  if (!(duration > 0.0) || !std::isfinite(duration)) throw ValidationError("duration must be positive");
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].start < 0.0) throw ValidationError("line " + std::to_string(i) + " starts before 0");
    if (i > 0 && lines[i].start < lines[i - 1].start) throw ValidationError("lyric lines are not sorted");
  }
  if (!lines.empty() && lines.back().start > duration) {
    throw ValidationError("last line starts after the end of the audio");
  }

  Timeline t;
  t.fps = config.fps;
  t.total_duration = duration;
  const std::size_t total = t.frame_count();
  const int fps = config.fps;

  if (lines.size() < 2) {
    SegmentPlan s;
    s.start = 0.0;
    s.end = duration;
    s.lyric = lines.empty() ? std::string() : lines.front().text;
    s.keyframes.push_back(Keyframe{0.0, 0, {}, {}});
    t.segments.push_back(std::move(s));
    return t;
  }

  std::vector<std::size_t> bounds{0};
  for (std::size_t i = 1; i < lines.size(); ++i) bounds.push_back(std::min(grid_frame(lines[i].start, fps), total));
  bounds.push_back(total);

  const std::size_t k_count = config.keyframes_per_transition;
  for (std::size_t i = 0; i + 1 < lines.size(); ++i) {
    const std::size_t a = bounds[i];
    const std::size_t b = bounds[i + 1];
    if (b - a < k_count - 1 || b <= a) {
      throw ValidationError("lines " + std::to_string(i) + " and " + std::to_string(i + 1) + " are closer than " +
                            std::to_string(k_count - 1) + " frames");
    }
    SegmentPlan s;
    s.start = grid_time(a, fps);
    s.end = grid_time(b, fps);
    s.lyric = lines[i].text;
    s.transition = true;
    for (std::size_t k = 0; k < k_count; ++k) {
      const std::size_t f = a + static_cast<std::size_t>(
                                    std::llround(static_cast<double>(k * (b - a)) / static_cast<double>(k_count - 1)));
      s.keyframes.push_back(Keyframe{grid_time(f, fps), f, {}, {}});
    }
    for (std::size_t k = 0; k + 1 < k_count; ++k) {
      s.morph_steps.push_back(s.keyframes[k + 1].frame - s.keyframes[k].frame - 1);
    }
    t.segments.push_back(std::move(s));
  }

  SegmentPlan hold;
  hold.start = grid_time(bounds[lines.size() - 1], fps);
  hold.end = duration;
  hold.lyric = lines.back().text;
  hold.keyframes.push_back(Keyframe{hold.start, bounds[lines.size() - 1], {}, {}});
  t.segments.push_back(std::move(hold));
  return t;
}

Image cross_dissolve(const Image& a, const Image& b, std::size_t i, std::size_t denom) {
  if (a.width != b.width || a.height != b.height) throw ShapeError("cross_dissolve: image sizes differ");
  if (denom == 0 || i > denom) throw ValidationError("cross_dissolve: position outside [0, 1]");
  Image out(a.width, a.height);
  const auto d = static_cast<std::uint64_t>(denom);
  const auto wb = static_cast<std::uint64_t>(i);
  const auto wa = d - wb;
  for (std::size_t p = 0; p < a.rgb.size(); ++p) {
    // floor(x / d + 1/2) in integers.
    const std::uint64_t num = 2 * (wa * a.rgb[p] + wb * b.rgb[p]) + d;
    out.rgb[p] = static_cast<std::uint8_t>(num / (2 * d));
  }
  return out;
}

std::vector<Image> morph_frames(const Image& a, const Image& b, std::size_t steps, const Morpher& morpher) {
  if (a.width != b.width || a.height != b.height) throw ShapeError("morph_frames: image sizes differ");
  std::vector<Image> out;
  out.reserve(steps);
  for (std::size_t i = 1; i <= steps; ++i) {
    out.push_back(morpher ? morpher(a, b, i, steps + 1) : cross_dissolve(a, b, i, steps + 1));
  }
  return out;
}

SubtitleBand subtitle_band(int height, double fraction) {
  const int rows = std::clamp(static_cast<int>(std::lround(height * fraction)), 1, height);
  return {height - rows, height};
}

void burn_subtitle(Image& frame, const std::string& text, double band_fraction) {
  const auto words = split_words(text);
  if (words.empty() || frame.empty()) return;
  const auto band = subtitle_band(frame.height, band_fraction);
  const int band_h = band.bottom - band.top;
  cv::Mat roi(band_h, frame.width, CV_8UC3, frame.rgb.data() + static_cast<std::size_t>(band.top) * frame.width * 3);
  roi *= 0.5;

  const int font = cv::FONT_HERSHEY_SIMPLEX;
  const double max_width = 0.94 * frame.width;
  auto wrap = [&](double scale) {
    std::vector<std::string> rows;
    std::string current;
    for (const auto& w : words) {
      const std::string trial = current.empty() ? w : current + " " + w;
      int base = 0;
      if (!current.empty() && cv::getTextSize(trial, font, scale, 1, &base).width > max_width) {
        rows.push_back(current);
        current = w;
      } else {
        current = trial;
      }
    }
    rows.push_back(current);
    return rows;
  };

  int base = 0;
  const double unit_h = cv::getTextSize("Ag", font, 1.0, 1, &base).height + base;
  std::vector<std::string> rows;
  double scale = 0.0;
  for (int n = 1; n <= 3; ++n) {
    scale = 0.8 * band_h / (n * unit_h);
    rows = wrap(scale);
    if (static_cast<int>(rows.size()) <= n) break;
  }
  const int line_h = static_cast<int>(std::lround(band_h / static_cast<double>(std::max<std::size_t>(rows.size(), 1))));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto size = cv::getTextSize(rows[r], font, scale, 1, &base);
    const int x = std::max(0, (frame.width - size.width) / 2);
    const int y = static_cast<int>(r) * line_h + (line_h + size.height) / 2;
    cv::putText(roi, rows[r], {x, y}, font, scale, cv::Scalar(255, 255, 255), 1, cv::LINE_AA);
  }
}

void for_each_frame(const Timeline& timeline, const VideoSpec& spec,
                    const std::function<void(std::size_t, const Image&)>& sink) {
  if (timeline.segments.empty()) throw ValidationError("timeline has no segments");
  if (spec.fps != timeline.fps) throw ValidationError("video fps differs from the timeline fps");

  int width = spec.width;
  int height = spec.height;
  std::vector<std::vector<Image>> keyframes(timeline.segments.size());
  for (std::size_t s = 0; s < timeline.segments.size(); ++s) {
    const auto& seg = timeline.segments[s];
    if (seg.keyframes.empty()) throw ValidationError("segment " + std::to_string(s) + " has no keyframes");
    for (const auto& k : seg.keyframes) {
      if (k.image.empty()) throw ValidationError("segment " + std::to_string(s) + " has an unresolved keyframe");
      if (width == 0) {
        width = k.image.width;
        height = k.image.height;
      }
      keyframes[s].push_back(k.image.width == width && k.image.height == height ? k.image
                                                                               : resize(k.image, width, height));
    }
    if (s > 0 && segment_start_frame(seg) < segment_start_frame(timeline.segments[s - 1])) {
      throw Error("timeline segments are out of order");
    }
  }

  const std::size_t total = timeline.frame_count();
  std::size_t emitted = 0;
  for (std::size_t s = 0; s < timeline.segments.size(); ++s) {
    const auto& seg = timeline.segments[s];
    const auto& kf = keyframes[s];
    const std::size_t first = segment_start_frame(seg);
    const std::size_t last = s + 1 < timeline.segments.size() ? segment_start_frame(timeline.segments[s + 1]) : total;
    if (first != emitted) throw Error("timeline frames do not tile: expected frame " + std::to_string(emitted));
    std::size_t k = 0;
    for (std::size_t f = first; f < last; ++f) {
      while (k + 1 < kf.size() && seg.keyframes[k + 1].frame <= f) ++k;
      Image frame;
      if (k + 1 == kf.size() || seg.keyframes[k].frame == f) {
        frame = kf[k];
      } else {
        const std::size_t i = f - seg.keyframes[k].frame;
        const std::size_t denom = seg.keyframes[k + 1].frame - seg.keyframes[k].frame;
        frame = spec.morpher ? spec.morpher(kf[k], kf[k + 1], i, denom) : cross_dissolve(kf[k], kf[k + 1], i, denom);
      }
      if (spec.burn_subtitles) burn_subtitle(frame, seg.lyric, spec.subtitle_band);
      sink(f, frame);
      ++emitted;
    }
  }
  if (emitted != total) {
    throw Error("rendered " + std::to_string(emitted) + " frames, expected " + std::to_string(total));
  }
}

std::string FrameManifest::to_json() const {
  return json{{"fps", fps}, {"width", width}, {"height", height}, {"frame_count", digests.size()}, {"frames", digests}}
             .dump(2) +
         "\n";
}

FrameManifest FrameManifest::from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    FrameManifest m;
    m.fps = j.at("fps").get<int>();
    m.width = j.at("width").get<int>();
    m.height = j.at("height").get<int>();
    m.digests = j.at("frames").get<std::vector<std::string>>();
    if (j.at("frame_count").get<std::size_t>() != m.digests.size()) throw FormatError("frame_count mismatch");
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("frame manifest: ") + e.what());
  }
}

FrameManifest frame_manifest(const Timeline& timeline, const VideoSpec& spec) {
  FrameManifest m;
  m.fps = spec.fps;
  for_each_frame(timeline, spec, [&](std::size_t, const Image& frame) {
    m.width = frame.width;
    m.height = frame.height;
    m.digests.push_back(pixel_digest(frame));
  });
  return m;
}

RenderResult render_video(const Timeline& timeline, const audio::AudioBuffer& audio, const VideoSpec& spec) {
  if (timeline.segments.empty()) throw ValidationError("timeline has no segments");
  if (spec.output.empty()) throw ValidationError("no output path");
  if ((spec.width % 2) != 0 || (spec.height % 2) != 0) throw ValidationError("H.264 needs even frame dimensions");
  const auto ffmpeg = process::require_ffmpeg();

  const fs::path out = fs::absolute(spec.output);
  fs::create_directories(out.parent_path());
  ScratchDir scratch(out.parent_path());

  RenderResult result;
  result.manifest.fps = spec.fps;
  for_each_frame(timeline, spec, [&](std::size_t index, const Image& frame) {
    if ((frame.width % 2) != 0 || (frame.height % 2) != 0) {
      throw ValidationError("H.264 needs even frame dimensions");
    }
    char name[32];
    std::snprintf(name, sizeof name, "frame_%06zu.png", index);
    write_png(scratch.path() / name, frame);
    result.manifest.width = frame.width;
    result.manifest.height = frame.height;
    result.manifest.digests.push_back(pixel_digest(frame));
  });
  result.frames = result.manifest.digests.size();

  std::vector<std::string> argv{ffmpeg.string(), "-y", "-hide_banner", "-loglevel", "error",
                                "-framerate", std::to_string(spec.fps), "-i",
                                (scratch.path() / "frame_%06d.png").string()};
  if (!audio.empty()) {
    audio::write_wav(scratch.path() / "audio.wav", audio);
    argv.insert(argv.end(), {"-i", (scratch.path() / "audio.wav").string(), "-map", "0:v", "-map", "1:a", "-c:a",
                             "aac", "-b:a", "128k", "-flags:a", "+bitexact"});
  }
  const fs::path tmp = scratch.path() / "out.mp4";
  argv.insert(argv.end(), {"-c:v", "libx264", "-preset", "veryfast", "-crf", "18", "-pix_fmt", "yuv420p", "-threads",
                           "1", "-flags:v", "+bitexact", "-fflags", "+bitexact", "-movflags", "+faststart",
                           tmp.string()});
  const auto r = process::run(argv);
  if (r.exit_code != 0 || !fs::exists(tmp)) {
    throw Error("ffmpeg failed (exit " + std::to_string(r.exit_code) + "): " + r.stderr_text);
  }
  fs::rename(tmp, out);
  result.video = out;
  return result;
}

std::string format_vtt_time(double seconds) {
  const auto ms = static_cast<long long>(std::llround(std::max(0.0, seconds) * 1000.0));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%02lld:%02lld:%02lld.%03lld", ms / 3600000, (ms / 60000) % 60, (ms / 1000) % 60,
                ms % 1000);
  return buf;
}

std::string webvtt(const Timeline& timeline) {
  std::ostringstream out;
  out << "WEBVTT\n\n";
  std::size_t cue = 0;
  for (const auto& s : timeline.segments) {
    if (split_words(s.lyric).empty() || s.end <= s.start) continue;
    out << ++cue << "\n" << format_vtt_time(s.start) << " --> " << format_vtt_time(s.end) << "\n"
        << escape_vtt(s.lyric) << "\n\n";
  }
  return out.str();
}

MediaInfo probe_media(const fs::path& path) {
  if (!fs::exists(path)) throw DecodeError("no such file: " + path.string());
  const auto ffmpeg = process::require_ffmpeg();
  const auto r = process::run({ffmpeg.string(), "-hide_banner", "-nostats", "-i", path.string(), "-map", "0:v:0",
                               "-f", "null", "-progress", "pipe:1", "-"});
  if (r.exit_code != 0) throw DecodeError("ffmpeg could not read " + path.string() + ": " + r.stderr_text);

  MediaInfo info;
  std::smatch m;
  const std::string& err = r.stderr_text;
  if (std::regex_search(err, m, std::regex(R"(Duration: (\d+):(\d+):(\d+(?:\.\d+)?))"))) {
    info.duration = std::stod(m[1]) * 3600.0 + std::stod(m[2]) * 60.0 + std::stod(m[3]);
  }
  if (std::regex_search(err, m, std::regex(R"(Video: (\w+)[^\n]*?, (\d+)x(\d+))"))) {
    info.video_codec = m[1];
    info.width = std::stoi(m[2]);
    info.height = std::stoi(m[3]);
  }
  if (std::regex_search(err, m, std::regex(R"(Audio: (\w+))"))) info.audio_codec = m[1];
  const std::string progress(r.stdout_bytes.begin(), r.stdout_bytes.end());
  const std::regex frame_re(R"(frame=(\d+))");
  for (auto it = std::sregex_iterator(progress.begin(), progress.end(), frame_re);
       it != std::sregex_iterator(); ++it) {
    info.video_frames = std::stoul((*it)[1]);
  }
  return info;
}

}  // namespace beatframe::compositor
