#include "beatframe/audio.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <string>

#include "beatframe/error.hpp"
#include "beatframe/process.hpp"
#include "fft.hpp"

namespace beatframe::audio {

namespace {

std::uint16_t read_u16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }
std::uint32_t read_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot open audio file '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool looks_like_wav(std::span<const std::uint8_t> b) {
  return b.size() >= 12 && std::memcmp(b.data(), "RIFF", 4) == 0 && std::memcmp(b.data() + 8, "WAVE", 4) == 0;
}

bool looks_like_mp3(std::span<const std::uint8_t> b) {
  if (b.size() >= 3 && std::memcmp(b.data(), "ID3", 3) == 0) return true;
  return b.size() >= 2 && b[0] == 0xFF && (b[1] & 0xE0) == 0xE0;
}

void peak_normalize(std::vector<float>& samples) {
  float peak = 0.0f;
  for (float s : samples) peak = std::max(peak, std::abs(s));
  if (peak > 1.0f) {
    const float gain = 1.0f / peak;
    for (float& s : samples) s *= gain;
  }
}

double sinc(double x) {
  if (std::abs(x) < 1e-12) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

}  // namespace

AudioBuffer decode_wav(std::span<const std::uint8_t> bytes, int target_rate) {
  if (!looks_like_wav(bytes)) throw FormatError("not a RIFF/WAVE stream");

  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint32_t rate = 0;
  std::uint16_t bits = 0;
  const std::uint8_t* data = nullptr;
  std::size_t data_size = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* chunk = bytes.data() + pos;
    const std::uint32_t size = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (body + 16 > bytes.size()) throw DecodeError("truncated WAV fmt chunk");
      format = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      rate = read_u32(bytes.data() + body + 4);
      bits = read_u16(bytes.data() + body + 14);
      if (format == 0xFFFE && size >= 26) {
        format = read_u16(bytes.data() + body + 24);  // WAVE_FORMAT_EXTENSIBLE sub-format
      }
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      // Streamed WAVs (e.g. piped from ffmpeg) carry a placeholder size.
      data_size = std::min<std::size_t>(size, bytes.size() - body);
      break;
    }
    pos = body + size + (size & 1U);
  }

  if (channels == 0 || rate == 0) throw DecodeError("WAV stream has no valid fmt chunk");
  if (data == nullptr) throw DecodeError("WAV stream has no data chunk");
  if (format != 1 && format != 3) {
    throw FormatError("unsupported WAV sample format " + std::to_string(format));
  }
  const bool is_float = format == 3;
  if ((is_float && bits != 32 && bits != 64) || (!is_float && bits != 8 && bits != 16 && bits != 24 && bits != 32)) {
    throw FormatError("unsupported WAV bit depth " + std::to_string(bits));
  }

  const std::size_t bytes_per_sample = bits / 8;
  const std::size_t frame_bytes = bytes_per_sample * channels;
  const std::size_t frame_count = data_size / frame_bytes;

  auto sample_at = [&](const std::uint8_t* p) -> double {
    if (is_float) {
      if (bits == 32) {
        float f;
        std::memcpy(&f, p, 4);
        return f;
      }
      double d;
      std::memcpy(&d, p, 8);
      return d;
    }
    switch (bits) {
      case 8:
        return (static_cast<double>(p[0]) - 128.0) / 128.0;
      case 16:
        return static_cast<std::int16_t>(read_u16(p)) / 32768.0;
      case 24: {
        std::int32_t v = static_cast<std::int32_t>(p[0] | (p[1] << 8) | (p[2] << 16));
        if (v & 0x800000) v |= ~0xFFFFFF;
        return v / 8388608.0;
      }
      default:
        return static_cast<std::int32_t>(read_u32(p)) / 2147483648.0;
    }
  };

  AudioBuffer out;
  out.sample_rate = static_cast<int>(rate);
  out.samples.resize(frame_count);
  for (std::size_t i = 0; i < frame_count; ++i) {
    const std::uint8_t* frame = data + i * frame_bytes;
    double sum = 0.0;
    for (std::size_t c = 0; c < channels; ++c) sum += sample_at(frame + c * bytes_per_sample);
    out.samples[i] = static_cast<float>(sum / channels);
  }

  if (target_rate > 0 && target_rate != out.sample_rate) out = resample(out, target_rate);
  peak_normalize(out.samples);
  return out;
}

AudioBuffer load_audio(const std::filesystem::path& path, int target_rate) {
  if (!std::filesystem::exists(path)) throw DecodeError("audio file '" + path.string() + "' does not exist");
  const auto bytes = read_file(path);
  if (bytes.empty()) throw DecodeError("audio file '" + path.string() + "' is empty");

  if (looks_like_wav(bytes)) {
    try {
      return decode_wav(bytes, target_rate);
    } catch (const DecodeError& e) {
      throw DecodeError("failed to decode '" + path.string() + "': " + e.what());
    }
  }
  if (looks_like_mp3(bytes)) {
    const auto ffmpeg = process::require_ffmpeg();
    auto result = process::run({ffmpeg.string(), "-v", "error", "-nostdin", "-i", path.string(), "-f", "wav",
                                "-acodec", "pcm_f32le", "-"});
    if (result.exit_code != 0 || result.stdout_bytes.empty()) {
      throw DecodeError("failed to decode MP3 '" + path.string() + "': " + result.stderr_text);
    }
    return decode_wav(result.stdout_bytes, target_rate);
  }
  throw FormatError("unsupported audio container for '" + path.string() + "' (expected WAV or MP3)");
}

std::vector<std::uint8_t> encode_wav(const AudioBuffer& audio) {
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(audio.samples.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  auto put_str = [&](const char* s) { out.insert(out.end(), s, s + 4); };
  auto put_u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  auto put_u16 = [&](std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  };
  put_str("RIFF");
  put_u32(36 + data_bytes);
  put_str("WAVE");
  put_str("fmt ");
  put_u32(16);
  put_u16(1);
  put_u16(1);
  put_u32(static_cast<std::uint32_t>(audio.sample_rate));
  put_u32(static_cast<std::uint32_t>(audio.sample_rate) * 2);
  put_u16(2);
  put_u16(16);
  put_str("data");
  put_u32(data_bytes);
  for (float s : audio.samples) {
    const double clamped = std::clamp(static_cast<double>(s), -1.0, 1.0);
    const auto v = static_cast<std::int16_t>(std::lround(clamped * 32767.0));
    put_u16(static_cast<std::uint16_t>(v));
  }
  return out;
}

void write_wav(const std::filesystem::path& path, const AudioBuffer& audio) {
  const auto bytes = encode_wav(audio);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

AudioBuffer resample(const AudioBuffer& audio, int target_rate) {
  if (target_rate <= 0) throw ValidationError("target sample rate must be positive");
  if (audio.sample_rate == target_rate || audio.samples.empty()) {
    AudioBuffer copy = audio;
    copy.sample_rate = target_rate;
    return copy;
  }
  constexpr int kZeroCrossings = 16;
  const double ratio = static_cast<double>(target_rate) / audio.sample_rate;
  const double cutoff = std::min(1.0, ratio);
  const double half_width = kZeroCrossings / cutoff;
  const auto in_len = static_cast<std::ptrdiff_t>(audio.samples.size());
  const auto out_len = static_cast<std::size_t>(std::llround(static_cast<double>(in_len) * ratio));

  AudioBuffer out;
  out.sample_rate = target_rate;
  out.samples.resize(out_len);
  for (std::size_t n = 0; n < out_len; ++n) {
    const double t = static_cast<double>(n) / ratio;
    const auto lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::ceil(t - half_width)));
    const auto hi = std::min<std::ptrdiff_t>(in_len - 1, static_cast<std::ptrdiff_t>(std::floor(t + half_width)));
    double acc = 0.0;
    for (std::ptrdiff_t k = lo; k <= hi; ++k) {
      const double d = t - static_cast<double>(k);
      const double window = 0.5 + 0.5 * std::cos(std::numbers::pi * d / half_width);
      acc += audio.samples[static_cast<std::size_t>(k)] * cutoff * sinc(cutoff * d) * window;
    }
    out.samples[n] = static_cast<float>(acc);
  }
  return out;
}

std::vector<AudioBuffer> segment_clips(const AudioBuffer& audio, double clip_seconds) {
  if (!(clip_seconds > 0.0)) throw ValidationError("clip_seconds must be positive");
  std::vector<AudioBuffer> clips;
  if (audio.samples.empty()) return clips;
  const auto clip_len = static_cast<std::size_t>(std::llround(clip_seconds * audio.sample_rate));
  if (clip_len == 0) throw ValidationError("clip_seconds is shorter than one sample");
  const std::size_t count = (audio.samples.size() + clip_len - 1) / clip_len;
  clips.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    AudioBuffer clip;
    clip.sample_rate = audio.sample_rate;
    clip.samples.assign(clip_len, 0.0f);
    const std::size_t begin = i * clip_len;
    const std::size_t end = std::min(begin + clip_len, audio.samples.size());
    std::copy(audio.samples.begin() + static_cast<std::ptrdiff_t>(begin),
              audio.samples.begin() + static_cast<std::ptrdiff_t>(end), clip.samples.begin());
    clips.push_back(std::move(clip));
  }
  return clips;
}

AudioBuffer slice_clip(const AudioBuffer& audio, double start_seconds, double clip_seconds) {
  if (!(clip_seconds > 0.0)) throw ValidationError("clip_seconds must be positive");
  if (start_seconds < 0.0) throw ValidationError("clip start must be non-negative");
  const auto clip_len = static_cast<std::size_t>(std::llround(clip_seconds * audio.sample_rate));
  const auto begin = static_cast<std::size_t>(std::llround(start_seconds * audio.sample_rate));
  AudioBuffer clip;
  clip.sample_rate = audio.sample_rate;
  clip.samples.assign(clip_len, 0.0f);
  for (std::size_t i = 0; i < clip_len && begin + i < audio.samples.size(); ++i) {
    clip.samples[i] = audio.samples[begin + i];
  }
  return clip;
}

void MelSpectrogramParams::validate(int sample_rate) const {
  if (n_mels == 0) throw ValidationError("n_mels must be positive");
  if (window_size == 0 || hop_size == 0) throw ValidationError("window and hop sizes must be positive");
  if (hop_size > window_size) throw ValidationError("hop_size must not exceed window_size");
  if (n_fft < window_size) throw ValidationError("n_fft must be at least window_size");
  if (!(f_min >= 0.0 && f_min < f_max)) throw ValidationError("require 0 <= f_min < f_max");
  if (f_max > sample_rate / 2.0 + 1e-9) throw ValidationError("f_max exceeds the Nyquist frequency");
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_filterbank(const MelSpectrogramParams& params, int sample_rate) {
  const std::size_t bins = params.n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(params.f_min);
  const double mel_hi = hz_to_mel(params.f_max);
  std::vector<double> edges(params.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(params.n_mels + 1));
  }
  std::vector<double> bank(params.n_mels * bins, 0.0);
  for (std::size_t m = 0; m < params.n_mels; ++m) {
    const double lo = edges[m];
    const double center = edges[m + 1];
    const double hi = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(params.n_fft);
      const double rising = (f - lo) / (center - lo);
      const double falling = (hi - f) / (hi - center);
      bank[m * bins + k] = std::max(0.0, std::min(rising, falling));
    }
  }
  return bank;
}

MelSpectrogram mel_spectrogram(const AudioBuffer& audio, const MelSpectrogramParams& params) {
  params.validate(audio.sample_rate);
  if (audio.samples.size() < params.window_size) {
    throw ValidationError("audio has " + std::to_string(audio.samples.size()) + " samples, fewer than one window (" +
                          std::to_string(params.window_size) + "); pad the clip before computing a spectrogram");
  }

  const std::size_t frames = (audio.samples.size() - params.window_size) / params.hop_size + 1;
  const std::size_t bins = params.n_fft / 2 + 1;
  const auto bank = mel_filterbank(params, audio.sample_rate);
  const auto window = detail::hann_window(params.window_size);

  MelSpectrogram mel;
  mel.n_mels = params.n_mels;
  mel.frames = frames;
  mel.params = params;
  mel.source_duration = audio.duration_seconds();
  mel.values.assign(params.n_mels * frames, 0.0);

  detail::RealFft fft(params.n_fft);
  std::vector<double> frame(params.n_fft, 0.0);
  std::vector<std::complex<double>> spectrum(bins);
  std::vector<double> power(bins);
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t offset = t * params.hop_size;
    for (std::size_t i = 0; i < params.window_size; ++i) frame[i] = audio.samples[offset + i] * window[i];
    fft.forward(frame, spectrum);
    for (std::size_t k = 0; k < bins; ++k) power[k] = std::norm(spectrum[k]);
    for (std::size_t m = 0; m < params.n_mels; ++m) {
      const double* row = bank.data() + m * bins;
      double acc = 0.0;
      for (std::size_t k = 0; k < bins; ++k) acc += row[k] * power[k];
      mel.at(m, t) = acc;
    }
  }

  if (params.scale == MelScale::kDecibel) {
    for (double& v : mel.values) v = std::max(0.0, 10.0 * std::log10(std::max(v, 1e-10)) + 100.0);
  }
  return mel;
}

namespace {

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  // Mirror including the edge sample: ... b a | a b c ... c b | b ...
  const auto len = static_cast<std::ptrdiff_t>(n);
  if (len == 1) return 0;
  const std::ptrdiff_t period = 2 * len;
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < len ? m : period - 1 - m);
}

}  // namespace

AudioBuffer percussive_component(const AudioBuffer& audio, const HpssParams& params) {
  AudioBuffer out;
  out.sample_rate = audio.sample_rate;
  out.samples.assign(audio.samples.size(), 0.0f);
  if (audio.samples.empty()) return out;
  if (params.kernel == 0 || params.hop_size == 0 || params.hop_size > params.n_fft) {
    throw ValidationError("invalid HPSS parameters");
  }

  const std::size_t n_fft = params.n_fft;
  const std::size_t hop = params.hop_size;
  const std::size_t pad = n_fft / 2;
  const std::size_t len = audio.samples.size();
  const std::size_t frames = (len + 2 * pad - n_fft + hop - 1) / hop + 1;
  const std::size_t padded_len = (frames - 1) * hop + n_fft;
  std::vector<double> padded(padded_len, 0.0);
  for (std::size_t i = 0; i < len; ++i) padded[pad + i] = audio.samples[i];

  const std::size_t bins = n_fft / 2 + 1;
  const auto window = detail::hann_window(n_fft);
  detail::RealFft fft(n_fft);

  std::vector<std::complex<double>> stft(frames * bins);
  std::vector<double> magnitude(frames * bins);
  std::vector<double> frame(n_fft);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < n_fft; ++i) frame[i] = padded[t * hop + i] * window[i];
    std::span<std::complex<double>> column(stft.data() + t * bins, bins);
    fft.forward(frame, column);
    for (std::size_t k = 0; k < bins; ++k) magnitude[t * bins + k] = std::abs(column[k]);
  }

  const auto half = static_cast<std::ptrdiff_t>(params.kernel / 2);
  std::vector<double> scratch(params.kernel);
  auto median = [&]() {
    auto mid = scratch.begin() + static_cast<std::ptrdiff_t>(scratch.size() / 2);
    std::nth_element(scratch.begin(), mid, scratch.end());
    return *mid;
  };

  // Harmonic energy is smooth along time, percussive energy along frequency.
  std::vector<double> harmonic(frames * bins);
  std::vector<double> percussive(frames * bins);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < bins; ++k) {
      for (std::ptrdiff_t j = -half; j <= half; ++j) {
        scratch[static_cast<std::size_t>(j + half)] =
            magnitude[reflect_index(static_cast<std::ptrdiff_t>(t) + j, frames) * bins + k];
      }
      harmonic[t * bins + k] = median();
      for (std::ptrdiff_t j = -half; j <= half; ++j) {
        scratch[static_cast<std::size_t>(j + half)] =
            magnitude[t * bins + reflect_index(static_cast<std::ptrdiff_t>(k) + j, bins)];
      }
      percussive[t * bins + k] = median();
    }
  }

  std::vector<double> accum(padded_len, 0.0);
  std::vector<double> norm(padded_len, 0.0);
  std::vector<std::complex<double>> masked(bins);
  std::vector<double> time(n_fft);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < bins; ++k) {
      const double h2 = harmonic[t * bins + k] * harmonic[t * bins + k];
      const double p2 = percussive[t * bins + k] * percussive[t * bins + k];
      const double denom = h2 + p2;
      const double mask = denom > 0.0 ? p2 / denom : 0.0;
      masked[k] = stft[t * bins + k] * mask;
    }
    fft.inverse(masked, time);
    for (std::size_t i = 0; i < n_fft; ++i) {
      accum[t * hop + i] += time[i] / static_cast<double>(n_fft) * window[i];
      norm[t * hop + i] += window[i] * window[i];
    }
  }
  for (std::size_t i = 0; i < len; ++i) {
    const double w = norm[pad + i];
    out.samples[i] = w > 1e-8 ? static_cast<float>(accum[pad + i] / w) : 0.0f;
  }
  return out;
}

double energy(std::span<const float> samples) {
  double e = 0.0;
  for (float s : samples) e += static_cast<double>(s) * s;
  return e;
}

std::vector<double> resample_linear(std::span<const double> values, std::size_t count) {
  std::vector<double> out(count, 0.0);
  if (values.empty() || count == 0) return out;
  if (values.size() == count) {
    std::copy(values.begin(), values.end(), out.begin());
    return out;
  }
  if (count == 1) {
    out[0] = values.back();
    return out;
  }
  const double scale = static_cast<double>(values.size() - 1) / static_cast<double>(count - 1);
  for (std::size_t k = 0; k < count; ++k) {
    const double x = static_cast<double>(k) * scale;
    const auto i = std::min(static_cast<std::size_t>(x), values.size() - 1);
    const double frac = x - static_cast<double>(i);
    out[k] = i + 1 < values.size() ? values[i] + frac * (values[i + 1] - values[i]) : values[i];
  }
  return out;
}

BeatEnvelope beat_weights_from_amplitudes(std::span<const double> amplitudes, std::size_t steps) {
  if (steps == 0) throw ValidationError("beat_weights requires at least one step");
  if (amplitudes.empty()) throw ValidationError("beat_weights requires a non-empty amplitude sequence");

  double global_max = 0.0;
  for (double a : amplitudes) {
    if (!std::isfinite(a) || a < 0.0) throw ValidationError("amplitudes must be finite and non-negative");
    global_max = std::max(global_max, a);
  }

  std::vector<double> normalized(amplitudes.size(), 1.0);
  if (global_max > 0.0) {
    for (std::size_t i = 0; i < amplitudes.size(); ++i) normalized[i] = amplitudes[i] / global_max;
  }

  auto rescaled = resample_linear(normalized, steps);
  double total = std::accumulate(rescaled.begin(), rescaled.end(), 0.0);
  if (!(total > 0.0)) {
    // The resampled points can all land on silent frames.
    std::fill(rescaled.begin(), rescaled.end(), 1.0);
    total = static_cast<double>(steps);
  }

  BeatEnvelope env;
  env.weights.resize(steps);
  double running = 0.0;
  for (std::size_t k = 0; k < steps; ++k) {
    running += rescaled[k];
    env.weights[k] = std::min(1.0, running / total);
  }
  env.weights.back() = 1.0;
  return env;
}

BeatEnvelope beat_weights(const MelSpectrogram& mel, std::size_t steps) {
  if (mel.frames == 0 || mel.n_mels == 0) throw ValidationError("beat_weights requires a non-empty spectrogram");
  std::vector<double> column_max(mel.frames, 0.0);
  for (std::size_t m = 0; m < mel.n_mels; ++m) {
    for (std::size_t t = 0; t < mel.frames; ++t) column_max[t] = std::max(column_max[t], mel.at(m, t));
  }
  return beat_weights_from_amplitudes(column_max, steps);
}

}  // namespace beatframe::audio
