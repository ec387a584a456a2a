#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace beatframe::audio {

inline constexpr int kDefaultSampleRate = 16000;

/// Mono PCM audio with samples in [-1, 1].
struct AudioBuffer {
  std::vector<float> samples;
  int sample_rate = kDefaultSampleRate;

  double duration_seconds() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
  bool empty() const { return samples.empty(); }
};

/// Decodes a WAV (PCM 8/16/24/32-bit or IEEE float) or MP3 file, mixes it down
/// to mono, resamples to `target_rate` and peak-normalizes so that no sample
/// exceeds 1.0 in magnitude. Quiet audio is never amplified.
///
/// MP3 decoding goes through the external ffmpeg executable (see
/// `tools::find_ffmpeg`). Throws DecodeError for unreadable input and
/// FormatError for unsupported containers.
AudioBuffer load_audio(const std::filesystem::path& path, int target_rate = kDefaultSampleRate);

/// Same as load_audio on an in-memory WAV image.
AudioBuffer decode_wav(std::span<const std::uint8_t> bytes, int target_rate = kDefaultSampleRate);

/// Writes 16-bit PCM mono WAV.
void write_wav(const std::filesystem::path& path, const AudioBuffer& audio);
std::vector<std::uint8_t> encode_wav(const AudioBuffer& audio);

/// Band-limited (windowed sinc) sample-rate conversion.
AudioBuffer resample(const AudioBuffer& audio, int target_rate);

/// Splits into consecutive non-overlapping clips of `clip_seconds`; the last
/// clip is zero-padded to full length. Empty input yields no clips.
std::vector<AudioBuffer> segment_clips(const AudioBuffer& audio, double clip_seconds);

/// The `clip_seconds` window starting at `start_seconds`, zero-padded past the end.
AudioBuffer slice_clip(const AudioBuffer& audio, double start_seconds, double clip_seconds);

enum class MelScale {
  kPower,
  // 10*log10(power) floored at -100 dB and shifted up by 100 so entries stay >= 0.
  kDecibel,
};

struct MelSpectrogramParams {
  std::size_t n_mels = 128;
  std::size_t window_size = 400;  // 25 ms at 16 kHz
  std::size_t hop_size = 160;     // 10 ms at 16 kHz
  std::size_t n_fft = 512;        // window is zero-padded up to n_fft
  double f_min = 0.0;
  double f_max = 8000.0;
  MelScale scale = MelScale::kPower;

  /// Throws ValidationError when the parameters are inconsistent for `sample_rate`.
  void validate(int sample_rate) const;
};

/// n_mels x frames, row-major.
struct MelSpectrogram {
  std::size_t n_mels = 0;
  std::size_t frames = 0;
  std::vector<double> values;
  MelSpectrogramParams params;
  double source_duration = 0.0;

  double at(std::size_t band, std::size_t frame) const { return values[band * frames + frame]; }
  double& at(std::size_t band, std::size_t frame) { return values[band * frames + frame]; }
};

/// Triangular HTK-mel filterbank, n_mels x (n_fft/2 + 1), row-major.
std::vector<double> mel_filterbank(const MelSpectrogramParams& params, int sample_rate);
double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Frames are not centered: frames = floor((len - window) / hop) + 1.
/// Throws ValidationError if the audio is shorter than one window.
MelSpectrogram mel_spectrogram(const AudioBuffer& audio, const MelSpectrogramParams& params = {});

struct HpssParams {
  std::size_t n_fft = 1024;
  std::size_t hop_size = 256;
  std::size_t kernel = 17;
};

/// Percussive part of a median-filtering harmonic/percussive separation.
AudioBuffer percussive_component(const AudioBuffer& audio, const HpssParams& params = {});

double energy(std::span<const float> samples);

/// Monotone interpolation weights w_1..w_N with w_N == 1.
struct BeatEnvelope {
  std::vector<double> weights;
  std::size_t steps() const { return weights.size(); }
};

/// Beat-driven interpolation weights from a (percussive) mel spectrogram:
/// per-frame column maximum, divided by the global maximum, linearly resampled
/// to `steps` points, then accumulated and divided by the total. A silent
/// spectrogram falls back to the uniform ramp k/N.
BeatEnvelope beat_weights(const MelSpectrogram& mel, std::size_t steps);

/// The same procedure starting from an already extracted amplitude sequence.
BeatEnvelope beat_weights_from_amplitudes(std::span<const double> amplitudes, std::size_t steps);

/// Linear resampling of `values` onto `count` points, first and last aligned.
std::vector<double> resample_linear(std::span<const double> values, std::size_t count);

}  // namespace beatframe::audio
