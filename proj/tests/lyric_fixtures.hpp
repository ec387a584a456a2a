#pragma once

#include <string>
#include <vector>

#include "beatframe/audio.hpp"
#include "beatframe/lyric_model.hpp"
#include "beatframe/random.hpp"

namespace test_support {

// Encoder input small enough for finite differences and quick overfitting.
inline beatframe::lyrics::ModelConfig tiny_model_config(std::size_t embed = 8, std::size_t layers = 2) {
  beatframe::lyrics::ModelConfig c;
  c.encoder.layers = layers;
  c.encoder.heads = 2;
  c.encoder.embed_dim = embed;
  c.encoder.patch_height = 4;
  c.encoder.patch_width = 4;
  c.encoder.patch_stride = 2;
  c.encoder.latent_dim = 4;
  c.encoder.input_mels = 8;
  c.encoder.input_frames = 8;
  c.encoder.input_scale = 0.1;
  c.decoder.layers = layers;
  c.decoder.heads = 2;
  c.decoder.embed_dim = embed;
  c.decoder.max_sequence_length = 16;
  c.mel.n_mels = 8;
  c.init_seed = 7;
  return c;
}

inline beatframe::audio::MelSpectrogram random_mel(std::size_t n_mels, std::size_t frames, std::uint64_t seed,
                                                   double scale = 10.0) {
  beatframe::audio::MelSpectrogram m;
  m.n_mels = n_mels;
  m.frames = frames;
  m.values.resize(n_mels * frames);
  beatframe::Rng rng(seed);
  for (auto& v : m.values) v = rng.uniform() * scale;
  return m;
}

}  // namespace test_support
