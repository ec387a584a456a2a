#include "beatframe/lyric_model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "beatframe/digest.hpp"
#include "beatframe/error.hpp"
#include "beatframe/random.hpp"
#include "json.hpp"

namespace beatframe::lyrics {

using nn::Graph;
using nn::Matrix;
using Var = Graph::Var;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Tokenization and vocabulary

namespace {

constexpr std::string_view kSpecials[] = {TokenVocab::kPadToken, TokenVocab::kUnkToken, TokenVocab::kStartToken,
                                          TokenVocab::kEndToken};

bool is_word_char(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; }

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (c == '<') {
      bool matched = false;
      for (std::string_view special : kSpecials) {
        if (text.substr(i, special.size()) == special) {
          flush();
          tokens.emplace_back(special);
          i += special.size() - 1;
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    if (std::isspace(c) != 0) {
      flush();
    } else if (is_word_char(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if ((c == '\'' || c == '-') && !current.empty() && i + 1 < text.size() &&
               is_word_char(static_cast<unsigned char>(text[i + 1]))) {
      current.push_back(static_cast<char>(c));
    } else {
      flush();
      tokens.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return tokens;
}

std::string detokenize(std::span<const std::string> tokens) {
  std::string out;
  bool glue_next = false;
  for (const auto& t : tokens) {
    const bool closing = t.size() == 1 && std::string_view(",.!?;:)").find(t[0]) != std::string_view::npos;
    if (!out.empty() && !closing && !glue_next) out.push_back(' ');
    out += t;
    glue_next = t == "(";
  }
  return out;
}

TokenVocab TokenVocab::build(std::span<const std::string> corpus, std::size_t min_count) {
  if (corpus.empty()) throw ValidationError("cannot build a vocabulary from an empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus) {
    for (auto& tok : tokenize(line)) ++counts[tok];
  }
  std::vector<std::string> tokens(std::begin(kSpecials), std::end(kSpecials));
  for (const auto& [tok, n] : counts) {
    const bool special = std::find(std::begin(kSpecials), std::end(kSpecials), tok) != std::end(kSpecials);
    if (!special && n >= std::max<std::size_t>(min_count, 1)) tokens.push_back(tok);
  }
  return from_tokens(std::move(tokens));
}

TokenVocab TokenVocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 4) throw ValidationError("vocabulary is missing its special tokens");
  for (std::size_t i = 0; i < 4; ++i) {
    if (tokens[i] != kSpecials[i]) throw ValidationError("vocabulary special token " + std::to_string(i) + " must be " + std::string(kSpecials[i]));
  }
  TokenVocab v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
      throw ValidationError("duplicate vocabulary token '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

int TokenVocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& TokenVocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw ValidationError("token id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> TokenVocab::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& tok : tokenize(text)) ids.push_back(id(tok));
  return ids;
}

std::string TokenVocab::decode(std::span<const int> ids) const {
  std::vector<std::string> words;
  for (int i : ids) {
    if (i == kUnk) {
      words.emplace_back(kUnkToken);
    } else if (!is_special(i)) {
      words.push_back(token(i));
    }
  }
  return detokenize(words);
}

// ---------------------------------------------------------------------------
// Configs

void MusicEncoderConfig::validate() const {
  if (layers == 0 || heads == 0 || embed_dim == 0 || latent_dim == 0) {
    throw ValidationError("encoder layers, heads, embed_dim and latent_dim must be positive");
  }
  if (embed_dim % heads != 0) throw ValidationError("encoder embed_dim must be divisible by heads");
  if (patch_height == 0 || patch_width == 0 || patch_stride == 0) throw ValidationError("patch sizes must be positive");
  if (patch_stride > patch_height || patch_stride > patch_width) {
    throw ValidationError("patch_stride must not exceed the patch size (patches overlap)");
  }
  if (input_mels < patch_height || input_frames < patch_width) {
    throw ValidationError("encoder input is smaller than one patch");
  }
  if (!(input_scale > 0.0)) throw ValidationError("input_scale must be positive");
}

void DecoderConfig::validate() const {
  if (layers == 0 || heads == 0 || embed_dim == 0) throw ValidationError("decoder layers, heads, embed_dim must be positive");
  if (embed_dim % heads != 0) throw ValidationError("decoder embed_dim must be divisible by heads");
  if (max_sequence_length < 2) throw ValidationError("max_sequence_length must be at least 2");
  if (memory_slots < 1) throw ValidationError("memory_slots must be at least 1");
}

void SamplingConfig::validate() const {
  if (top_k < 1) throw ValidationError("top_k must be at least 1");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ValidationError("top_p must lie in (0, 1]");
  if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
  if (min_tokens > max_tokens) throw ValidationError("min_tokens exceeds max_tokens");
}

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0) throw ValidationError("epochs and batch_size must be positive");
  if (!(learning_rate >= 0.0)) throw ValidationError("learning_rate must be non-negative");
  if (!(beta_floor > 0.0)) throw ValidationError("beta_floor must be positive");
  if (!(beta_warm_fraction > 0.0 && beta_warm_fraction < 1.0)) {
    throw ValidationError("beta_warm_fraction must lie in (0, 1)");
  }
  if (!(target_reduction >= 0.0 && target_reduction < 1.0)) {
    throw ValidationError("target_reduction must lie in [0, 1)");
  }
}

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate();
  mel.validate(audio::kDefaultSampleRate);
  if (mel.n_mels != encoder.input_mels) throw ValidationError("mel band count must equal encoder input_mels");
}

bool ModelConfig::operator==(const ModelConfig& o) const {
  return encoder == o.encoder && decoder == o.decoder && mel.n_mels == o.mel.n_mels &&
         mel.window_size == o.mel.window_size && mel.hop_size == o.mel.hop_size && mel.n_fft == o.mel.n_fft &&
         mel.f_min == o.mel.f_min && mel.f_max == o.mel.f_max && mel.scale == o.mel.scale && init_seed == o.init_seed;
}

// ---------------------------------------------------------------------------
// Latent math and sampling

std::pair<Eigen::VectorXd, Eigen::VectorXd> latent_params(const Eigen::VectorXd& hidden, const LatentHead& head) {
  if (head.w_mu.cols() != hidden.size() || head.w_sigma.cols() != hidden.size() ||
      head.w_mu.rows() != head.w_sigma.rows()) {
    throw ShapeError("latent head shape does not match the hidden state");
  }
  if (!hidden.allFinite() || !head.w_mu.allFinite() || !head.w_sigma.allFinite()) {
    throw NumericError("latent_params received non-finite input");
  }
  Eigen::VectorXd mu = head.w_mu * hidden;
  Eigen::VectorXd sigma = ((head.w_sigma * hidden) / 2.0).array().exp();
  if (!sigma.allFinite() || (sigma.array() <= 0.0).any()) throw NumericError("sigma overflowed or underflowed");
  return {std::move(mu), std::move(sigma)};
}

Eigen::VectorXd sample_latent(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma,
                              const std::optional<Eigen::VectorXd>& epsilon, std::uint64_t seed) {
  if (mu.size() != sigma.size()) throw ShapeError("mu and sigma differ in dimension");
  if ((sigma.array() <= 0.0).any()) throw ValidationError("sigma must be strictly positive");
  Eigen::VectorXd eps;
  if (epsilon) {
    if (epsilon->size() != mu.size()) throw ShapeError("epsilon dimension differs from mu");
    eps = *epsilon;
  } else {
    Rng rng(seed);
    eps.resize(mu.size());
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps(i) = rng.normal();
  }
  return mu + sigma.cwiseProduct(eps);
}

double kl_divergence(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma) {
  if (mu.size() != sigma.size()) throw ShapeError("mu and sigma differ in dimension");
  if ((sigma.array() <= 0.0).any()) throw ValidationError("sigma must be strictly positive");
  double total = 0.0;
  for (Eigen::Index d = 0; d < mu.size(); ++d) {
    total += mu(d) * mu(d) + sigma(d) * sigma(d) - 1.0 - 2.0 * std::log(sigma(d));
  }
  return std::max(0.0, 0.5 * total);
}

std::vector<double> filter_logits(std::span<const double> logits, const SamplingConfig& sampling) {
  sampling.validate();
  const std::size_t n = logits.size();
  std::vector<double> probs(n, 0.0);
  if (n == 0) return probs;

  double mx = -std::numeric_limits<double>::infinity();
  for (double l : logits) mx = std::max(mx, l / sampling.temperature);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    probs[i] = std::exp(logits[i] / sampling.temperature - mx);
    z += probs[i];
  }
  for (double& p : probs) p /= z;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });

  // top-k, extended over ties with the k-th entry.
  std::size_t keep = std::min(sampling.top_k, n);
  while (keep < n && probs[order[keep]] == probs[order[keep - 1]]) ++keep;

  double kept_mass = 0.0;
  for (std::size_t r = 0; r < keep; ++r) kept_mass += probs[order[r]];

  // top-p over the renormalized top-k mass, again extended over ties.
  std::size_t nucleus = sampling.top_p >= 1.0 ? keep : 0;
  double cumulative = 0.0;
  while (nucleus < keep) {
    cumulative += probs[order[nucleus]] / kept_mass;
    ++nucleus;
    if (cumulative >= sampling.top_p) break;
  }
  while (nucleus < keep && probs[order[nucleus]] == probs[order[nucleus - 1]]) ++nucleus;

  double survivor_mass = 0.0;
  for (std::size_t r = 0; r < nucleus; ++r) survivor_mass += probs[order[r]] / kept_mass;
  std::vector<double> out(n, 0.0);
  for (std::size_t r = 0; r < nucleus; ++r) out[order[r]] = probs[order[r]] / kept_mass / survivor_mass;
  return out;
}

double beta_schedule(double progress, const TrainConfig& config) {
  if (!(progress >= 0.0 && progress <= 1.0)) throw ValidationError("training progress must lie in [0, 1]");
  if (progress >= 1.0) return 1.0;
  if (progress <= config.beta_warm_fraction) return config.beta_floor;
  const double ramp = (progress - config.beta_warm_fraction) / (1.0 - config.beta_warm_fraction);
  return config.beta_floor + ramp * (1.0 - config.beta_floor);
}

// ---------------------------------------------------------------------------
// Model

namespace {

Matrix init_normal(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * stddev;
  return m;
}

Matrix zeros(std::size_t rows, std::size_t cols) {
  return Matrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Matrix ones(std::size_t rows, std::size_t cols) {
  return Matrix::Ones(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void add_attention_params(nn::ParameterSet& ps, Rng& rng, const std::string& prefix, std::size_t dim) {
  for (const char* w : {"wq", "wk", "wv", "wo"}) ps.add(prefix + "." + w, init_normal(rng, dim, dim, 0.02));
  for (const char* b : {"bq", "bk", "bv", "bo"}) ps.add(prefix + "." + b, zeros(1, dim));
}

void add_norm_params(nn::ParameterSet& ps, const std::string& prefix, std::size_t dim) {
  ps.add(prefix + ".g", ones(1, dim));
  ps.add(prefix + ".b", zeros(1, dim));
}

void add_ffn_params(nn::ParameterSet& ps, Rng& rng, const std::string& prefix, std::size_t dim) {
  ps.add(prefix + ".w1", init_normal(rng, dim, 4 * dim, 0.02));
  ps.add(prefix + ".b1", zeros(1, 4 * dim));
  ps.add(prefix + ".w2", init_normal(rng, 4 * dim, dim, 0.02));
  ps.add(prefix + ".b2", zeros(1, dim));
}

}  // namespace

LyricModel::LyricModel(ModelConfig config, TokenVocab vocab) : config_(std::move(config)), vocab_(std::move(vocab)) {
  config_.validate();
  if (vocab_.size() <= 4) throw ValidationError("vocabulary has no tokens besides the specials");
  const auto& enc = config_.encoder;
  const auto& dec = config_.decoder;
  Rng rng(config_.init_seed);

  const std::size_t patch_dim = enc.patch_height * enc.patch_width;
  params_.add("enc.patch.w", init_normal(rng, patch_dim, enc.embed_dim, 0.02));
  params_.add("enc.patch.b", zeros(1, enc.embed_dim));
  params_.add("enc.cls", init_normal(rng, 1, enc.embed_dim, 0.02));
  params_.add("enc.pos", init_normal(rng, enc.positions(), enc.embed_dim, 0.02));
  for (std::size_t l = 0; l < enc.layers; ++l) {
    const std::string p = "enc.l" + std::to_string(l);
    add_norm_params(params_, p + ".ln1", enc.embed_dim);
    add_attention_params(params_, rng, p + ".attn", enc.embed_dim);
    add_norm_params(params_, p + ".ln2", enc.embed_dim);
    add_ffn_params(params_, rng, p + ".ffn", enc.embed_dim);
  }
  add_norm_params(params_, "enc.ln_f", enc.embed_dim);

  params_.add("latent.w_mu", init_normal(rng, enc.latent_dim, enc.embed_dim, 0.02));
  params_.add("latent.w_sigma", init_normal(rng, enc.latent_dim, enc.embed_dim, 0.02));

  params_.add("dec.tok", init_normal(rng, vocab_.size(), dec.embed_dim, 0.02));
  params_.add("dec.pos", init_normal(rng, dec.max_sequence_length, dec.embed_dim, 0.02));
  params_.add("dec.mem.w", init_normal(rng, enc.latent_dim, dec.memory_slots * dec.embed_dim, 0.02));
  params_.add("dec.mem.b", zeros(1, dec.memory_slots * dec.embed_dim));
  for (std::size_t l = 0; l < dec.layers; ++l) {
    const std::string p = "dec.l" + std::to_string(l);
    add_norm_params(params_, p + ".ln1", dec.embed_dim);
    add_attention_params(params_, rng, p + ".self", dec.embed_dim);
    add_norm_params(params_, p + ".ln2", dec.embed_dim);
    add_attention_params(params_, rng, p + ".cross", dec.embed_dim);
    add_norm_params(params_, p + ".ln3", dec.embed_dim);
    add_ffn_params(params_, rng, p + ".ffn", dec.embed_dim);
  }
  add_norm_params(params_, "dec.ln_f", dec.embed_dim);
  params_.add("dec.out.w", init_normal(rng, dec.embed_dim, vocab_.size(), 0.02));
  params_.add("dec.out.b", zeros(1, vocab_.size()));
}

namespace {

// One forward pass over a fresh graph. In training mode parameters enter as
// differentiable leaves; otherwise as constants.
struct Forward {
  Graph g;
  nn::ParameterSet* trainable = nullptr;
  const nn::ParameterSet* frozen = nullptr;
  std::map<std::string, Var> cache;

  Var p(const std::string& name) {
    if (auto it = cache.find(name); it != cache.end()) return it->second;
    const Var v = trainable != nullptr ? g.param(trainable->at(name)) : g.constant(frozen->at(name).value);
    cache.emplace(name, v);
    return v;
  }

  Var linear(Var x, const std::string& prefix, const char* w, const char* b) {
    return g.add_row(g.matmul(x, p(prefix + "." + w)), p(prefix + "." + b));
  }

  Var norm(Var x, const std::string& prefix) { return g.layer_norm(x, p(prefix + ".g"), p(prefix + ".b")); }

  Var attention(Var queries, Var memory, const std::string& prefix, std::size_t heads, bool causal) {
    const Var q = linear(queries, prefix, "wq", "bq");
    const Var k = linear(memory, prefix, "wk", "bk");
    const Var v = linear(memory, prefix, "wv", "bv");
    const auto dim = static_cast<std::size_t>(g.value(q).cols());
    const std::size_t head_dim = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<Var> outputs;
    outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const Var qh = g.slice_cols(q, h * head_dim, head_dim);
      const Var kh = g.slice_cols(k, h * head_dim, head_dim);
      const Var vh = g.slice_cols(v, h * head_dim, head_dim);
      const Var weights = g.softmax_rows(g.scale(g.matmul_bt(qh, kh), scale), causal);
      outputs.push_back(g.matmul(weights, vh));
    }
    const Var joined = heads == 1 ? outputs[0] : g.concat_cols(outputs);
    return linear(joined, prefix, "wo", "bo");
  }

  Var ffn(Var x, const std::string& prefix) {
    return linear(g.gelu(linear(x, prefix, "w1", "b1")), prefix, "w2", "b2");
  }
};

Matrix extract_patches(const audio::MelSpectrogram& mel, const MusicEncoderConfig& enc) {
  if (mel.n_mels != enc.input_mels) {
    throw ShapeError("spectrogram has " + std::to_string(mel.n_mels) + " mel bands; the encoder expects " +
                     std::to_string(enc.input_mels));
  }
  if (mel.frames < enc.patch_width) {
    throw ShapeError("spectrogram has " + std::to_string(mel.frames) + " frames; the encoder needs at least " +
                     std::to_string(enc.patch_width) + " (one " + std::to_string(enc.patch_height) + "x" +
                     std::to_string(enc.patch_width) + " patch)");
  }
  const std::size_t rows = enc.grid_rows();
  const std::size_t cols = enc.grid_cols();
  Matrix patches(static_cast<Eigen::Index>(rows * cols), static_cast<Eigen::Index>(enc.patch_height * enc.patch_width));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const auto row = static_cast<Eigen::Index>(r * cols + c);
      for (std::size_t i = 0; i < enc.patch_height; ++i) {
        for (std::size_t j = 0; j < enc.patch_width; ++j) {
          const std::size_t band = r * enc.patch_stride + i;
          const std::size_t frame = c * enc.patch_stride + j;
          // Frames beyond the spectrogram are zero padding.
          const double v = frame < mel.frames ? mel.at(band, frame) * enc.input_scale : 0.0;
          patches(row, static_cast<Eigen::Index>(i * enc.patch_width + j)) = v;
        }
      }
    }
  }
  return patches;
}

Var encoder_forward(Forward& f, const audio::MelSpectrogram& mel, const MusicEncoderConfig& enc) {
  auto& g = f.g;
  const Var patches = g.constant(extract_patches(mel, enc));
  const Var embedded = f.linear(patches, "enc.patch", "w", "b");
  Var x = g.add(g.concat_rows({f.p("enc.cls"), embedded}), f.p("enc.pos"));
  for (std::size_t l = 0; l < enc.layers; ++l) {
    const std::string prefix = "enc.l" + std::to_string(l);
    const Var h = f.norm(x, prefix + ".ln1");
    // Only the [CLS] row of the last layer reaches the output.
    const bool last = l + 1 == enc.layers;
    const Var queries = last ? g.slice_rows(h, 0, 1) : h;
    if (last) x = g.slice_rows(x, 0, 1);
    x = g.add(x, f.attention(queries, h, prefix + ".attn", enc.heads, false));
    x = g.add(x, f.ffn(f.norm(x, prefix + ".ln2"), prefix + ".ffn"));
  }
  return f.norm(x, "enc.ln_f");
}

Var decoder_forward(Forward& f, std::span<const int> tokens, Var z, const DecoderConfig& dec) {
  auto& g = f.g;
  if (tokens.size() > dec.max_sequence_length) throw ShapeError("token sequence exceeds max_sequence_length");
  const Var mem_flat = f.linear(z, "dec.mem", "w", "b");
  Var memory = mem_flat;
  if (dec.memory_slots > 1) {
    std::vector<Var> slots;
    for (std::size_t s = 0; s < dec.memory_slots; ++s) slots.push_back(g.slice_cols(mem_flat, s * dec.embed_dim, dec.embed_dim));
    memory = g.concat_rows(slots);
  }
  const std::vector<int> ids(tokens.begin(), tokens.end());
  const Var pos = g.slice_rows(f.p("dec.pos"), 0, ids.size());
  Var x = g.add(g.embedding(f.p("dec.tok"), ids), pos);
  for (std::size_t l = 0; l < dec.layers; ++l) {
    const std::string prefix = "dec.l" + std::to_string(l);
    const Var h = f.norm(x, prefix + ".ln1");
    x = g.add(x, f.attention(h, h, prefix + ".self", dec.heads, true));
    x = g.add(x, f.attention(f.norm(x, prefix + ".ln2"), memory, prefix + ".cross", dec.heads, false));
    x = g.add(x, f.ffn(f.norm(x, prefix + ".ln3"), prefix + ".ffn"));
  }
  x = f.norm(x, "dec.ln_f");
  return f.linear(x, "dec.out", "w", "b");
}

Matrix row_matrix(const Eigen::VectorXd& v) {
  Matrix m(1, v.size());
  m.row(0) = v.transpose();
  return m;
}

}  // namespace

audio::MelSpectrogram LyricModel::music_features(const audio::AudioBuffer& clip) const {
  return audio::mel_spectrogram(clip, config_.mel);
}

Eigen::VectorXd LyricModel::encode_music(const audio::MelSpectrogram& mel) const {
  Forward f;
  f.frozen = &params_;
  const Var h = encoder_forward(f, mel, config_.encoder);
  return f.g.value(h).row(0).transpose();
}

LatentHead LyricModel::latent_head() const {
  return LatentHead{params_.at("latent.w_mu").value, params_.at("latent.w_sigma").value};
}

LatentState LyricModel::infer_latent(const audio::MelSpectrogram& mel, std::uint64_t seed) const {
  LatentState s;
  std::tie(s.mu, s.sigma) = latent_params(encode_music(mel), latent_head());
  s.z = sample_latent(s.mu, s.sigma, std::nullopt, seed);
  return s;
}

Eigen::VectorXd LyricModel::next_token_logits(const Eigen::VectorXd& z, std::span<const int> tokens) const {
  if (static_cast<std::size_t>(z.size()) != config_.encoder.latent_dim) {
    throw ShapeError("latent has dimension " + std::to_string(z.size()) + ", model expects " +
                     std::to_string(config_.encoder.latent_dim));
  }
  if (tokens.empty()) throw ValidationError("decoder needs at least one context token");
  Forward f;
  f.frozen = &params_;
  const Var logits = decoder_forward(f, tokens, f.g.constant(row_matrix(z)), config_.decoder);
  return f.g.value(logits).row(f.g.value(logits).rows() - 1).transpose();
}

LyricLine LyricModel::decode_line(const Eigen::VectorXd& z, std::span<const int> previous_line,
                                  const SamplingConfig& sampling) const {
  sampling.validate();
  if (vocab_.size() <= 4) throw ValidationError("empty vocabulary");
  if (previous_line.empty()) throw ValidationError("previous line is empty; pass <START> for the first line");

  const std::size_t max_len = config_.decoder.max_sequence_length;
  std::vector<int> context(previous_line.begin(), previous_line.end());
  // Keep room for <START> and at least one generated token.
  if (context.size() + 2 > max_len) context.erase(context.begin(), context.end() - static_cast<std::ptrdiff_t>(max_len - 2));
  context.push_back(TokenVocab::kStart);

  Rng rng(sampling.seed);
  LyricLine line;
  while (line.ids.size() < sampling.max_tokens && context.size() < max_len) {
    Eigen::VectorXd logits = next_token_logits(z, context);
    // Structural tokens are never emitted mid-line.
    for (int banned : {TokenVocab::kPad, TokenVocab::kUnk, TokenVocab::kStart}) {
      logits(banned) = -std::numeric_limits<double>::infinity();
    }
    if (line.ids.size() < sampling.min_tokens) logits(TokenVocab::kEnd) = -std::numeric_limits<double>::infinity();
    const std::vector<double> raw(logits.data(), logits.data() + logits.size());
    const auto probs = filter_logits(raw, sampling);
    const double u = rng.uniform();
    double acc = 0.0;
    int next = -1;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] <= 0.0) continue;
      acc += probs[i];
      next = static_cast<int>(i);
      if (u < acc) break;
    }
    if (next < 0 || next == TokenVocab::kEnd) break;
    line.ids.push_back(next);
    context.push_back(next);
  }
  line.text = vocab_.decode(line.ids);
  return line;
}

LyricLine LyricModel::generate(const audio::MelSpectrogram& mel, std::string_view previous_line,
                               const SamplingConfig& sampling) const {
  const LatentState latent = infer_latent(mel, derive_seed(sampling.seed, 0x6C6174656E74ULL));
  auto previous = vocab_.encode(previous_line);
  if (previous.empty()) previous.push_back(TokenVocab::kStart);
  return decode_line(latent.z, previous, sampling);
}

LyricModel::Sequence LyricModel::make_sequence(std::string_view previous_line, std::string_view target_line) const {
  std::vector<int> prev = vocab_.encode(previous_line);
  if (prev.empty()) prev.push_back(TokenVocab::kStart);
  std::vector<int> target = vocab_.encode(target_line);

  const std::size_t max_len = config_.decoder.max_sequence_length;
  // Inputs hold prev + <START> + target; the final <END> appears only as a target.
  if (target.size() + 1 > max_len - 1) target.resize(max_len - 2);
  const std::size_t room_for_prev = max_len - 1 - target.size();
  if (prev.size() > room_for_prev) prev.erase(prev.begin(), prev.end() - static_cast<std::ptrdiff_t>(room_for_prev));

  std::vector<int> full = prev;
  full.push_back(TokenVocab::kStart);
  full.insert(full.end(), target.begin(), target.end());
  full.push_back(TokenVocab::kEnd);

  Sequence s;
  s.inputs.assign(full.begin(), full.end() - 1);
  s.targets.assign(full.begin() + 1, full.end());
  s.mask.assign(s.inputs.size(), 0);
  for (std::size_t i = prev.size(); i < s.inputs.size(); ++i) s.mask[i] = 1;
  return s;
}

LossParts LyricModel::run(const TrainingExample& example, double beta, const Eigen::VectorXd& epsilon,
                          bool decoder_only, bool backprop, double weight) {
  const auto& enc = config_.encoder;
  if (static_cast<std::size_t>(epsilon.size()) != enc.latent_dim) throw ShapeError("epsilon has the wrong dimension");
  Forward f;
  if (backprop) {
    f.trainable = &params_;
  } else {
    f.frozen = &params_;
  }
  auto& g = f.g;
  const Sequence seq = make_sequence(example.previous_line, example.target_line);

  Var z;
  Var kl;
  if (decoder_only) {
    z = g.constant(Matrix::Zero(1, static_cast<Eigen::Index>(enc.latent_dim)));
    kl = g.constant(Matrix::Zero(1, 1));
  } else {
    const Var h = encoder_forward(f, example.mel, enc);
    const Var mu = g.matmul_bt(h, f.p("latent.w_mu"));
    const Var logvar = g.matmul_bt(h, f.p("latent.w_sigma"));
    z = g.reparameterize(mu, logvar, row_matrix(epsilon));
    kl = g.kl_standard_normal(mu, logvar);
  }
  const Var logits = decoder_forward(f, seq.inputs, z, config_.decoder);
  const Var recon = g.cross_entropy(logits, seq.targets, seq.mask);
  const Var total = g.add_scaled(recon, kl, beta);

  LossParts parts{g.scalar(recon), g.scalar(kl), g.scalar(total)};
  if (backprop) g.backward(weight == 1.0 ? total : g.scale(total, weight));
  return parts;
}

LossParts LyricModel::accumulate_gradients(const TrainingExample& example, double beta, const Eigen::VectorXd& epsilon,
                                           double weight, bool decoder_only) {
  return run(example, beta, epsilon, decoder_only, true, weight);
}

LossParts LyricModel::evaluate_loss(const TrainingExample& example, double beta, const Eigen::VectorXd& epsilon,
                                    bool decoder_only) const {
  return const_cast<LyricModel*>(this)->run(example, beta, epsilon, decoder_only, false, 1.0);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kCheckpointFormat = "beatframe-lyric-model";
constexpr int kCheckpointVersion = 1;

json config_to_json(const ModelConfig& c) {
  const auto& e = c.encoder;
  const auto& d = c.decoder;
  return json{
      {"encoder",
       {{"layers", e.layers},
        {"heads", e.heads},
        {"embed_dim", e.embed_dim},
        {"patch_height", e.patch_height},
        {"patch_width", e.patch_width},
        {"patch_stride", e.patch_stride},
        {"latent_dim", e.latent_dim},
        {"input_mels", e.input_mels},
        {"input_frames", e.input_frames},
        {"input_scale", e.input_scale}}},
      {"decoder",
       {{"layers", d.layers},
        {"heads", d.heads},
        {"embed_dim", d.embed_dim},
        {"max_sequence_length", d.max_sequence_length},
        {"memory_slots", d.memory_slots}}},
      {"mel",
       {{"n_mels", c.mel.n_mels},
        {"window_size", c.mel.window_size},
        {"hop_size", c.mel.hop_size},
        {"n_fft", c.mel.n_fft},
        {"f_min", c.mel.f_min},
        {"f_max", c.mel.f_max},
        {"scale", c.mel.scale == audio::MelScale::kDecibel ? "db" : "power"}}},
      {"init_seed", c.init_seed},
  };
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  const auto& e = j.at("encoder");
  c.encoder.layers = e.at("layers");
  c.encoder.heads = e.at("heads");
  c.encoder.embed_dim = e.at("embed_dim");
  c.encoder.patch_height = e.at("patch_height");
  c.encoder.patch_width = e.at("patch_width");
  c.encoder.patch_stride = e.at("patch_stride");
  c.encoder.latent_dim = e.at("latent_dim");
  c.encoder.input_mels = e.at("input_mels");
  c.encoder.input_frames = e.at("input_frames");
  c.encoder.input_scale = e.at("input_scale");
  const auto& d = j.at("decoder");
  c.decoder.layers = d.at("layers");
  c.decoder.heads = d.at("heads");
  c.decoder.embed_dim = d.at("embed_dim");
  c.decoder.max_sequence_length = d.at("max_sequence_length");
  c.decoder.memory_slots = d.at("memory_slots");
  const auto& m = j.at("mel");
  c.mel.n_mels = m.at("n_mels");
  c.mel.window_size = m.at("window_size");
  c.mel.hop_size = m.at("hop_size");
  c.mel.n_fft = m.at("n_fft");
  c.mel.f_min = m.at("f_min");
  c.mel.f_max = m.at("f_max");
  c.mel.scale = m.at("scale").get<std::string>() == "db" ? audio::MelScale::kDecibel : audio::MelScale::kPower;
  c.init_seed = j.at("init_seed");
  return c;
}

}  // namespace

std::string ModelConfig::to_json() const { return config_to_json(*this).dump(2) + "\n"; }

ModelConfig ModelConfig::from_json(std::string_view text) {
  try {
    return config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed model config: ") + e.what());
  }
}

void LyricModel::save(const std::filesystem::path& path) const {
  json params = json::object();
  for (const auto& [name, p] : params_) {
    params[name] = {{"rows", p.value.rows()},
                    {"cols", p.value.cols()},
                    {"data", std::vector<double>(p.value.data(), p.value.data() + p.value.size())}};
  }
  const json doc{{"format", kCheckpointFormat},
                 {"version", kCheckpointVersion},
                 {"config", config_to_json(config_)},
                 {"vocab", vocab_.tokens()},
                 {"parameters", std::move(params)}};
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
    out << doc.dump();
  }
  std::filesystem::rename(tmp, path);
}

LyricModel LyricModel::load(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read checkpoint '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("checkpoint '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (doc.value("format", "") != kCheckpointFormat || doc.value("version", 0) != kCheckpointVersion) {
    throw Error("'" + path.string() + "' is not a version " + std::to_string(kCheckpointVersion) + " lyric model checkpoint");
  }
  const ModelConfig stored = config_from_json(doc.at("config"));
  if (expected != nullptr && !(stored == *expected)) {
    throw ValidationError("checkpoint '" + path.string() + "' was saved with a different model configuration");
  }
  LyricModel model(stored, TokenVocab::from_tokens(doc.at("vocab").get<std::vector<std::string>>()));
  const auto& params = doc.at("parameters");
  if (params.size() != model.params_.size()) throw ValidationError("checkpoint parameter set does not match its config");
  for (auto& [name, p] : model.params_) {
    if (!params.contains(name)) throw ValidationError("checkpoint is missing parameter '" + name + "'");
    const auto& t = params.at(name);
    if (t.at("rows").get<Eigen::Index>() != p.value.rows() || t.at("cols").get<Eigen::Index>() != p.value.cols()) {
      throw ValidationError("checkpoint parameter '" + name + "' has the wrong shape for its config");
    }
    const auto data = t.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != p.value.size()) throw ValidationError("checkpoint parameter '" + name + "' is truncated");
    std::copy(data.begin(), data.end(), p.value.data());
  }
  return model;
}

std::string LyricModel::digest() const {
  Sha256 h;
  h.update(config_to_json(config_).dump());
  for (const auto& t : vocab_.tokens()) h.update(t).update(std::string_view("\n"));
  for (const auto& [name, p] : params_) {
    h.update(name);
    h.update(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(p.value.data()),
                                           static_cast<std::size_t>(p.value.size()) * sizeof(double)));
  }
  return h.hex();
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(LyricModel& model, std::span<const TrainingExample> dataset, const TrainConfig& config,
                  const std::function<void(const EpochLoss&)>& on_epoch) {
  config.validate();
  if (dataset.empty()) throw ValidationError("training dataset is empty");

  nn::AdamConfig adam_config;
  adam_config.learning_rate = config.learning_rate;
  adam_config.grad_clip = config.grad_clip;
  nn::Adam adam(adam_config);
  Rng rng(config.seed);
  const std::size_t latent_dim = model.config().encoder.latent_dim;

  TrainResult result;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    // Per-epoch annealing: progress reaches 1 on the final epoch.
    const double progress =
        config.epochs > 1 ? static_cast<double>(epoch) / static_cast<double>(config.epochs - 1) : 1.0;
    const double beta = config.use_kl && !config.decoder_only ? beta_schedule(progress, config) : 0.0;

    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    EpochLoss record;
    record.epoch = epoch + 1;
    record.beta = beta;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const double weight = 1.0 / static_cast<double>(end - start);
      model.parameters().zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        Eigen::VectorXd eps(static_cast<Eigen::Index>(latent_dim));
        for (Eigen::Index d = 0; d < eps.size(); ++d) eps(d) = rng.normal();
        const LossParts parts =
            model.accumulate_gradients(dataset[order[i]], beta, eps, weight, config.decoder_only);
        if (!std::isfinite(parts.total)) {
          throw NumericError("non-finite loss in epoch " + std::to_string(epoch + 1) + ", batch " +
                             std::to_string(batch_index + 1));
        }
        record.reconstruction += parts.reconstruction;
        record.kl += parts.kl;
        record.total += parts.total;
      }
      adam.step(model.parameters());
    }
    const auto n = static_cast<double>(dataset.size());
    record.reconstruction /= n;
    record.kl /= n;
    record.total /= n;
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);
    if (config.target_reduction > 0.0 &&
        record.reconstruction <= (1.0 - config.target_reduction) * result.history.front().reconstruction) {
      break;
    }
  }
  model.parameters().zero_grad();
  return result;
}

}  // namespace beatframe::lyrics
