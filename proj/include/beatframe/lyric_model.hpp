#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "beatframe/audio.hpp"
#include "beatframe/nn.hpp"

namespace beatframe::lyrics {

/// Lowercased word-level tokens. Punctuation other than in-word apostrophes
/// and hyphens becomes its own token; the special tokens are kept verbatim.
std::vector<std::string> tokenize(std::string_view text);
std::string detokenize(std::span<const std::string> tokens);

class TokenVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kStart = 2;
  static constexpr int kEnd = 3;
  static constexpr std::string_view kPadToken = "<PAD>";
  static constexpr std::string_view kUnkToken = "<UNK>";
  static constexpr std::string_view kStartToken = "<START>";
  static constexpr std::string_view kEndToken = "<END>";

  /// Tokens seen at least `min_count` times, sorted, after the four specials.
  static TokenVocab build(std::span<const std::string> corpus, std::size_t min_count = 1);
  /// Rebuilds a vocabulary from its id-ordered token list (checkpoint loading).
  static TokenVocab from_tokens(std::vector<std::string> tokens);

  int id(std::string_view token) const;
  const std::string& token(int id) const;
  std::vector<int> encode(std::string_view text) const;
  /// Joins non-special tokens back into text.
  std::string decode(std::span<const int> ids) const;

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  static bool is_special(int id) { return id >= 0 && id <= kEnd; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct MusicEncoderConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t embed_dim = 64;
  std::size_t patch_height = 16;
  std::size_t patch_width = 16;
  std::size_t patch_stride = 10;
  std::size_t latent_dim = 32;
  // Spectrograms are zero-padded or cropped along time to input_frames;
  // the band count must match input_mels exactly.
  std::size_t input_mels = 128;
  std::size_t input_frames = 498;
  double input_scale = 0.01;

  void validate() const;
  std::size_t grid_rows() const { return (input_mels - patch_height) / patch_stride + 1; }
  std::size_t grid_cols() const { return (input_frames - patch_width) / patch_stride + 1; }
  std::size_t num_patches() const { return grid_rows() * grid_cols(); }
  /// Sequence length seen by the transformer: patches plus [CLS].
  std::size_t positions() const { return num_patches() + 1; }
  bool operator==(const MusicEncoderConfig&) const = default;
};

struct DecoderConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t embed_dim = 64;
  std::size_t max_sequence_length = 64;
  std::size_t memory_slots = 1;

  void validate() const;
  bool operator==(const DecoderConfig&) const = default;
};

struct SamplingConfig {
  std::size_t top_k = 100;
  double top_p = 0.95;
  double temperature = 0.95;
  std::size_t max_tokens = 20;
  // <END> is banned until this many tokens have been emitted.
  std::size_t min_tokens = 0;
  std::uint64_t seed = 0;

  void validate() const;
  static SamplingConfig greedy(std::size_t max_tokens = 20) {
    SamplingConfig s;
    s.top_k = 1;
    s.top_p = 1.0;
    s.temperature = 1.0;
    s.max_tokens = max_tokens;
    return s;
  }
};

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  double learning_rate = 5e-5;
  double beta_floor = 1e-5;
  double beta_warm_fraction = 0.5;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  // Ablations: drop the KL term (beta == 0) and/or feed the decoder a zero latent.
  bool use_kl = true;
  bool decoder_only = false;
  // When positive, stop after the first epoch whose mean reconstruction loss
  // is at most (1 - target_reduction) times the first epoch's.
  double target_reduction = 0.0;

  void validate() const;
};

/// Encoder, decoder and the mel front-end that feeds the encoder.
struct ModelConfig {
  MusicEncoderConfig encoder;
  DecoderConfig decoder;
  audio::MelSpectrogramParams mel = default_mel();
  std::uint64_t init_seed = 0;

  static audio::MelSpectrogramParams default_mel() {
    audio::MelSpectrogramParams p;
    p.scale = audio::MelScale::kDecibel;
    return p;
  }
  void validate() const;
  bool operator==(const ModelConfig& o) const;

  std::string to_json() const;
  /// Throws FormatError on missing or mistyped keys.
  static ModelConfig from_json(std::string_view text);
};

/// mu = W_mu h; sigma = exp(W_sigma h / 2). Both latent_dim x hidden.
struct LatentHead {
  Eigen::MatrixXd w_mu;
  Eigen::MatrixXd w_sigma;
};

struct LatentState {
  Eigen::VectorXd mu;
  Eigen::VectorXd sigma;
  Eigen::VectorXd z;
};

std::pair<Eigen::VectorXd, Eigen::VectorXd> latent_params(const Eigen::VectorXd& hidden, const LatentHead& head);

/// z = mu + sigma * epsilon. Without epsilon, draws it from N(0, I) seeded by `seed`.
Eigen::VectorXd sample_latent(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma,
                              const std::optional<Eigen::VectorXd>& epsilon = std::nullopt,
                              std::uint64_t seed = 0);

/// Closed-form KL(N(mu, diag sigma^2) || N(0, I)).
double kl_divergence(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma);

/// Temperature, then top-k, then top-p over the surviving mass. Tokens tied
/// with the last survivor at either cut are kept. Returns a distribution with
/// zeros outside the support.
std::vector<double> filter_logits(std::span<const double> logits, const SamplingConfig& sampling);

/// KL weight: beta_floor until beta_warm_fraction of training, then linear to 1.
double beta_schedule(double progress, const TrainConfig& config);

struct TrainingExample {
  audio::MelSpectrogram mel;
  std::string previous_line;
  std::string target_line;
};

struct LyricLine {
  std::vector<int> ids;
  std::string text;
};

struct LossParts {
  double reconstruction = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

struct EpochLoss {
  std::size_t epoch = 0;
  double reconstruction = 0.0;
  double kl = 0.0;
  double beta = 0.0;
  double total = 0.0;
};

class LyricModel {
 public:
  LyricModel(ModelConfig config, TokenVocab vocab);

  const ModelConfig& config() const { return config_; }
  const TokenVocab& vocab() const { return vocab_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }

  /// Encoder front-end: dB mel spectrogram with the model's parameters.
  audio::MelSpectrogram music_features(const audio::AudioBuffer& clip) const;

  /// Final-layer [CLS] state.
  Eigen::VectorXd encode_music(const audio::MelSpectrogram& mel) const;
  LatentHead latent_head() const;
  LatentState infer_latent(const audio::MelSpectrogram& mel, std::uint64_t seed) const;

  LyricLine decode_line(const Eigen::VectorXd& z, std::span<const int> previous_line,
                        const SamplingConfig& sampling) const;

  /// Encode, sample z, decode. The previous line is text ("<START>" for the first line).
  LyricLine generate(const audio::MelSpectrogram& mel, std::string_view previous_line,
                     const SamplingConfig& sampling) const;

  /// Next-token logits for the last position of `tokens` given latent z.
  Eigen::VectorXd next_token_logits(const Eigen::VectorXd& z, std::span<const int> tokens) const;

  /// Forward + backward for one example; gradients are added (scaled by
  /// `weight`) to the parameters. `epsilon` is the reparameterization noise.
  LossParts accumulate_gradients(const TrainingExample& example, double beta, const Eigen::VectorXd& epsilon,
                                 double weight = 1.0, bool decoder_only = false);
  /// Forward only, no gradient bookkeeping.
  LossParts evaluate_loss(const TrainingExample& example, double beta, const Eigen::VectorXd& epsilon,
                          bool decoder_only = false) const;

  /// Token sequence layout used for teacher forcing:
  /// previous-line tokens, <START>, target tokens, <END>.
  struct Sequence {
    std::vector<int> inputs;
    std::vector<int> targets;
    std::vector<char> mask;
  };
  Sequence make_sequence(std::string_view previous_line, std::string_view target_line) const;

  void save(const std::filesystem::path& path) const;
  /// Loads a checkpoint. With `expected`, a differing stored config is an error.
  static LyricModel load(const std::filesystem::path& path, const ModelConfig* expected = nullptr);
  /// SHA-256 over config, vocabulary and parameters.
  std::string digest() const;

 private:
  LossParts run(const TrainingExample& example, double beta, const Eigen::VectorXd& epsilon, bool decoder_only,
                bool backprop, double weight);

  ModelConfig config_;
  TokenVocab vocab_;
  nn::ParameterSet params_;
};

struct TrainResult {
  std::vector<EpochLoss> history;
};

/// Adam on reconstruction + beta * KL with per-epoch beta annealing.
/// Throws NumericError naming the epoch and batch on a non-finite loss.
TrainResult train(LyricModel& model, std::span<const TrainingExample> dataset, const TrainConfig& config,
                  const std::function<void(const EpochLoss&)>& on_epoch = {});

}  // namespace beatframe::lyrics
