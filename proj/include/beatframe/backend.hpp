#pragma once

#include <Eigen/Dense>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "beatframe/image.hpp"

namespace beatframe::backend {

using EmbeddingVector = Eigen::VectorXd;

struct LatentNoise {
  Eigen::VectorXd values;  // flattened
  std::vector<std::size_t> shape;
  std::uint64_t seed = 0;
};

enum class BackendKind { kStub, kRemote };

struct BackendDescriptor {
  BackendKind kind = BackendKind::kStub;
  std::size_t embedding_dim = 64;
  std::vector<std::size_t> latent_shape{4, 8, 8};
  int image_width = 128;
  int image_height = 128;
  // Remote only.
  std::string endpoint;
  std::string api_key;
  double timeout_seconds = 30.0;
  std::size_t max_in_flight = 2;
  std::size_t max_attempts = 3;
  double backoff_seconds = 0.5;  // doubled after every failed attempt
  // Expected seconds per illustration; the planner uses it to budget frames.
  double seconds_per_image = 8.0;

  std::size_t latent_size() const;
  void validate() const;
};

struct Provenance {
  std::string prompt_digest;
  std::uint64_t seed = 0;
  double weight = 0.0;
};

struct GenerationRequest {
  EmbeddingVector embedding;
  LatentNoise noise;
  // Sent alongside the embedding so a remote service may re-embed server-side.
  std::string prompt;
  Provenance provenance;
  std::map<std::string, std::string> guidance;
};

struct IllustrationFrame {
  Image pixels;
  Provenance provenance;
  bool nsfw = false;
};

/// Common contract for the procedural stub and the HTTP client. Public calls
/// validate shapes and record latency; subclasses implement the do_* hooks.
class IllustrationBackend {
 public:
  explicit IllustrationBackend(BackendDescriptor descriptor);
  virtual ~IllustrationBackend() = default;

  const BackendDescriptor& descriptor() const { return descriptor_; }

  EmbeddingVector text_embed(const std::string& prompt);
  IllustrationFrame generate(const GenerationRequest& request);
  EmbeddingVector image_embed(const IllustrationFrame& frame);

  /// Standard-normal latent of the declared shape, drawn from `seed`.
  LatentNoise make_noise(std::uint64_t seed) const;

  /// Wall-clock seconds of every generate() call so far.
  std::vector<double> generate_latencies() const;

  /// Black raster of the declared size, used in place of rejected images.
  Image placeholder_image() const;
  /// Fixed embedding assigned to the placeholder raster.
  EmbeddingVector placeholder_embedding() const;

 protected:
  virtual EmbeddingVector do_text_embed(const std::string& prompt) = 0;
  virtual IllustrationFrame do_generate(const GenerationRequest& request) = 0;
  virtual EmbeddingVector do_image_embed(const Image& image) = 0;

 private:
  BackendDescriptor descriptor_;
  mutable std::mutex stats_mutex_;
  std::vector<double> latencies_;
};

struct StubOptions {
  // Prompts containing any of these words come back flagged, with the placeholder raster.
  std::vector<std::string> flagged_words;
};

/// Deterministic procedural backend. The embedding is painted as low-frequency
/// cosine patterns per color channel, the noise as separate higher-frequency
/// patterns; image_embed projects back onto the embedding patterns.
class StubBackend : public IllustrationBackend {
 public:
  explicit StubBackend(BackendDescriptor descriptor = {}, StubOptions options = {});

 protected:
  EmbeddingVector do_text_embed(const std::string& prompt) override;
  IllustrationFrame do_generate(const GenerationRequest& request) override;
  EmbeddingVector do_image_embed(const Image& image) override;

 private:
  struct Basis {
    int channel;
    int u;
    int v;
  };
  double basis_value(const Basis& b, int x, int y) const;

  StubOptions options_;
  std::vector<Basis> embed_basis_;
  std::vector<Basis> noise_basis_;
  Eigen::MatrixXd noise_projection_;
  std::vector<double> cos_x_;  // [u * width + x]
  std::vector<double> cos_y_;  // [v * height + y]
};

/// JSON-over-HTTP client:
///   POST /embed        {"prompt"}                     -> {"embedding": [..]}
///   POST /generate     {"embedding", "prompt", "noise", "noise_seed",
///                       "width", "height", "guidance"} -> {"image": base64 PNG, "nsfw": bool}
///   POST /image_embed  {"image": base64 PNG}          -> {"embedding": [..]}
/// Timeouts, connection failures and 5xx are retried with exponential backoff;
/// other failures are not.
class RemoteBackend : public IllustrationBackend {
 public:
  explicit RemoteBackend(BackendDescriptor descriptor);

 protected:
  EmbeddingVector do_text_embed(const std::string& prompt) override;
  IllustrationFrame do_generate(const GenerationRequest& request) override;
  EmbeddingVector do_image_embed(const Image& image) override;

 private:
  std::string post(const std::string& path, const std::string& body);

  std::mutex slots_mutex_;
  std::condition_variable slots_cv_;
  std::size_t in_flight_ = 0;
};

/// Remote descriptor from BEATFRAME_BACKEND_URL / BEATFRAME_BACKEND_KEY.
BackendDescriptor remote_descriptor_from_env();

std::unique_ptr<IllustrationBackend> make_backend(const BackendDescriptor& descriptor);

}  // namespace beatframe::backend
