#include "beatframe/backend.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <thread>

#include "beatframe/digest.hpp"
#include "beatframe/error.hpp"
#include "beatframe/random.hpp"
#include "httplib.h"
#include "json.hpp"

namespace beatframe::backend {

using json = nlohmann::json;

std::size_t BackendDescriptor::latent_size() const {
  return std::accumulate(latent_shape.begin(), latent_shape.end(), std::size_t{1}, std::multiplies<>());
}

void BackendDescriptor::validate() const {
  if (embedding_dim == 0) throw ValidationError("embedding_dim must be positive");
  if (latent_shape.empty() || latent_size() == 0) throw ValidationError("latent_shape must be non-empty and positive");
  if (image_width <= 0 || image_height <= 0) throw ValidationError("image size must be positive");
  if (kind == BackendKind::kRemote) {
    if (endpoint.empty()) throw ValidationError("remote backend needs an endpoint URL (BEATFRAME_BACKEND_URL)");
    if (endpoint.rfind("http://", 0) != 0) {
      throw ValidationError("remote backend endpoint must be an http:// URL, got '" + endpoint + "'");
    }
    if (!(timeout_seconds > 0.0)) throw ValidationError("timeout_seconds must be positive");
    if (max_in_flight == 0 || max_attempts == 0) throw ValidationError("max_in_flight and max_attempts must be positive");
  }
}

// ---------------------------------------------------------------------------

IllustrationBackend::IllustrationBackend(BackendDescriptor descriptor) : descriptor_(std::move(descriptor)) {
  descriptor_.validate();
}

EmbeddingVector IllustrationBackend::text_embed(const std::string& prompt) {
  if (prompt.empty()) throw ValidationError("cannot embed an empty prompt");
  auto e = do_text_embed(prompt);
  if (static_cast<std::size_t>(e.size()) != descriptor_.embedding_dim) {
    throw BackendError("backend returned a " + std::to_string(e.size()) + "-dim embedding, expected " +
                           std::to_string(descriptor_.embedding_dim),
                       false);
  }
  if (!e.allFinite()) throw BackendError("backend returned a non-finite embedding", false);
  return e;
}

IllustrationFrame IllustrationBackend::generate(const GenerationRequest& request) {
  if (static_cast<std::size_t>(request.embedding.size()) != descriptor_.embedding_dim) {
    throw ShapeError("embedding has dimension " + std::to_string(request.embedding.size()) + ", backend expects " +
                     std::to_string(descriptor_.embedding_dim));
  }
  if (static_cast<std::size_t>(request.noise.values.size()) != descriptor_.latent_size() ||
      (!request.noise.shape.empty() && request.noise.shape != descriptor_.latent_shape)) {
    throw ShapeError("latent noise has " + std::to_string(request.noise.values.size()) + " values, backend expects " +
                     std::to_string(descriptor_.latent_size()));
  }
  if (!request.embedding.allFinite() || !request.noise.values.allFinite()) {
    throw NumericError("generation request contains non-finite values");
  }
  const auto start = std::chrono::steady_clock::now();
  auto frame = do_generate(request);
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  {
    std::lock_guard lock(stats_mutex_);
    latencies_.push_back(elapsed);
  }
  if (frame.provenance.prompt_digest.empty()) {
    frame.provenance.prompt_digest =
        request.prompt.empty()
            ? sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(request.embedding.data()),
                                                       static_cast<std::size_t>(request.embedding.size()) * sizeof(double)))
            : sha256_hex(request.prompt);
  }
  return frame;
}

EmbeddingVector IllustrationBackend::image_embed(const IllustrationFrame& frame) {
  const auto& img = frame.pixels;
  if (img.empty() || img.rgb.size() != static_cast<std::size_t>(img.width) * img.height * 3) {
    throw ShapeError("frame raster is empty or inconsistent");
  }
  if (std::all_of(img.rgb.begin(), img.rgb.end(), [](std::uint8_t v) { return v == 0; })) {
    return placeholder_embedding();
  }
  return do_image_embed(img);
}

LatentNoise IllustrationBackend::make_noise(std::uint64_t seed) const {
  LatentNoise n;
  n.seed = seed;
  n.shape = descriptor_.latent_shape;
  n.values.resize(static_cast<Eigen::Index>(descriptor_.latent_size()));
  Rng rng(seed);
  for (Eigen::Index i = 0; i < n.values.size(); ++i) n.values(i) = rng.normal();
  return n;
}

std::vector<double> IllustrationBackend::generate_latencies() const {
  std::lock_guard lock(stats_mutex_);
  return latencies_;
}

Image IllustrationBackend::placeholder_image() const {
  return Image(descriptor_.image_width, descriptor_.image_height, 0);
}

EmbeddingVector IllustrationBackend::placeholder_embedding() const {
  const auto d = static_cast<Eigen::Index>(descriptor_.embedding_dim);
  return EmbeddingVector::Constant(d, 1.0 / std::sqrt(static_cast<double>(d)));
}

// ---------------------------------------------------------------------------
// Stub

namespace {

constexpr double kEmbedAmplitude = 120.0;
constexpr double kNoiseAmplitude = 8.0;
constexpr int kNoisePatternsPerChannel = 8;

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

StubBackend::StubBackend(BackendDescriptor descriptor, StubOptions options)
    : IllustrationBackend(std::move(descriptor)), options_(std::move(options)) {
  const auto& d = this->descriptor();
  const int w = d.image_width;
  const int h = d.image_height;
  const auto per_channel = static_cast<int>((d.embedding_dim + 2) / 3);

  // Cosine patterns ordered from low to high frequency, skipping the constant one.
  std::vector<std::pair<int, int>> freqs;
  for (int s = 1; static_cast<int>(freqs.size()) < per_channel + kNoisePatternsPerChannel; ++s) {
    if (s > (w - 1) + (h - 1)) throw ValidationError("stub image is too small for the embedding dimension");
    for (int u = 0; u <= s; ++u) {
      const int v = s - u;
      if (u < w && v < h) freqs.emplace_back(u, v);
    }
  }
  for (std::size_t j = 0; j < d.embedding_dim; ++j) {
    const auto& [u, v] = freqs[j / 3];
    embed_basis_.push_back({static_cast<int>(j % 3), u, v});
  }
  for (int c = 0; c < 3; ++c) {
    for (int k = 0; k < kNoisePatternsPerChannel; ++k) {
      const auto& [u, v] = freqs[static_cast<std::size_t>(per_channel + k)];
      noise_basis_.push_back({c, u, v});
    }
  }
  // Fixed projection of the full latent onto the noise patterns.
  Rng rng(0x5EED5EEDULL);
  const auto latent = static_cast<Eigen::Index>(d.latent_size());
  noise_projection_.resize(static_cast<Eigen::Index>(noise_basis_.size()), latent);
  for (Eigen::Index i = 0; i < noise_projection_.size(); ++i) {
    noise_projection_.data()[i] = rng.normal() / std::sqrt(static_cast<double>(latent));
  }

  int max_u = 0;
  int max_v = 0;
  for (const auto& b : embed_basis_) max_u = std::max(max_u, b.u), max_v = std::max(max_v, b.v);
  for (const auto& b : noise_basis_) max_u = std::max(max_u, b.u), max_v = std::max(max_v, b.v);
  cos_x_.resize(static_cast<std::size_t>((max_u + 1) * w));
  cos_y_.resize(static_cast<std::size_t>((max_v + 1) * h));
  for (int u = 0; u <= max_u; ++u) {
    for (int x = 0; x < w; ++x) cos_x_[static_cast<std::size_t>(u * w + x)] = std::cos(M_PI * u * (2 * x + 1) / (2.0 * w));
  }
  for (int v = 0; v <= max_v; ++v) {
    for (int y = 0; y < h; ++y) cos_y_[static_cast<std::size_t>(v * h + y)] = std::cos(M_PI * v * (2 * y + 1) / (2.0 * h));
  }
}

double StubBackend::basis_value(const Basis& b, int x, int y) const {
  const auto& d = descriptor();
  return cos_x_[static_cast<std::size_t>(b.u * d.image_width + x)] * cos_y_[static_cast<std::size_t>(b.v * d.image_height + y)];
}

EmbeddingVector StubBackend::do_text_embed(const std::string& prompt) {
  Rng rng(fnv1a64(prompt));
  EmbeddingVector e(static_cast<Eigen::Index>(descriptor().embedding_dim));
  for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = rng.normal();
  return e / e.norm();
}

IllustrationFrame StubBackend::do_generate(const GenerationRequest& request) {
  const auto& d = descriptor();
  IllustrationFrame frame;
  frame.provenance = request.provenance;
  const auto prompt = lower(request.prompt);
  for (const auto& word : options_.flagged_words) {
    if (!word.empty() && prompt.find(lower(word)) != std::string::npos) {
      frame.nsfw = true;
      frame.pixels = placeholder_image();
      return frame;
    }
  }

  const Eigen::VectorXd noise_coeffs = noise_projection_ * request.noise.values;
  std::vector<double> field(static_cast<std::size_t>(d.image_width) * d.image_height * 3, 128.0);
  auto paint = [&](const Basis& b, double amount) {
    if (amount == 0.0) return;
    for (int y = 0; y < d.image_height; ++y) {
      for (int x = 0; x < d.image_width; ++x) {
        field[(static_cast<std::size_t>(y) * d.image_width + x) * 3 + b.channel] += amount * basis_value(b, x, y);
      }
    }
  };
  for (std::size_t j = 0; j < embed_basis_.size(); ++j) {
    paint(embed_basis_[j], kEmbedAmplitude * request.embedding(static_cast<Eigen::Index>(j)));
  }
  for (std::size_t k = 0; k < noise_basis_.size(); ++k) {
    paint(noise_basis_[k], kNoiseAmplitude * noise_coeffs(static_cast<Eigen::Index>(k)));
  }
  frame.pixels = Image(d.image_width, d.image_height);
  for (std::size_t i = 0; i < field.size(); ++i) {
    frame.pixels.rgb[i] = static_cast<std::uint8_t>(std::clamp(std::lround(field[i]), 0L, 255L));
  }
  return frame;
}

EmbeddingVector StubBackend::do_image_embed(const Image& image) {
  const auto& d = descriptor();
  const Image img = (image.width == d.image_width && image.height == d.image_height)
                        ? image
                        : resize(image, d.image_width, d.image_height);
  EmbeddingVector e(static_cast<Eigen::Index>(embed_basis_.size()));
  for (std::size_t j = 0; j < embed_basis_.size(); ++j) {
    const auto& b = embed_basis_[j];
    double dot = 0.0;
    double norm = 0.0;
    for (int y = 0; y < d.image_height; ++y) {
      for (int x = 0; x < d.image_width; ++x) {
        const double phi = basis_value(b, x, y);
        dot += (img.at(x, y, b.channel) - 128.0) * phi;
        norm += phi * phi;
      }
    }
    e(static_cast<Eigen::Index>(j)) = dot / norm;
  }
  const double n = e.norm();
  if (n < 1e-9) return placeholder_embedding();
  return e / n;
}

// ---------------------------------------------------------------------------
// Remote

RemoteBackend::RemoteBackend(BackendDescriptor descriptor) : IllustrationBackend(std::move(descriptor)) {
  if (this->descriptor().kind != BackendKind::kRemote) throw ValidationError("RemoteBackend needs a remote descriptor");
}

std::string RemoteBackend::post(const std::string& path, const std::string& body) {
  const auto& d = descriptor();
  std::string last_error;
  for (std::size_t attempt = 1; attempt <= d.max_attempts; ++attempt) {
    {
      std::unique_lock lock(slots_mutex_);
      slots_cv_.wait(lock, [&] { return in_flight_ < d.max_in_flight; });
      ++in_flight_;
    }
    struct Release {
      RemoteBackend* self;
      ~Release() {
        {
          std::lock_guard lock(self->slots_mutex_);
          --self->in_flight_;
        }
        self->slots_cv_.notify_one();
      }
    };
    bool retryable = true;
    {
      Release release{this};
      httplib::Client client(d.endpoint);
      const auto secs = static_cast<time_t>(d.timeout_seconds);
      const auto usecs = static_cast<time_t>((d.timeout_seconds - static_cast<double>(secs)) * 1e6);
      client.set_connection_timeout(secs, usecs);
      client.set_read_timeout(secs, usecs);
      client.set_write_timeout(secs, usecs);
      httplib::Headers headers;
      if (!d.api_key.empty()) headers.emplace("Authorization", "Bearer " + d.api_key);
      const auto res = client.Post(path, headers, body, "application/json");
      if (!res) {
        last_error = "request to " + d.endpoint + path + " failed: " + httplib::to_string(res.error());
      } else if (res->status == 200) {
        return res->body;
      } else {
        last_error = d.endpoint + path + " returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200);
        retryable = res->status >= 500 || res->status == 429;
      }
    }
    if (!retryable) throw BackendError(last_error, false);
    if (attempt < d.max_attempts) {
      const double delay = d.backoff_seconds * std::pow(2.0, static_cast<double>(attempt - 1));
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
  }
  throw BackendError(last_error + " (gave up after " + std::to_string(d.max_attempts) + " attempts)", false);
}

namespace {

json parse_response(const std::string& body, const char* what) {
  try {
    return json::parse(body);
  } catch (const json::exception& e) {
    throw BackendError(std::string("malformed ") + what + " response: " + e.what(), false);
  }
}

EmbeddingVector embedding_from(const json& j) {
  try {
    const auto values = j.at("embedding").get<std::vector<double>>();
    return Eigen::Map<const EmbeddingVector>(values.data(), static_cast<Eigen::Index>(values.size()));
  } catch (const json::exception& e) {
    throw BackendError(std::string("response has no usable embedding: ") + e.what(), false);
  }
}

}  // namespace

EmbeddingVector RemoteBackend::do_text_embed(const std::string& prompt) {
  return embedding_from(parse_response(post("/embed", json{{"prompt", prompt}}.dump()), "embed"));
}

IllustrationFrame RemoteBackend::do_generate(const GenerationRequest& request) {
  const auto& d = descriptor();
  const json body{
      {"embedding", std::vector<double>(request.embedding.data(), request.embedding.data() + request.embedding.size())},
      {"prompt", request.prompt},
      {"noise", std::vector<double>(request.noise.values.data(), request.noise.values.data() + request.noise.values.size())},
      {"noise_seed", request.noise.seed},
      {"width", d.image_width},
      {"height", d.image_height},
      {"guidance", request.guidance},
  };
  const auto j = parse_response(post("/generate", body.dump()), "generate");
  IllustrationFrame frame;
  frame.provenance = request.provenance;
  frame.nsfw = j.value("nsfw", false);
  if (frame.nsfw) {
    frame.pixels = placeholder_image();
    return frame;
  }
  try {
    frame.pixels = decode_png(base64_decode(j.at("image").get<std::string>()));
  } catch (const json::exception& e) {
    throw BackendError(std::string("generate response has no image: ") + e.what(), false);
  } catch (const DecodeError& e) {
    throw BackendError(std::string("generate response image is unreadable: ") + e.what(), false);
  }
  if (frame.pixels.width != d.image_width || frame.pixels.height != d.image_height) {
    frame.pixels = resize(frame.pixels, d.image_width, d.image_height);
  }
  return frame;
}

EmbeddingVector RemoteBackend::do_image_embed(const Image& image) {
  const json body{{"image", base64_encode(encode_png(image))}};
  return embedding_from(parse_response(post("/image_embed", body.dump()), "image_embed"));
}

BackendDescriptor remote_descriptor_from_env() {
  BackendDescriptor d;
  d.kind = BackendKind::kRemote;
  if (const char* url = std::getenv("BEATFRAME_BACKEND_URL")) d.endpoint = url;
  if (const char* key = std::getenv("BEATFRAME_BACKEND_KEY")) d.api_key = key;
  return d;
}

std::unique_ptr<IllustrationBackend> make_backend(const BackendDescriptor& descriptor) {
  if (descriptor.kind == BackendKind::kRemote) return std::make_unique<RemoteBackend>(descriptor);
  return std::make_unique<StubBackend>(descriptor);
}

}  // namespace beatframe::backend
