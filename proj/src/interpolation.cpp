#include "beatframe/interpolation.hpp"

#include <algorithm>
#include <cmath>

#include "beatframe/audio.hpp"
#include "beatframe/digest.hpp"
#include "beatframe/error.hpp"
#include "beatframe/random.hpp"
#include "json.hpp"

namespace beatframe::interp {

namespace {

void check_weight(double w) {
  if (!(w >= 0.0 && w <= 1.0)) throw ValidationError("interpolation weight must lie in [0, 1]");
}

}  // namespace

EmbeddingVector lerp_embeddings(const EmbeddingVector& e_i, const EmbeddingVector& e_j, double w) {
  if (e_i.size() != e_j.size()) throw ShapeError("embeddings differ in dimension");
  check_weight(w);
  if (w == 1.0) return e_j;
  return e_i + w * (e_j - e_i);
}

Eigen::VectorXd slerp(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double w) {
  if (a.size() != b.size()) throw ShapeError("slerp operands differ in size");
  check_weight(w);
  if (w == 0.0) return a;
  if (w == 1.0) return b;
  const double na = a.norm();
  const double nb = b.norm();
  Eigen::VectorXd lerp = a + w * (b - a);
  if (na == 0.0 || nb == 0.0) return lerp;
  const double cos_omega = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  const double omega = std::acos(cos_omega);
  const double sin_omega = std::sin(omega);
  if (sin_omega < 1e-6) {
    const double n = lerp.norm();
    if (n == 0.0) return lerp;
    return lerp * (((1.0 - w) * na + w * nb) / n);
  }
  return (std::sin((1.0 - w) * omega) / sin_omega) * a + (std::sin(w * omega) / sin_omega) * b;
}

LatentNoise slerp_noise(const LatentNoise& n_i, const LatentNoise& n_j, double w) {
  if (n_i.shape != n_j.shape) throw ShapeError("latent noises differ in shape");
  LatentNoise out;
  out.shape = n_i.shape;
  out.seed = w < 0.5 ? n_i.seed : n_j.seed;
  out.values = slerp(n_i.values, n_j.values, w);
  return out;
}

std::uint64_t prompt_seed(std::uint64_t project_seed, std::size_t index) { return derive_seed(project_seed, index); }

std::string embedding_digest(const EmbeddingVector& e) {
  return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(e.data()),
                                                  static_cast<std::size_t>(e.size()) * sizeof(double)));
}

std::string InterpolationPlan::to_json() const {
  nlohmann::json steps_json = nlohmann::json::array();
  for (const auto& s : steps) steps_json.push_back({{"weight", s.weight}, {"embedding", embedding_digest(s.embedding)}});
  return nlohmann::json{{"segment", segment},
                        {"prompt_from", prompt_from},
                        {"prompt_to", prompt_to},
                        {"seed_from", seed_from},
                        {"seed_to", seed_to},
                        {"weights", weights},
                        {"steps", steps_json}}
      .dump();
}

InterpolationPlan build_plan(std::size_t segment, const std::string& prompt_from, const std::string& prompt_to,
                             const std::vector<double>& weights, backend::IllustrationBackend& backend,
                             std::uint64_t seed_from, std::uint64_t seed_to) {
  if (weights.empty()) throw ValidationError("interpolation needs at least one weight");
  for (std::size_t k = 0; k < weights.size(); ++k) {
    check_weight(weights[k]);
    if (k > 0 && weights[k] < weights[k - 1]) throw ValidationError("interpolation weights must be nondecreasing");
  }
  if (weights.back() != 1.0) throw ValidationError("the last interpolation weight must be 1");

  InterpolationPlan plan;
  plan.segment = segment;
  plan.prompt_from = prompt_from;
  plan.prompt_to = prompt_to;
  plan.seed_from = seed_from;
  plan.seed_to = seed_to;
  plan.weights = weights;

  EmbeddingVector e_i;
  EmbeddingVector e_j;
  try {
    e_i = backend.text_embed(prompt_from);
    e_j = prompt_to == prompt_from ? e_i : backend.text_embed(prompt_to);
  } catch (const BackendError& e) {
    throw PlanError("segment " + std::to_string(segment) + ": embedding failed: " + e.what(), e.retryable());
  }
  const auto n_i = backend.make_noise(seed_from);
  const auto n_j = backend.make_noise(seed_to);
  for (double w : weights) plan.steps.push_back({w, lerp_embeddings(e_i, e_j, w), slerp_noise(n_i, n_j, w)});
  return plan;
}

}  // namespace beatframe::interp
