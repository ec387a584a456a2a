#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "beatframe/backend.hpp"

namespace beatframe::interp {

using backend::EmbeddingVector;
using backend::LatentNoise;

/// e_i + w (e_j - e_i)
EmbeddingVector lerp_embeddings(const EmbeddingVector& e_i, const EmbeddingVector& e_j, double w);

/// Spherical interpolation; the angle comes from unit-normalized copies.
/// Parallel, antiparallel or zero inputs fall back to lerp, rescaled to the
/// interpolated magnitude.
Eigen::VectorXd slerp(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double w);
LatentNoise slerp_noise(const LatentNoise& n_i, const LatentNoise& n_j, double w);

/// Noise seed for prompt `index` of a project.
std::uint64_t prompt_seed(std::uint64_t project_seed, std::size_t index);

struct InterpolationStep {
  double weight = 0.0;
  EmbeddingVector embedding;
  LatentNoise noise;
};

struct InterpolationPlan {
  std::size_t segment = 0;
  std::string prompt_from;
  std::string prompt_to;
  std::uint64_t seed_from = 0;
  std::uint64_t seed_to = 0;
  std::vector<double> weights;
  std::vector<InterpolationStep> steps;

  /// {segment, prompts, seeds, weights, embedding digests}
  std::string to_json() const;
};

/// Embeds both prompts once, draws both endpoint noises, then one
/// (lerp, slerp) pair per weight. Backend failures surface as PlanError.
InterpolationPlan build_plan(std::size_t segment, const std::string& prompt_from, const std::string& prompt_to,
                             const std::vector<double>& weights, backend::IllustrationBackend& backend,
                             std::uint64_t seed_from, std::uint64_t seed_to);

std::string embedding_digest(const EmbeddingVector& e);

}  // namespace beatframe::interp
