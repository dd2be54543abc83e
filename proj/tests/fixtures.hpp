#pragma once

#include <vector>

#include "otd/diffusion.hpp"
#include "otd/random.hpp"

namespace otd::fixture {

/// Narrow networks so unit tests train in well under a second.
inline ModelConfig small_model() {
  ModelConfig c;
  c.context_dim = 8;
  c.time_embedding_dim = 16;
  c.encoder_hidden = {16};
  c.denoiser_hidden = {32, 32};
  c.head_hidden = {16};
  return c;
}

/// Straight approaches to the target origin from random starts.
inline std::vector<CanonicalTrajectory> approaches(int count, std::uint64_t seed, const std::string& task = "toy") {
  Rng rng(seed);
  std::vector<CanonicalTrajectory> out;
  for (int i = 0; i < count; ++i) {
    const Eigen::Vector3d start(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.1, 0.3));
    std::vector<Pose> kp;
    for (int k = 0; k < 6; ++k) kp.push_back(Pose::FromTranslation(start * (1.0 - k / 5.0)));
    out.emplace_back(task, 0, std::move(kp));
  }
  return out;
}

}  // namespace otd::fixture
