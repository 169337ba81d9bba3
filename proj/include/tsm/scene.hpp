#pragma once

// Scene-level path: contrastive image/description alignment, then
// description-conditioned cross attention into the stage maps.

#include <vector>

#include "tsm/fusion.hpp"

namespace tsm {

// l2n(proj(z_global)): [1, C].
struct SceneHead {
  Linear proj;

  static SceneHead init(Rng& rng, std::size_t c);
  Tensor operator()(const FusedPyramid& z) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Symmetric in-batch InfoNCE over unit-norm rows. logits = img txt^T / tau;
// each direction is the mean of -log softmax at the matching pair, and the
// two directions are averaged. Rejects B < 2, tau <= 0 and rows whose norm
// is off by more than 1e-6.
Tensor info_nce(const Tensor& img, const Tensor& txt, double tau);

// One stage: the description is projected to the stage width and serves as
// the single key/value token for attention from every visual token:
//   z + o(v(proj(d)))   (softmax over one key is 1)
// The output projection starts at zero, so a fresh block is the identity.
struct SceneFusionStage {
  Linear text_proj;
  LayerNorm norm;
  Attention attn;

  static SceneFusionStage init(Rng& rng, std::size_t c);
  FeatureMap operator()(const FeatureMap& z, const Tensor& desc) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct SceneFusion {
  std::vector<SceneFusionStage> stages;

  static SceneFusion init(Rng& rng, std::size_t c, std::size_t num_stages = kNumStages);
  // Enriches the stage maps; global and local layers pass through.
  FusedPyramid operator()(const FusedPyramid& z, const Tensor& desc) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

}  // namespace tsm
