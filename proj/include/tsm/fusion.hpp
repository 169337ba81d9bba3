#pragma once

// Optical/SAR feature rectification and cross-attention fusion, applied
// independently to each of the six feature layers.

#include <array>

#include "tsm/visual_encoder.hpp"

namespace tsm {

inline constexpr std::size_t kNumLayers = kNumStages + 2;  // stages, global, local

using FusedPyramid = VisualFeatures;

// Layer l of a feature set as a token map: 0..3 stages, 4 global, 5 local.
FeatureMap layer_of(const VisualFeatures& f, std::size_t l);
void set_layer(VisualFeatures& f, std::size_t l, FeatureMap m);

// Cross-modal rectification for one layer. The channel path pools the
// concatenated pair, runs a two-layer perceptron and emits sigmoid gates;
// the spatial path (stage maps only) projects each position of the pair to
// two sigmoid maps. Each modality is corrected by the other one:
//   x~ = x + a_cx * g_x * y + a_sx * m_x * y
//   y~ = y + a_cy * g_y * x + a_sy * m_y * x
// With every gate parameter (including the a_* scales) at zero this is the
// identity on both inputs.
struct Rectifier {
  Linear channel_fc1;  // 2C -> C
  Linear channel_fc2;  // C -> 2C, halves gate x~ and y~
  Linear spatial;      // 2C -> 2
  Tensor channel_scale_x, channel_scale_y;  // [C]
  Tensor spatial_scale_x, spatial_scale_y;  // [C]
  bool spatial_path = true;

  static Rectifier init(Rng& rng, std::size_t c, bool spatial_path);
  std::pair<FeatureMap, FeatureMap> operator()(const FeatureMap& x, const FeatureMap& y) const;
  void collect(ParamList& out, const std::string& prefix) const;
  void zero_gates();
};

// Bidirectional single-head cross attention; branch outputs are
// concatenated channel-wise and projected back to C.
struct CrossFuser {
  LayerNorm norm_x, norm_y;
  Attention x_from_y, y_from_x;
  Linear out;  // 2C -> C

  static CrossFuser init(Rng& rng, std::size_t c);
  FeatureMap operator()(const FeatureMap& x, const FeatureMap& y) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct FusionOptions {
  bool rectify = true;
};

// Per-layer rectifier + fuser parameters (six independent sets).
struct MultimodalFusion {
  std::array<Rectifier, kNumLayers> rectifiers;
  std::array<CrossFuser, kNumLayers> fusers;

  static MultimodalFusion init(Rng& rng, std::size_t c);

  // Rectification of every layer.
  std::pair<VisualFeatures, VisualFeatures> rectify(const VisualFeatures& x, const VisualFeatures& y) const;
  // Cross-attention fusion of every layer.
  FusedPyramid fuse(const VisualFeatures& x, const VisualFeatures& y) const;
  // rectify then fuse, layer by layer.
  FusedPyramid operator()(const VisualFeatures& optical, const VisualFeatures& sar,
                          const FusionOptions& opts = {}) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

}  // namespace tsm
