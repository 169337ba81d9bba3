#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "tsm/nn.hpp"

namespace tsm {

inline constexpr std::size_t kNumStages = 4;

struct EncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 32;
  std::size_t num_stages = kNumStages;
  std::size_t blocks_per_stage = 1;
  std::size_t num_heads = 2;
  std::size_t in_channels = 3;
  std::size_t mlp_ratio = 4;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the violated constraint.
  void validate() const;
  // Side length of stage s (0-based); patch grid halved per stage, rounding up.
  std::size_t stage_side(std::size_t s) const;
};

// Four stage maps, the class-token global vector and the final local map:
// the six layers consumed by fusion.
struct VisualFeatures {
  std::array<FeatureMap, kNumStages> stages;
  Tensor global;  // [1, C]
  FeatureMap local;
};

struct PatchMerge {
  LayerNorm norm;  // over 4C
  Linear proj;     // 4C -> C
};

// Hierarchical ViT: patch embedding, then four stages of pre-norm blocks
// separated by 2x2 patch merging. A class token rides along through every
// stage; after the last stage a shared norm + projection head yields the
// global vector (from the class token) and the local map (from the tokens).
class VisualEncoder {
 public:
  // Truncated-normal (std 0.02) weights, zero biases, unit norm gains, all
  // drawn from `config.seed`.
  static VisualEncoder init(const EncoderConfig& config);

  // image: [H, W, ch] with H == W == image_size and ch == in_channels.
  VisualFeatures operator()(const Tensor& image) const;

  void collect(ParamList& out, const std::string& prefix) const;
  const EncoderConfig& config() const { return config_; }

  Linear patch_embed;
  Tensor pos_embed;  // [N1, C]
  Tensor cls_token;  // [1, C]
  std::array<std::vector<TransformerBlock>, kNumStages> blocks;
  std::array<PatchMerge, kNumStages - 1> merges;
  LayerNorm final_norm;
  Linear head;

 private:
  EncoderConfig config_;
};

// Closed-form parameter count of an encoder built from `config`.
std::size_t encoder_param_count(const EncoderConfig& config);

}  // namespace tsm
