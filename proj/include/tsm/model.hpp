#pragma once

// Full network: pseudo-Siamese encoders, optical/SAR fusion, class and
// description text paths, scene alignment and the FPN decoder. Also the
// tile-to-tensor conversion and the checkpoint format.

#include <string>
#include <vector>

#include "tsm/config.hpp"
#include "tsm/dataset.hpp"
#include "tsm/fusion.hpp"
#include "tsm/scene.hpp"
#include "tsm/text.hpp"

namespace tsm {

// Optical RGB plus SAR at every pixel.
inline constexpr std::size_t kPixelChannels = 4;

struct SampleInput {
  Tensor optical;  // [H, W, 3]
  Tensor sar;      // [H, W, 3], the SAR band replicated
  Tensor pixels;   // [H*W, 4]
  TokenIds description;
};

// Bytes are centred at 127.5 and divided by 64. The description is padded
// to max_len.
SampleInput prepare_sample(const TilePair& tile, const RunConfig& cfg, const Tokenizer& tok);

struct ForwardOutput {
  FusedPyramid fused;     // after optical/SAR fusion, before the scene path
  Tensor scene_image;     // [1, C] unit rows, computed before scene fusion;
  Tensor scene_text;      // [1, C]; both undefined without the scene path
  Tensor text;            // t' [K, C]
  Tensor score;           // [N4, K], over the final stage map
  NeckOutput neck;
  Tensor logits;          // [H*W, K]
};

struct Model {
  RunConfig config;
  Tokenizer tokenizer;
  VisualEncoder optical, sar;
  MultimodalFusion fusion;
  TextEncoder text;
  ContextPrompt prompt;
  SceneHead scene_head;
  SceneFusion scene_fusion;
  Neck neck;

  // Each component draws from its own named stream of config.seed.
  static Model init(const RunConfig& config, Tokenizer tokenizer);

  // t [K, C] for a class vocabulary under the configured template.
  Tensor encode_vocabulary(const Vocabulary& vocab) const;
  // Structure and fusion toggles are taken from `config`.
  ForwardOutput forward(const SampleInput& in, const Tensor& class_text) const;
  // Per-pixel class ids at full resolution.
  Labels predict(const SampleInput& in, const Tensor& class_text) const;

  ParamList parameters() const;
};

// `spec` is a vocabulary file path, or else an inline comma list; empty
// means `fallback`. Malformed input is ConfigError.
Vocabulary resolve_vocabulary(const std::string& spec, const std::vector<std::string>& fallback,
                              bool allow_duplicates = false);

// Text header (format line, config, tokenizer words, parameter names and
// shapes) followed by the values as little-endian doubles. Written to a
// temporary file and renamed into place.
void save_checkpoint(const Model& model, const std::string& path);
// Rebuilds the model from the stored configuration and tokenizer, then
// checks every parameter name and shape before reading values.
Model load_checkpoint(const std::string& path);

}  // namespace tsm
