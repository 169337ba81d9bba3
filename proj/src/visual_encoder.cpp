#include "tsm/visual_encoder.hpp"

#include <string>

#include "tsm/errors.hpp"

namespace tsm {

namespace {
constexpr double kInitStd = 0.02;
}

void EncoderConfig::validate() const {
  if (image_size == 0 || patch_size == 0 || embed_dim == 0 || num_heads == 0 || in_channels == 0) {
    throw ConfigError("encoder dimensions must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (num_stages != kNumStages) throw ConfigError("num_stages must be 4, got " + std::to_string(num_stages));
  if (blocks_per_stage == 0) throw ConfigError("blocks_per_stage must be positive");
}

std::size_t EncoderConfig::stage_side(std::size_t s) const {
  std::size_t side = image_size / patch_size;
  for (std::size_t i = 0; i < s; ++i) side = (side + 1) / 2;
  return side;
}

VisualEncoder VisualEncoder::init(const EncoderConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t c = config.embed_dim;
  const std::size_t p = config.patch_size;
  const std::size_t n1 = config.stage_side(0) * config.stage_side(0);

  VisualEncoder enc;
  enc.config_ = config;
  enc.patch_embed = Linear::init(rng, p * p * config.in_channels, c, kInitStd);
  enc.pos_embed = param_normal(rng, {n1, c}, kInitStd);
  enc.cls_token = param_normal(rng, {1, c}, kInitStd);
  for (std::size_t s = 0; s < kNumStages; ++s) {
    if (s > 0) {
      enc.merges[s - 1].norm = LayerNorm::init(4 * c);
      enc.merges[s - 1].proj = Linear::init(rng, 4 * c, c, kInitStd);
    }
    for (std::size_t b = 0; b < config.blocks_per_stage; ++b) {
      enc.blocks[s].push_back(TransformerBlock::init(rng, c, config.num_heads, config.mlp_ratio, kInitStd));
    }
  }
  enc.final_norm = LayerNorm::init(c);
  enc.head = Linear::init(rng, c, c, kInitStd);
  return enc;
}

VisualFeatures VisualEncoder::operator()(const Tensor& image) const {
  const std::size_t side = config_.image_size;
  const std::size_t ch = config_.in_channels;
  if (image.rank() != 3 || image.dim(0) != side || image.dim(1) != side || image.dim(2) != ch) {
    throw ShapeError("encode_visual: expected image " + shape_str({side, side, ch}) + ", got " +
                     shape_str(image.shape()));
  }
  const Tensor pixels = reshape(image, {side * side, ch});
  const Tensor patches = space_to_depth(pixels, side, side, config_.patch_size);

  Tensor x = add(patch_embed(patches), pos_embed);
  Tensor cls = cls_token;
  std::size_t h = config_.stage_side(0);
  std::size_t w = h;

  VisualFeatures out;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    if (s > 0) {
      const PatchMerge& m = merges[s - 1];
      x = m.proj(m.norm(space_to_depth(x, h, w, 2)));
      h = (h + 1) / 2;
      w = (w + 1) / 2;
    }
    Tensor seq = concat({cls, x}, 0);
    for (const TransformerBlock& blk : blocks[s]) seq = blk(seq);
    cls = slice(seq, 0, 0, 1);
    x = slice(seq, 0, 1, h * w);
    out.stages[s] = FeatureMap{x, h, w};
  }
  out.global = head(final_norm(cls));
  out.local = FeatureMap{head(final_norm(x)), h, w};
  return out;
}

void VisualEncoder::collect(ParamList& out, const std::string& prefix) const {
  patch_embed.collect(out, prefix + ".patch_embed");
  out.add(prefix + ".pos_embed", pos_embed);
  out.add(prefix + ".cls_token", cls_token);
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::string sp = prefix + ".stage" + std::to_string(s);
    if (s > 0) {
      merges[s - 1].norm.collect(out, sp + ".merge.norm");
      merges[s - 1].proj.collect(out, sp + ".merge.proj");
    }
    for (std::size_t b = 0; b < blocks[s].size(); ++b) blocks[s][b].collect(out, sp + ".block" + std::to_string(b));
  }
  final_norm.collect(out, prefix + ".final_norm");
  head.collect(out, prefix + ".head");
}

std::size_t encoder_param_count(const EncoderConfig& cfg) {
  const std::size_t c = cfg.embed_dim;
  const std::size_t p = cfg.patch_size;
  const std::size_t n1 = cfg.stage_side(0) * cfg.stage_side(0);
  const std::size_t hidden = c * cfg.mlp_ratio;
  const std::size_t linear_cc = c * c + c;
  const std::size_t block = 2 * c + 4 * linear_cc + 2 * c + (c * hidden + hidden) + (hidden * c + c);
  const std::size_t merge = 2 * 4 * c + 4 * c * c + c;
  return (p * p * cfg.in_channels * c + c) + n1 * c + c + kNumStages * cfg.blocks_per_stage * block +
         (kNumStages - 1) * merge + 2 * c + linear_cc;
}

}  // namespace tsm
