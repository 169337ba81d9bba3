#include "tsm/scene.hpp"

#include <cmath>
#include <stdexcept>

#include "tsm/errors.hpp"

namespace tsm {

namespace {
constexpr double kInitStd = 0.02;
}

SceneHead SceneHead::init(Rng& rng, std::size_t c) { return {Linear::init(rng, c, c, kInitStd)}; }

Tensor SceneHead::operator()(const FusedPyramid& z) const { return l2_normalize(proj(z.global), 1); }

void SceneHead::collect(ParamList& out, const std::string& prefix) const { proj.collect(out, prefix + ".proj"); }

Tensor info_nce(const Tensor& img, const Tensor& txt, double tau) {
  if (img.rank() != 2 || img.shape() != txt.shape()) {
    throw ShapeError("info_nce: image " + shape_str(img.shape()) + " and text " + shape_str(txt.shape()) +
                     " batches differ");
  }
  const std::size_t b = img.dim(0);
  if (b < 2) throw std::invalid_argument("info_nce needs a batch of at least 2 (no negatives otherwise)");
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce temperature must be positive");
  for (const Tensor* t : {&img, &txt}) {
    const std::size_t c = t->dim(1);
    for (std::size_t i = 0; i < b; ++i) {
      double n2 = 0.0;
      for (std::size_t k = 0; k < c; ++k) n2 += (*t)[i * c + k] * (*t)[i * c + k];
      if (std::abs(std::sqrt(n2) - 1.0) > 1e-6) {
        throw std::invalid_argument("info_nce rows must be unit norm (row " + std::to_string(i) + " has norm " +
                                    std::to_string(std::sqrt(n2)) + ")");
      }
    }
  }
  std::vector<std::size_t> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = i;
  const Tensor logits = mul_scalar(matmul(img, transpose(txt)), 1.0 / tau);
  const Tensor i2t = mean(pick(log_softmax(logits, 1), diag, diag));
  const Tensor t2i = mean(pick(log_softmax(logits, 0), diag, diag));
  return mul_scalar(add(i2t, t2i), -0.5);
}

SceneFusionStage SceneFusionStage::init(Rng& rng, std::size_t c) {
  SceneFusionStage s;
  s.text_proj = Linear::init(rng, c, c, kInitStd);
  s.norm = LayerNorm::init(c);
  s.attn = Attention::init(rng, c, 1, kInitStd);
  s.attn.o = Linear{param_const({c, c}, 0.0), param_const({c}, 0.0)};
  return s;
}

FeatureMap SceneFusionStage::operator()(const FeatureMap& z, const Tensor& desc) const {
  if (desc.rank() != 2 || desc.dim(0) != 1 || desc.dim(1) != text_proj.weight.dim(0) ||
      z.channels() != text_proj.weight.dim(1)) {
    throw ShapeError("scene_fusion: description " + shape_str(desc.shape()) + " does not fit stage " +
                     shape_str(z.tokens.shape()));
  }
  return FeatureMap{add(z.tokens, attn(norm(z.tokens), text_proj(desc))), z.h, z.w};
}

void SceneFusionStage::collect(ParamList& out, const std::string& prefix) const {
  text_proj.collect(out, prefix + ".text_proj");
  norm.collect(out, prefix + ".norm");
  attn.collect(out, prefix + ".attn");
}

SceneFusion SceneFusion::init(Rng& rng, std::size_t c, std::size_t num_stages) {
  SceneFusion f;
  for (std::size_t s = 0; s < num_stages; ++s) f.stages.push_back(SceneFusionStage::init(rng, c));
  return f;
}

FusedPyramid SceneFusion::operator()(const FusedPyramid& z, const Tensor& desc) const {
  if (stages.size() != kNumStages) {
    throw ShapeError("scene_fusion has " + std::to_string(stages.size()) + " stages, pyramid has " +
                     std::to_string(kNumStages));
  }
  FusedPyramid out = z;
  for (std::size_t s = 0; s < kNumStages; ++s) out.stages[s] = stages[s](z.stages[s], desc);
  return out;
}

void SceneFusion::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t s = 0; s < stages.size(); ++s) stages[s].collect(out, prefix + ".stage" + std::to_string(s));
}

}  // namespace tsm
