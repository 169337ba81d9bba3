#pragma once

#include <cstdint>
#include <vector>

#include "tsm/tensor.hpp"

namespace tsm {

using Labels = std::vector<std::uint8_t>;
inline constexpr std::uint8_t kIgnore = 255;

// Mean over non-ignored rows of -log softmax(logits)[label]. logits: [N, K].
// Rejects labels >= K (other than kIgnore) and an all-ignored input.
Tensor cross_entropy(const Tensor& logits, const Labels& labels, std::uint8_t ignore_id = kIgnore);

// 1 - mean_k (2 sum p_k g_k + 1) / (sum p_k + sum g_k + 1) over non-ignored
// rows of probs [N, K]. Rejects rows whose sum is off by more than 1e-4.
Tensor dice_loss(const Tensor& probs, const Labels& labels, std::uint8_t ignore_id = kIgnore);

struct LossBreakdown {
  double l_object = 0.0;
  double l_scene = 0.0;
  double l_ce = 0.0;
  double l_dice = 0.0;
  double l_total = 0.0;
};

// Terms left undefined are absent and count as zero.
struct LossTerms {
  Tensor object, scene, ce, dice;
};

struct TotalLoss {
  Tensor total;
  LossBreakdown parts;
};

// Unweighted sum; a non-finite term is rejected by name (NumericError).
TotalLoss total_loss(const LossTerms& terms);
LossBreakdown total_loss(double object, double scene, double ce, double dice);

// Per-row argmax of cosine(features, text) with ties to the lowest index.
Labels infer_mask(const Tensor& features, const Tensor& text);
// Per-row argmax of a score matrix [N, K], ties to the lowest index.
Labels argmax_rows(const Tensor& scores);

// Nearest downsampling of an H x W label raster to h x w, sampling source
// pixel floor((i + 0.5) * H / h).
Labels downsample_labels(const Labels& labels, std::size_t H, std::size_t W, std::size_t h, std::size_t w);

}  // namespace tsm
