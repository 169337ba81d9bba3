#include "tsm/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "tsm/errors.hpp"

namespace tsm {

namespace {

// Indices of non-ignored rows; validates labels against K.
std::vector<std::size_t> valid_rows(const Labels& labels, std::size_t n, std::size_t k, std::uint8_t ignore_id,
                                    const char* what) {
  if (labels.size() != n) {
    throw ShapeError(std::string(what) + ": " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                     " rows");
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == ignore_id) continue;
    if (labels[i] >= k) {
      throw std::invalid_argument(std::string(what) + ": label " + std::to_string(labels[i]) + " at pixel " +
                                  std::to_string(i) + " outside [0," + std::to_string(k) + ")");
    }
    rows.push_back(i);
  }
  if (rows.empty()) throw std::invalid_argument(std::string(what) + ": every pixel is ignored");
  return rows;
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const Labels& labels, std::uint8_t ignore_id) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects [N, K] logits, got " + shape_str(logits.shape()));
  const std::vector<std::size_t> rows = valid_rows(labels, logits.dim(0), logits.dim(1), ignore_id, "cross_entropy");
  std::vector<std::size_t> cols(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) cols[i] = labels[rows[i]];
  return neg(mean(pick(log_softmax(logits, 1), rows, cols)));
}

Tensor dice_loss(const Tensor& probs, const Labels& labels, std::uint8_t ignore_id) {
  if (probs.rank() != 2) throw ShapeError("dice_loss expects [N, K] probabilities, got " + shape_str(probs.shape()));
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += probs[i * k + j];
    if (std::abs(s - 1.0) > 1e-4) {
      throw std::invalid_argument("dice_loss: row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
  const std::vector<std::size_t> rows = valid_rows(labels, n, k, ignore_id, "dice_loss");
  std::vector<double> onehot(rows.size() * k, 0.0);
  std::vector<double> g_sum(k, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    onehot[i * k + labels[rows[i]]] = 1.0;
    g_sum[labels[rows[i]]] += 1.0;
  }
  const Tensor p = rows.size() == n ? probs : gather_rows(probs, rows);
  const Tensor g = Tensor::from({rows.size(), k}, std::move(onehot));
  const Tensor inter = sum(mul(p, g), 0);
  const Tensor denom = add(add(sum(p, 0), Tensor::from({k}, std::move(g_sum))), Tensor::scalar(1.0));
  const Tensor dice = div(add_scalar(mul_scalar(inter, 2.0), 1.0), denom);
  return add_scalar(neg(mean(dice)), 1.0);
}

TotalLoss total_loss(const LossTerms& terms) {
  const std::pair<const char*, const Tensor*> named[] = {
      {"l_object", &terms.object}, {"l_scene", &terms.scene}, {"l_ce", &terms.ce}, {"l_dice", &terms.dice}};
  double vals[4] = {0, 0, 0, 0};
  Tensor total;
  for (std::size_t i = 0; i < 4; ++i) {
    const Tensor& t = *named[i].second;
    if (!t.defined()) continue;
    if (t.numel() != 1) throw ShapeError(std::string(named[i].first) + " is not a scalar");
    vals[i] = t.item();
    if (!std::isfinite(vals[i])) throw NumericError(std::string(named[i].first) + " is not finite");
    total = total.defined() ? add(total, t) : t;
  }
  if (!total.defined()) total = Tensor::scalar(0.0);
  TotalLoss out;
  out.total = total;
  out.parts = total_loss(vals[0], vals[1], vals[2], vals[3]);
  return out;
}

LossBreakdown total_loss(double object, double scene, double ce, double dice) {
  const std::pair<const char*, double> named[] = {{"l_object", object}, {"l_scene", scene}, {"l_ce", ce}, {"l_dice", dice}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) throw NumericError(std::string(name) + " is not finite");
  }
  return LossBreakdown{object, scene, ce, dice, object + scene + ce + dice};
}

Labels argmax_rows(const Tensor& scores) {
  if (scores.rank() != 2 || scores.dim(1) == 0) throw ShapeError("argmax over " + shape_str(scores.shape()));
  const std::size_t n = scores.dim(0), k = scores.dim(1);
  if (k > kIgnore) throw std::invalid_argument("too many classes for an 8-bit mask");
  Labels out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (scores[i * k + j] > scores[i * k + best]) best = j;
    }
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

Labels infer_mask(const Tensor& features, const Tensor& text) {
  if (!text.defined() || text.rank() != 2 || text.dim(0) == 0) throw std::invalid_argument("infer_mask: empty vocabulary");
  if (features.rank() != 2 || features.dim(1) != text.dim(1)) {
    throw ShapeError("infer_mask: features " + shape_str(features.shape()) + " vs text " + shape_str(text.shape()));
  }
  NoGradGuard ng;
  return argmax_rows(matmul(l2_normalize(features, 1), transpose(l2_normalize(text, 1))));
}

Labels downsample_labels(const Labels& labels, std::size_t H, std::size_t W, std::size_t h, std::size_t w) {
  if (labels.size() != H * W) throw ShapeError("downsample_labels: raster size mismatch");
  Labels out(h * w);
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t si = (2 * i + 1) * H / (2 * h);
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = labels[si * W + (2 * j + 1) * W / (2 * w)];
  }
  return out;
}

}  // namespace tsm
