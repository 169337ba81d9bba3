#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "tsm/losses.hpp"

namespace tsm {

// counts[i * k + j]: pixels with ground truth i predicted j.
struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::int64_t> counts;
  std::int64_t n = 0;

  explicit ConfusionMatrix(std::size_t classes = 0) : k(classes), counts(classes * classes, 0) {}
  std::int64_t at(std::size_t gt, std::size_t pred) const { return counts[gt * k + pred]; }
  void merge(const ConfusionMatrix& other);
};

// Accumulates pred vs gt; pixels with gt == ignore_id are skipped. Rejects
// size mismatch and ids >= K.
ConfusionMatrix confusion(const Labels& pred, const Labels& gt, std::size_t k, std::uint8_t ignore_id = kIgnore);
void accumulate(ConfusionMatrix& cm, const Labels& pred, const Labels& gt, std::uint8_t ignore_id = kIgnore);

struct Metrics {
  double oa = 0.0;
  // Sum over classes of (TP+TN) over sum of (TP+FP+TN+FN); equals oa for K=2.
  double oa_binary_mean = 0.0;
  double kappa = 0.0;
  double miou = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> iou, precision, recall, f1;  // per class, 0 when undefined
  std::vector<bool> present;                       // class occurs in gt
};

// OA = trace/n; p_e = sum a_m b_m / n^2 (kappa is 0 when p_e == 1). Macro
// means run over classes present in gt, summed in sorted order so a
// relabeling of classes leaves them bitwise unchanged. Rejects n == 0.
Metrics compute_metrics(const ConfusionMatrix& cm);

// One "name value" line per metric, values printed round-trip exact.
void write_report(std::ostream& out, const Metrics& m, const std::vector<std::string>& class_names);
// Human-readable table.
void write_table(std::ostream& out, const Metrics& m, const std::vector<std::string>& class_names);

}  // namespace tsm
