#include "tsm/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "tsm/errors.hpp"

namespace tsm {

namespace {

using Wide = long double;

Wide ratio(std::int64_t a, std::int64_t b) { return b == 0 ? 0.0L : static_cast<Wide>(a) / static_cast<Wide>(b); }

// Extended-precision sum in sorted order, rounded once at the end.
double sorted_mean(std::vector<Wide> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  Wide s = 0.0L;
  for (Wide x : v) s += x;
  return static_cast<double>(s / static_cast<Wide>(v.size()));
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Class names become key suffixes: spaces to underscores.
std::string key_name(std::string s) {
  std::replace(s.begin(), s.end(), ' ', '_');
  return s;
}

}  // namespace

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k != k) throw ShapeError("confusion matrices of different class counts");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  n += other.n;
}

void accumulate(ConfusionMatrix& cm, const Labels& pred, const Labels& gt, std::uint8_t ignore_id) {
  if (pred.size() != gt.size()) {
    throw ShapeError("confusion: prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                     std::to_string(gt.size()));
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore_id) continue;
    if (gt[i] >= cm.k || pred[i] >= cm.k) {
      throw std::invalid_argument("confusion: class id " + std::to_string(std::max(gt[i], pred[i])) + " >= K=" +
                                  std::to_string(cm.k));
    }
    ++cm.counts[gt[i] * cm.k + pred[i]];
    ++cm.n;
  }
}

ConfusionMatrix confusion(const Labels& pred, const Labels& gt, std::size_t k, std::uint8_t ignore_id) {
  ConfusionMatrix cm(k);
  accumulate(cm, pred, gt, ignore_id);
  return cm;
}

Metrics compute_metrics(const ConfusionMatrix& cm) {
  if (cm.n <= 0) throw std::invalid_argument("metrics: no labeled pixels (n == 0)");
  const std::size_t k = cm.k;
  Metrics m;
  m.iou.assign(k, 0.0);
  m.precision.assign(k, 0.0);
  m.recall.assign(k, 0.0);
  m.f1.assign(k, 0.0);
  m.present.assign(k, false);

  std::int64_t trace = 0;
  std::int64_t pe_num = 0;
  std::int64_t literal_num = 0;
  std::vector<Wide> ious, precs, recs, f1s;
  for (std::size_t c = 0; c < k; ++c) {
    std::int64_t a = 0, b = 0;  // actual, predicted
    for (std::size_t j = 0; j < k; ++j) {
      a += cm.at(c, j);
      b += cm.at(j, c);
    }
    const std::int64_t tp = cm.at(c, c);
    const std::int64_t fn = a - tp;
    const std::int64_t fp = b - tp;
    const std::int64_t tn = cm.n - tp - fn - fp;
    trace += tp;
    pe_num += a * b;
    literal_num += tp + tn;

    const Wide iou = ratio(tp, tp + fp + fn);
    const Wide prec = ratio(tp, tp + fp);
    const Wide rec = ratio(tp, tp + fn);
    const Wide f1 = ratio(2 * tp, 2 * tp + fp + fn);  // harmonic mean of prec and rec
    m.iou[c] = static_cast<double>(iou);
    m.precision[c] = static_cast<double>(prec);
    m.recall[c] = static_cast<double>(rec);
    m.f1[c] = static_cast<double>(f1);
    m.present[c] = a > 0;
    if (m.present[c]) {
      ious.push_back(iou);
      precs.push_back(prec);
      recs.push_back(rec);
      f1s.push_back(f1);
    }
  }
  const double n = static_cast<double>(cm.n);
  m.oa = static_cast<double>(trace) / n;
  m.oa_binary_mean = static_cast<double>(literal_num) / (static_cast<double>(k) * n);
  const double pe = static_cast<double>(pe_num) / (n * n);
  m.kappa = pe == 1.0 ? 0.0 : (m.oa - pe) / (1.0 - pe);
  m.miou = sorted_mean(ious);
  m.macro_precision = sorted_mean(precs);
  m.macro_recall = sorted_mean(recs);
  m.macro_f1 = sorted_mean(f1s);
  return m;
}

void write_report(std::ostream& out, const Metrics& m, const std::vector<std::string>& class_names) {
  if (class_names.size() != m.iou.size()) throw std::invalid_argument("report: class name count mismatch");
  out << "oa " << fmt(m.oa) << '\n';
  out << "oa_binary_mean " << fmt(m.oa_binary_mean) << '\n';
  out << "kappa " << fmt(m.kappa) << '\n';
  out << "miou " << fmt(m.miou) << '\n';
  out << "macro_precision " << fmt(m.macro_precision) << '\n';
  out << "macro_recall " << fmt(m.macro_recall) << '\n';
  out << "macro_f1 " << fmt(m.macro_f1) << '\n';
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    const std::string k = key_name(class_names[c]);
    out << "per_class_iou_" << k << ' ' << fmt(m.iou[c]) << '\n';
    out << "per_class_precision_" << k << ' ' << fmt(m.precision[c]) << '\n';
    out << "per_class_recall_" << k << ' ' << fmt(m.recall[c]) << '\n';
    out << "per_class_f1_" << k << ' ' << fmt(m.f1[c]) << '\n';
  }
}

void write_table(std::ostream& out, const Metrics& m, const std::vector<std::string>& class_names) {
  char line[160];
  std::snprintf(line, sizeof line, "OA %.4f  Kappa %.4f  mIoU %.4f  P %.4f  R %.4f  F1 %.4f\n", m.oa, m.kappa, m.miou,
                m.macro_precision, m.macro_recall, m.macro_f1);
  out << line;
  std::snprintf(line, sizeof line, "%-16s %8s %8s %8s %8s %s\n", "class", "IoU", "prec", "recall", "F1", "in gt");
  out << line;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    std::snprintf(line, sizeof line, "%-16s %8.4f %8.4f %8.4f %8.4f %s\n", class_names[c].c_str(), m.iou[c],
                  m.precision[c], m.recall[c], m.f1[c], m.present[c] ? "yes" : "no");
    out << line;
  }
}

}  // namespace tsm
