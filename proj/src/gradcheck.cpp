#include "tsm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace tsm {

GradCheckReport grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> inputs, double eps, double tol) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }

  const Tensor first = fn();
  double again = 0.0;
  {
    NoGradGuard ng;
    again = fn().item();
  }
  const double f0 = first.item();
  if (std::memcmp(&f0, &again, sizeof(double)) != 0) {
    throw NumericError("grad_check: function is not deterministic (two evaluations disagree)");
  }
  backward(first);

  GradCheckReport report;
  NoGradGuard ng;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double fp = fn().item();
      values[i] = orig - eps;
      const double fm = fn().item();
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i];
      const double denom = std::max({1e-8, std::abs(a), std::abs(numeric)});
      const double rel = std::abs(a - numeric) / denom;
      const double r = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
      if (r > report.max_rel_err || report.entries == 0) {
        report.max_rel_err = r;
        report.worst_input = ti;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
      ++report.entries;
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace tsm
