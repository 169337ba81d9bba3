#pragma once

#include <functional>
#include <vector>

#include "tsm/tensor.hpp"

namespace tsm {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = true;
  std::size_t entries = 0;
  // Location and values of the worst entry.
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares reverse-mode gradients of the scalar `fn()` with respect to every
// entry of `inputs` against central differences (f(x+eps) - f(x-eps))/(2 eps).
// Relative error is |a - b| / max(1e-8, |a|, |b|). `fn` must read the inputs'
// current values; they are perturbed in place and restored.
//
// Throws std::invalid_argument for eps <= 0 and NumericError when two
// unperturbed evaluations of fn disagree.
GradCheckReport grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> inputs, double eps = 1e-4,
                           double tol = 1e-4);

}  // namespace tsm
