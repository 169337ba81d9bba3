#pragma once

// Finite-difference verification of every differentiable module on tiny
// shapes, as run by the `gradcheck` subcommand.

#include <cstdint>
#include <string>
#include <vector>

#include "tsm/gradcheck.hpp"

namespace tsm {

struct ModuleCheck {
  std::string module;
  GradCheckReport report;
  // Parameters whose true gradient is exactly zero (attention keys over a
  // softmax that cannot depend on them) are not finite-differenced; their
  // analytic gradient must stay below 1e-10 instead.
  std::size_t structural_zero = 0;
  bool structural_ok = true;
  bool pass() const { return report.pass && structural_ok; }
};

const std::vector<std::string>& gradcheck_modules();

// Runs every module at eps 1e-4, tolerance `tol`. `fault` names a module
// whose output gradient is scaled by 1.5 (test fixture); empty for none.
std::vector<ModuleCheck> run_gradcheck_suite(std::uint64_t seed, double tol = 1e-4, const std::string& fault = "");

}  // namespace tsm
