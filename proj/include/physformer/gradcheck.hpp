// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "physformer/ops.hpp"

namespace physformer {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Denominator floor of the relative error, so that coordinates where both
  /// gradients vanish are compared absolutely.
  double floor = 1e-6;
  /// Check at most this many coordinates (chosen at random); 0 checks all.
  std::size_t max_coords = 0;
  std::uint64_t seed = 7;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::vector<std::size_t> nonfinite;  // coordinates with a non-finite value
  double tol = 0.0;
  bool passed = false;
};

/// Compares d f / d x from backward against central differences.
/// f must return a scalar Var.
GradCheckReport grad_check(const std::function<Var(const Var&)>& f, const Tensor& x, const GradCheckOptions& opt = {});

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
};

/// Every primitive, conv3d and TDC, one transformer block, the three losses
/// and a full toy model. `tol` applies to all but the full model, which uses
/// `model_tol`.
std::vector<GradCheckCase> gradcheck_suite(double tol = 1e-4, double model_tol = 1e-3);

}  // namespace physformer
