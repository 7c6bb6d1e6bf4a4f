#pragma once

#include <functional>
#include <string>
#include <vector>

#include "thm/graph.hpp"

namespace thm {

struct ParameterCheck {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
};

struct GradCheckReport {
  std::vector<ParameterCheck> parameters;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  /// Relative errors are taken against max(|analytic|, |numeric|, floor) so
  /// that vanishing gradients compare on an absolute scale.
  double denominator_floor = 1e-5;
  /// When non-zero, checks only this many entries per parameter, drawn
  /// without replacement from `sample_seed`.
  std::size_t max_entries = 0;
  std::uint64_t sample_seed = 0;
};

/// Compares analytic gradients of `loss` with central differences
/// (f(θ+h) - f(θ-h)) / 2h for every element of every parameter (or a
/// sample of elements, see GradCheckOptions::max_entries).
///
/// `loss` must rebuild the graph from scratch on each call and be
/// deterministic; two baseline evaluations that differ raise
/// DeterminismError. Parameter gradients are zeroed before use and left
/// holding the analytic gradient.
GradCheckReport finite_diff_check(const std::function<Var()>& loss, ParameterList& params,
                                  const GradCheckOptions& options = {});

}  // namespace thm
