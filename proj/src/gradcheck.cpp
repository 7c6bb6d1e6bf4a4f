#include "thm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "thm/errors.hpp"
#include "thm/rng.hpp"

namespace thm {

GradCheckReport finite_diff_check(const std::function<Var()>& loss, ParameterList& params,
                                  const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw ParameterError("finite_diff_check: step must be positive");

  for (auto& p : params) p.var.zero_grad();
  const Var root = loss();
  const double baseline = root.value()[0];
  backward(root);

  auto evaluate = [&] {
    NoGradGuard no_grad;
    return loss().value()[0];
  };
  const double again = evaluate();
  if (again != baseline) {
    throw DeterminismError("finite_diff_check: objective is not deterministic (" +
                           std::to_string(baseline) + " then " + std::to_string(again) + ")");
  }

  GradCheckReport report;
  const double h = options.step;
  Rng sampler(options.sample_seed);
  for (auto& p : params) {
    ParameterCheck check{p.name};
    Tensor& value = p.value();
    const Tensor& analytic = p.grad();
    std::vector<std::size_t> entries(value.size());
    std::iota(entries.begin(), entries.end(), 0);
    if (options.max_entries != 0 && options.max_entries < entries.size()) {
      for (std::size_t k = 0; k < options.max_entries; ++k) {
        std::swap(entries[k], entries[k + sampler.below(entries.size() - k)]);
      }
      entries.resize(options.max_entries);
    }
    for (std::size_t i : entries) {
      const double saved = value[i];
      value[i] = saved + h;
      const double plus = evaluate();
      value[i] = saved - h;
      const double minus = evaluate();
      value[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double abs_err = std::abs(numeric - analytic[i]);
      const double denom =
          std::max({std::abs(numeric), std::abs(analytic[i]), options.denominator_floor});
      const double rel = abs_err / denom;
      check.max_abs_error = std::max(check.max_abs_error, abs_err);
      if (rel > check.max_rel_error) {
        check.max_rel_error = rel;
        check.worst_index = i;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.parameters.push_back(std::move(check));
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace thm
