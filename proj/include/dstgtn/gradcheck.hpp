#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "dstgtn/tensor.hpp"

namespace dstgtn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Compares the reverse-mode gradient of `loss_fn` w.r.t. `param` against central
/// differences with the given step. Relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8); the maximum is returned.
///
/// `loss_fn` must be deterministic and return a scalar tensor built from `param`.
template <class T, class F>
GradCheckResult finite_diff_check(F&& loss_fn, Tensor<T> param, T step) {
  param.zero_grad();
  backward(loss_fn());
  const auto analytic = param.grad();

  GradCheckResult result;
  NoGradGuard no_grad;
  auto values = param.mutable_values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T original = values[i];
    values[i] = original + step;
    const double up = static_cast<double>(loss_fn().item());
    values[i] = original - step;
    const double down = static_cast<double>(loss_fn().item());
    values[i] = original;

    const double numeric = (up - down) / (2.0 * static_cast<double>(step));
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (i == 0 || rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_index = i;
      result.analytic_at_worst = a;
      result.numeric_at_worst = numeric;
    }
  }
  param.zero_grad();
  return result;
}

}  // namespace dstgtn
