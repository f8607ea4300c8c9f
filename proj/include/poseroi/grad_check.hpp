#pragma once

#include <functional>

#include "poseroi/autograd.hpp"

namespace poseroi {

/// Scalar-valued differentiable composition of one tensor argument.
using ScalarFunction = std::function<Var(const Var&)>;

/// Compares the reverse-mode gradient of `f` at `point` with central finite
/// differences, one coordinate at a time. Returns the worst relative error
/// |a - n| / max(|a|, |n|, 1e-8).
///
/// Throws ConfigError for epsilon outside (0, 1e-2] and NumericError when the
/// function or either gradient is non-finite.
double grad_check(const ScalarFunction& f, const Tensor& point, double epsilon);

struct GradCheckReport {
  double worst = 0.0;
  std::size_t worst_index = 0;
  /// Coordinates whose +-epsilon evaluations switched some relu on or off,
  /// so the difference quotient straddles a kink.
  std::size_t kink_crossings = 0;
};

GradCheckReport grad_check_report(const ScalarFunction& f, const Tensor& point, double epsilon);

}  // namespace poseroi
