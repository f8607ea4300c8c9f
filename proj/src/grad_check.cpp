#include "poseroi/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "poseroi/error.hpp"
#include "poseroi/ops.hpp"

namespace poseroi {

namespace {

double evaluate(const ScalarFunction& f, const Tensor& at) {
  const Var out = f(Var::constant(at));
  if (out.value().size() != 1) {
    throw ShapeError("grad_check: function must return one element, got " + to_string(out.shape()));
  }
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
  return v;
}

}  // namespace

double grad_check(const ScalarFunction& f, const Tensor& point, double epsilon) {
  return grad_check_report(f, point, epsilon).worst;
}

GradCheckReport grad_check_report(const ScalarFunction& f, const Tensor& point, double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw ConfigError("grad_check: epsilon must lie in (0, 1e-2]");
  if (!all_finite(point)) throw NumericError("grad_check: evaluation point is not finite");

  const Var x = Var::leaf(point);
  std::uint64_t base_pattern = 0;
  Var y;
  {
    ReluProbe probe;
    y = f(x);
    base_pattern = probe.pattern();
  }
  if (y.value().size() != 1) {
    throw ShapeError("grad_check: function must return one element, got " + to_string(y.shape()));
  }
  backward(y);
  const Tensor analytic = x.grad();
  if (!all_finite(analytic)) throw NumericError("grad_check: analytic gradient is not finite");

  GradCheckReport report;
  Tensor probe_point = point;
  const auto evaluate_probed = [&](bool& crossed) {
    ReluProbe probe;
    const double v = evaluate(f, probe_point);
    crossed = crossed || probe.pattern() != base_pattern;
    return v;
  };
  for (std::size_t i = 0; i < point.size(); ++i) {
    bool crossed = false;
    probe_point[i] = point[i] + epsilon;
    const double up = evaluate_probed(crossed);
    probe_point[i] = point[i] - epsilon;
    const double down = evaluate_probed(crossed);
    probe_point[i] = point[i];
    if (crossed) ++report.kink_crossings;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double err = std::abs(a - numeric) / denom;
    if (err > report.worst) {
      report.worst = err;
      report.worst_index = i;
    }
  }
  return report;
}

}  // namespace poseroi
