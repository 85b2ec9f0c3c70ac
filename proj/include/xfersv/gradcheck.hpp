#pragma once

#include <algorithm>
#include <cmath>

#include "xfersv/errors.hpp"
#include "xfersv/numerics.hpp"

namespace xfersv {

// Compares an analytical gradient against central differences
// (f(x + h) - f(x - h)) / 2h, coordinate by coordinate. Returns the largest
// |a - n| / max(|a|, |n|, 1e-8).
template <typename Fn>
double grad_check(Fn&& value_at, const Matrix& point, const Matrix& analytic, double step = 1e-5) {
  if (!point.same_shape(analytic)) {
    throw ShapeError("grad_check: gradient shape " + analytic.shape_string() +
                     " does not match input " + point.shape_string());
  }
  Matrix probe = point;
  double worst = 0.0;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const double original = probe.values()[k];
    probe.values()[k] = original + step;
    const double plus = value_at(static_cast<const Matrix&>(probe));
    probe.values()[k] = original - step;
    const double minus = value_at(static_cast<const Matrix&>(probe));
    probe.values()[k] = original;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NumericError("grad_check: non-finite loss at perturbed point");
    }
    const double numeric = (plus - minus) / (2.0 * step);
    const double a = analytic.values()[k];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace xfersv
