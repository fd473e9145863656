#pragma once

// Finite-difference gradient oracle shared by the gradient tests and the
// acceptance suite. The five-point stencil has O(h^4) truncation error, which
// lets h be large enough that rounding (eps * |f| / h) stays well below the
// tolerances used on small gradient entries.

#include <algorithm>
#include <cmath>
#include <functional>

#include <Eigen/Core>

namespace pvess::testing {

inline Eigen::VectorXd numeric_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                        Eigen::VectorXd x, double h = 1e-3) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    auto at = [&](double step) {
      x[i] = keep + step;
      return f(x);
    };
    g[i] = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
    x[i] = keep;
  }
  return g;
}

// Largest elementwise |a - n| / max(|a|, |n|, floor). The floor keeps
// entries that are zero up to rounding from dominating.
inline double max_relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric,
                                 double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / scale);
  }
  return worst;
}

}  // namespace pvess::testing
