#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "theorylab/error.hpp"

namespace theorylab {

struct FitResult {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::size_t n_points = 0;
};

/// Ordinary least squares y = intercept + slope * x.
inline FitResult fit_linear(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), error_kind::invalid_argument, "fit needs matching x and y");
  require(x.size() >= 2, error_kind::invalid_argument, "fit needs at least 2 points");
  const auto n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  require(sxx > 0.0, error_kind::invalid_argument, "fit needs at least two distinct x values");
  FitResult fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.n_points = x.size();
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - fit.intercept - fit.slope * x[i];
    ss_res += r * r;
  }
  fit.r2 = syy > 0.0 ? std::clamp(1.0 - ss_res / syy, 0.0, 1.0) : 1.0;
  return fit;
}

/// OLS on (ln x, ln y).
inline FitResult fit_loglog(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), error_kind::invalid_argument, "fit needs matching x and y");
  require(x.size() >= 3, error_kind::invalid_argument, "log-log fit needs at least 3 points");
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    require(x[i] > 0.0 && y[i] > 0.0 && std::isfinite(x[i]) && std::isfinite(y[i]), error_kind::invalid_argument,
            "log-log fit needs positive finite values");
    lx.push_back(std::log(x[i]));
    ly.push_back(std::log(y[i]));
  }
  return fit_linear(lx, ly);
}

/// y = slope * x. r2 is against the mean of y (may be clamped to 0).
inline FitResult fit_through_origin(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && !x.empty(), error_kind::invalid_argument, "fit needs matching nonempty x and y");
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  require(sxx > 0.0, error_kind::invalid_argument, "fit through the origin needs a nonzero x");
  FitResult fit;
  fit.slope = sxy / sxx;
  fit.n_points = x.size();
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    ss_res += (y[i] - fit.slope * x[i]) * (y[i] - fit.slope * x[i]);
    ss_tot += (y[i] - my) * (y[i] - my);
  }
  fit.r2 = ss_tot > 0.0 ? std::clamp(1.0 - ss_res / ss_tot, 0.0, 1.0) : (ss_res == 0.0 ? 1.0 : 0.0);
  return fit;
}

/// Linear-interpolation quantile (the usual "type 7" definition).
inline double quantile(std::vector<double> values, double q) {
  require(!values.empty(), error_kind::invalid_argument, "quantile of an empty sample");
  require(q >= 0.0 && q <= 1.0, error_kind::invalid_argument, "quantile level must be in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

inline double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

inline double mean(std::span<const double> values) {
  require(!values.empty(), error_kind::invalid_argument, "mean of an empty sample");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

inline bool is_nondecreasing(std::span<const double> v, double tol = 0.0) {
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] < v[i - 1] - tol) return false;
  }
  return true;
}

inline bool is_nonincreasing(std::span<const double> v, double tol = 0.0) {
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[i - 1] + tol) return false;
  }
  return true;
}

}  // namespace theorylab
