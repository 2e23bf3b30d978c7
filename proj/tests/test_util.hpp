#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lara/rng.hpp"
#include "lara/tensor.hpp"

namespace lara::testing {

using Tensor64 = TensorT<double>;

inline void fill_random(TensorT<double>& t, Rng& rng, double scale = 1.0) {
  for (auto& v : t.data()) v = rng.normal() * scale;
}

inline void fill_random(TensorT<float>& t, Rng& rng, double scale = 1.0) {
  for (auto& v : t.data()) v = static_cast<float>(rng.normal() * scale);
}

/// Central finite difference of a scalar-valued closure w.r.t. one entry.
inline double fd_entry(Tensor64& param, int64_t idx,
                       const std::function<double()>& loss_fn, double step = 1e-3) {
  const double orig = param.at(idx);
  param.at(idx) = orig + step;
  const double up = loss_fn();
  param.at(idx) = orig - step;
  const double down = loss_fn();
  param.at(idx) = orig;
  return (up - down) / (2.0 * step);
}

struct GradCheckResult {
  double max_err = 0.0;
  int64_t checked = 0;
  std::string worst;
};

/// Compares analytic gradients (already accumulated in the params) against
/// central finite differences of loss_fn over every entry of every listed
/// tensor. The error metric is |a - fd| / max(1, |a|, |fd|): relative for
/// large gradients, absolute for vanishing ones.
inline GradCheckResult check_gradients(std::vector<Tensor64*> params,
                                       const std::function<double()>& loss_fn,
                                       double step = 1e-3) {
  GradCheckResult res;
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor64& t = *params[p];
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double analytic = t.has_grad() ? t.grad()[static_cast<size_t>(i)] : 0.0;
      const double fd = fd_entry(t, i, loss_fn, step);
      const double err = std::abs(analytic - fd) / std::max({1.0, std::abs(analytic), std::abs(fd)});
      ++res.checked;
      if (err > res.max_err) {
        res.max_err = err;
        res.worst = "param " + std::to_string(p) + " entry " + std::to_string(i) + ": analytic " +
                    std::to_string(analytic) + " vs fd " + std::to_string(fd);
      }
    }
  }
  return res;
}

/// erf by its Maclaurin series, summed in long double until convergence.
/// Independent of std::erf.
inline double erf_series(double x) {
  const long double z = x;
  long double term = z, sum = z;
  for (int n = 1; n < 200; ++n) {
    term *= -z * z / n;
    const long double contrib = term / (2 * n + 1);
    sum += contrib;
    if (std::abs(static_cast<double>(contrib)) < 1e-19) break;
  }
  return static_cast<double>(sum * 2.0L / std::sqrt(static_cast<long double>(M_PI)));
}

}  // namespace lara::testing
