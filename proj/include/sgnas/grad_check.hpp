#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sgnas/ops.hpp"

namespace sgnas {

// Largest per-coordinate disagreement between the analytic gradient of a
// scalar function and its central finite difference, measured as
// |analytic - numeric| / max(1, |numeric|).
template <typename T>
double grad_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f,
                  const BasicTensor<T>& point, double h) {
  auto x = BasicTensor<T>::from(point.shape(),
                                std::vector<T>(point.values().begin(), point.values().end()), true);
  auto y = f(x);
  if (y.size() != 1)
    throw ContractError("grad_check: function output has shape " + shape_str(y.shape()) +
                        ", expected a scalar");
  backward(y);
  std::vector<T> analytic(x.size(), T(0));
  if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

  double worst = 0.0;
  std::vector<T> probe(point.values().begin(), point.values().end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const T orig = probe[i];
    probe[i] = static_cast<T>(orig + h);
    const double hi = probe[i];
    const double up = f(BasicTensor<T>::from(point.shape(), probe)).item();
    probe[i] = static_cast<T>(orig - h);
    const double lo = probe[i];
    const double down = f(BasicTensor<T>::from(point.shape(), probe)).item();
    probe[i] = orig;
    // Divide by the representable step, not the nominal one.
    const double numeric = (up - down) / (hi - lo);
    const double err = std::abs(static_cast<double>(analytic[i]) - numeric) /
                       std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace sgnas
