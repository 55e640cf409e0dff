#pragma once

#include <cmath>

namespace hyperlora {

// Exact (erf-based) GELU, shared by the backbone MLP and the decoder blocks.
template <typename T>
T gelu(T x) {
  return static_cast<T>(0.5 * static_cast<double>(x) *
                        (1.0 + std::erf(static_cast<double>(x) /
                                        1.4142135623730951)));
}

template <typename T>
T gelu_grad(T x) {
  double xd = static_cast<double>(x);
  double cdf = 0.5 * (1.0 + std::erf(xd / 1.4142135623730951));
  double pdf = std::exp(-0.5 * xd * xd) / 2.5066282746310002;  // sqrt(2*pi)
  return static_cast<T>(cdf + xd * pdf);
}

}  // namespace hyperlora
