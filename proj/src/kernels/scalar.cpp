// SPDX-License-Identifier: Apache-2.0

#include "moeplan/kernels.hpp"

namespace moeplan::kernels::detail {

double squared_distance_scalar(const double* a, const double* b, std::size_t n) {
  double lane[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    for (std::size_t j = 0; j < 4; ++j) {
      const double d = a[i + j] - b[i + j];
      lane[j] += d * d;
    }
  }
  for (; i < n; ++i) {
    const double d = a[i] - b[i];
    lane[i & 3] += d * d;
  }
  return (lane[0] + lane[1]) + (lane[2] + lane[3]);
}

void accumulate_scalar(double* acc, const double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) acc[i] += x[i];
}

}  // namespace moeplan::kernels::detail
