// SPDX-License-Identifier: Apache-2.0

#include <arm_neon.h>

#include "moeplan/kernels.hpp"

namespace moeplan::kernels::detail {

double squared_distance_neon(const double* a, const double* b, std::size_t n) {
  float64x2_t lo = vdupq_n_f64(0.0);  // lanes 0, 1
  float64x2_t hi = vdupq_n_f64(0.0);  // lanes 2, 3
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const float64x2_t d0 = vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i));
    const float64x2_t d1 = vsubq_f64(vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
    lo = vaddq_f64(lo, vmulq_f64(d0, d0));
    hi = vaddq_f64(hi, vmulq_f64(d1, d1));
  }
  double lane[4];
  vst1q_f64(lane, lo);
  vst1q_f64(lane + 2, hi);
  for (; i < n; ++i) {
    const double d = a[i] - b[i];
    lane[i & 3] += d * d;
  }
  return (lane[0] + lane[1]) + (lane[2] + lane[3]);
}

void accumulate_neon(double* acc, const double* x, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(acc + i, vaddq_f64(vld1q_f64(acc + i), vld1q_f64(x + i)));
  for (; i < n; ++i) acc[i] += x[i];
}

}  // namespace moeplan::kernels::detail
