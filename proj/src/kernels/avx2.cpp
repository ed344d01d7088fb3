// SPDX-License-Identifier: Apache-2.0
//
// Built with -mavx2 (no -mfma); only reached after a runtime CPU check.

#include <immintrin.h>

#include "moeplan/kernels.hpp"

namespace moeplan::kernels::detail {

double squared_distance_avx2(const double* a, const double* b, std::size_t n) {
  __m256d vacc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    vacc = _mm256_add_pd(vacc, _mm256_mul_pd(d, d));
  }
  alignas(32) double lane[4];
  _mm256_store_pd(lane, vacc);
  for (; i < n; ++i) {
    const double d = a[i] - b[i];
    lane[i & 3] += d * d;
  }
  return (lane[0] + lane[1]) + (lane[2] + lane[3]);
}

void accumulate_avx2(double* acc, const double* x, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(acc + i, _mm256_add_pd(_mm256_loadu_pd(acc + i), _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) acc[i] += x[i];
}

}  // namespace moeplan::kernels::detail
