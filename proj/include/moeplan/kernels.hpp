// SPDX-License-Identifier: Apache-2.0
//
// Data-parallel inner loops used by clustering, with a scalar reference and
// AVX2 / NEON variants chosen at runtime.
//
// Every variant accumulates squared differences into four interleaved lanes
// (element i goes to lane i % 4) and combines them as (l0 + l1) + (l2 + l3),
// without fused multiply-add. The variants are therefore bit-identical, and
// clustering results do not depend on the host CPU.

#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace moeplan::kernels {

enum class Isa { Scalar, Avx2, Neon };

std::string_view to_string(Isa isa);

struct KernelTable {
  Isa isa;
  double (*squared_distance)(const double* a, const double* b, std::size_t n);
  void (*accumulate)(double* acc, const double* x, std::size_t n);
};

const KernelTable& scalar_table();

// Variants compiled in and supported by this CPU, scalar first.
std::vector<Isa> available_isas();

// Throws std::invalid_argument if `isa` is not available.
const KernelTable& table_for(Isa isa);

// Widest available variant, or the one named by MOEPLAN_SIMD
// ("scalar", "avx2", "neon") when set. Chosen once per process.
const KernelTable& active();

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  return active().squared_distance(a.data(), b.data(), a.size());
}

inline void accumulate(std::span<double> acc, std::span<const double> x) {
  active().accumulate(acc.data(), x.data(), acc.size());
}

struct Nearest {
  std::size_t index = 0;
  double distance = 0.0;  // squared
};

// Nearest row of a row-major matrix; ties go to the lowest index.
Nearest nearest_row(std::span<const double> point, std::span<const double> rows, std::size_t dim,
                    const KernelTable& table = active());

namespace detail {
double squared_distance_scalar(const double* a, const double* b, std::size_t n);
void accumulate_scalar(double* acc, const double* x, std::size_t n);
#if defined(MOEPLAN_HAVE_AVX2)
double squared_distance_avx2(const double* a, const double* b, std::size_t n);
void accumulate_avx2(double* acc, const double* x, std::size_t n);
#endif
#if defined(MOEPLAN_HAVE_NEON)
double squared_distance_neon(const double* a, const double* b, std::size_t n);
void accumulate_neon(double* acc, const double* x, std::size_t n);
#endif
}  // namespace detail

}  // namespace moeplan::kernels
