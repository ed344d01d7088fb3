// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <stdexcept>
#include <string>

#include "moeplan/kernels.hpp"

namespace moeplan::kernels {

namespace {

constexpr KernelTable kScalar{Isa::Scalar, detail::squared_distance_scalar,
                              detail::accumulate_scalar};
#if defined(MOEPLAN_HAVE_AVX2)
constexpr KernelTable kAvx2{Isa::Avx2, detail::squared_distance_avx2, detail::accumulate_avx2};
#endif
#if defined(MOEPLAN_HAVE_NEON)
constexpr KernelTable kNeon{Isa::Neon, detail::squared_distance_neon, detail::accumulate_neon};
#endif

bool cpu_supports(Isa isa) {
  switch (isa) {
    case Isa::Scalar:
      return true;
    case Isa::Avx2:
#if defined(MOEPLAN_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
      return __builtin_cpu_supports("avx2");
#else
      return false;
#endif
    case Isa::Neon:
#if defined(MOEPLAN_HAVE_NEON)
      return true;  // mandatory on aarch64
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& pick() {
  if (const char* env = std::getenv("MOEPLAN_SIMD")) {
    const std::string want(env);
    for (Isa isa : available_isas())
      if (to_string(isa) == want) return table_for(isa);
    throw std::invalid_argument("MOEPLAN_SIMD=" + want + " is not available on this host");
  }
  return table_for(available_isas().back());
}

}  // namespace

std::string_view to_string(Isa isa) {
  switch (isa) {
    case Isa::Scalar:
      return "scalar";
    case Isa::Avx2:
      return "avx2";
    case Isa::Neon:
      return "neon";
  }
  return "?";
}

const KernelTable& scalar_table() { return kScalar; }

std::vector<Isa> available_isas() {
  std::vector<Isa> out{Isa::Scalar};
  for (Isa isa : {Isa::Avx2, Isa::Neon})
    if (cpu_supports(isa)) out.push_back(isa);
  return out;
}

const KernelTable& table_for(Isa isa) {
  if (!cpu_supports(isa))
    throw std::invalid_argument("kernel variant '" + std::string(to_string(isa)) +
                                "' is not available");
  switch (isa) {
#if defined(MOEPLAN_HAVE_AVX2)
    case Isa::Avx2:
      return kAvx2;
#endif
#if defined(MOEPLAN_HAVE_NEON)
    case Isa::Neon:
      return kNeon;
#endif
    default:
      return kScalar;
  }
}

const KernelTable& active() {
  static const KernelTable& table = pick();
  return table;
}

Nearest nearest_row(std::span<const double> point, std::span<const double> rows, std::size_t dim,
                    const KernelTable& table) {
  const std::size_t n = dim == 0 ? 0 : rows.size() / dim;
  if (n == 0) throw std::invalid_argument("nearest_row: no rows");
  Nearest best{0, table.squared_distance(point.data(), rows.data(), dim)};
  for (std::size_t r = 1; r < n; ++r) {
    const double d = table.squared_distance(point.data(), rows.data() + r * dim, dim);
    if (d < best.distance) best = {r, d};
  }
  return best;
}

}  // namespace moeplan::kernels
