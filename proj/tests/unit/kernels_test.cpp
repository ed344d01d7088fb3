// SPDX-License-Identifier: Apache-2.0

#include <cstring>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "moeplan/kernels.hpp"
#include "moeplan/rng.hpp"

using namespace moeplan;
using namespace moeplan::kernels;

namespace {
std::vector<double> random_vector(Rng& rng, std::size_t n, double scale) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

bool bit_equal(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }
}  // namespace

TEST_SUITE("kernels") {
  TEST_CASE("scalar reference values") {
    const std::vector<double> a{1, 2, 3, 4, 5}, b{0, 0, 0, 0, 0};
    CHECK(scalar_table().squared_distance(a.data(), b.data(), 5) == 55.0);
    CHECK(scalar_table().squared_distance(a.data(), a.data(), 5) == 0.0);
    CHECK(scalar_table().squared_distance(a.data(), b.data(), 0) == 0.0);
    std::vector<double> acc{1, 1, 1, 1, 1};
    scalar_table().accumulate(acc.data(), a.data(), 5);
    CHECK(acc == std::vector<double>{2, 3, 4, 5, 6});
  }

  TEST_CASE("available variants") {
    const auto isas = available_isas();
    REQUIRE_FALSE(isas.empty());
    CHECK(isas.front() == Isa::Scalar);
    for (Isa isa : isas) CHECK(table_for(isa).isa == isa);
    const Isa active_isa = active().isa;
    CHECK(std::find(isas.begin(), isas.end(), active_isa) != isas.end());
    MESSAGE("active kernel: " << to_string(active_isa));
  }

  TEST_CASE("variants are bit-identical to scalar") {
    Rng rng(42);
    for (Isa isa : available_isas()) {
      const KernelTable& t = table_for(isa);
      for (std::size_t n = 0; n <= 67; ++n) {
        for (double scale : {1e-3, 1.0, 1e6}) {
          const auto a = random_vector(rng, n, scale);
          const auto b = random_vector(rng, n, scale);
          CHECK(bit_equal(t.squared_distance(a.data(), b.data(), n),
                          scalar_table().squared_distance(a.data(), b.data(), n)));
          auto acc1 = random_vector(rng, n, scale), acc2 = acc1;
          t.accumulate(acc1.data(), a.data(), n);
          scalar_table().accumulate(acc2.data(), a.data(), n);
          for (std::size_t i = 0; i < n; ++i) CHECK(bit_equal(acc1[i], acc2[i]));
        }
      }
    }
  }

  TEST_CASE("nearest row") {
    const std::vector<double> rows{0, 0, 1, 1, 0, 0, 5, 5};
    const std::vector<double> p{0.9, 1.2};
    for (Isa isa : available_isas()) {
      const Nearest n = nearest_row(p, rows, 2, table_for(isa));
      CHECK(n.index == 1);
      CHECK(n.distance == doctest::Approx(0.05));
      // Exact tie between rows 0 and 2 goes to the lower index.
      const Nearest z = nearest_row(std::vector<double>{0, 0}, rows, 2, table_for(isa));
      CHECK(z.index == 0);
      CHECK(z.distance == 0.0);
    }
  }
}
