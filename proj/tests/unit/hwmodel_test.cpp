// SPDX-License-Identifier: Apache-2.0

#include <limits>
#include <stdexcept>

#include "doctest.h"
#include "moeplan/hwmodel.hpp"
#include "moeplan/rng.hpp"

using namespace moeplan;

namespace {
const DeviceSpec kCpu("cpu", 300e9, 144e12, 512e9);
}

TEST_SUITE("hwmodel") {
  TEST_CASE("roofline examples") {
    CHECK(roofline_time(0, 0, kCpu) == 0.0);
    CHECK(roofline_time(300e9, 144e12, kCpu) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(roofline_time(600e9, 144e12, kCpu) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK_THROWS_AS(roofline_time(-1, 0, kCpu), std::invalid_argument);
    CHECK_THROWS_AS(roofline_time(0, -1, kCpu), std::invalid_argument);
  }

  TEST_CASE("transfer examples") {
    const LinkSpec link(32e9);
    CHECK(transfer_time(0, link) == 0.0);
    CHECK(transfer_time(32e9, link) == 1.0);
    CHECK(transfer_time(64e9, link) == 2.0);
    CHECK(transfer_time(32e9, LinkSpec(64e9, true, 0.5)) == 1.0);
  }

  TEST_CASE("classify examples") {
    CHECK(classify_bound(600e9, 144e12, kCpu) == Bound::MemoryBound);
    CHECK(classify_bound(300e9, 288e12, kCpu) == Bound::ComputeBound);
    CHECK(classify_bound(300e9, 144e12, kCpu) == Bound::Balanced);
    CHECK_THROWS_AS(classify_bound(0, 0, kCpu), std::invalid_argument);
  }

  TEST_CASE("construction rejects invalid specs") {
    CHECK_THROWS_AS(DeviceSpec("x", 0, 1, 1), std::invalid_argument);
    CHECK_THROWS_AS(DeviceSpec("x", 1, -1, 1), std::invalid_argument);
    CHECK_THROWS_AS(DeviceSpec("x", 1, 1, std::numeric_limits<double>::infinity()),
                    std::invalid_argument);
    CHECK_THROWS_AS(LinkSpec(0), std::invalid_argument);
    CHECK_THROWS_AS(LinkSpec(1, true, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(LinkSpec(1, true, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(SystemSpec(DeviceSpec("a", 1, 1, 1), DeviceSpec("a", 1, 1, 1), LinkSpec(1)),
                    std::invalid_argument);
    CHECK(kCpu.ridge_point() == doctest::Approx(480.0));
  }

  TEST_CASE("property: roofline monotone and dominates each term") {
    Rng rng(1);
    for (int i = 0; i < 2000; ++i) {
      const DeviceSpec dev("d", 1e9 + rng.uniform01() * 1e12, 1e12 + rng.uniform01() * 1e15, 1);
      const double b = rng.uniform01() * 1e12, f = rng.uniform01() * 1e15;
      const double db = rng.uniform01() * 1e11, df = rng.uniform01() * 1e14;
      const double t = roofline_time(b, f, dev);
      CHECK(roofline_time(b + db, f, dev) >= t);
      CHECK(roofline_time(b, f + df, dev) >= t);
      CHECK(t >= std::max(roofline_time(b, 0, dev), roofline_time(0, f, dev)));
    }
  }

  TEST_CASE("property: transfer linear in bytes") {
    Rng rng(2);
    for (int i = 0; i < 2000; ++i) {
      const LinkSpec link(1e9 + rng.uniform01() * 1e11, true, 0.1 + 0.9 * rng.uniform01());
      const double a = rng.uniform01() * 1e12, b = rng.uniform01() * 1e12;
      const double sum = transfer_time(a + b, link);
      CHECK(std::abs(sum - (transfer_time(a, link) + transfer_time(b, link))) <= 1e-12 * sum);
    }
  }

  TEST_CASE("property: classify agrees with the dominant roofline term") {
    Rng rng(3);
    for (int i = 0; i < 2000; ++i) {
      const double b = rng.uniform01() * 1e12, f = rng.uniform01() * 1e15;
      if (b == 0.0 && f == 0.0) continue;
      const double tm = b / kCpu.mem_bandwidth(), tc = f / kCpu.peak_compute();
      const Bound want = tm > tc ? Bound::MemoryBound
                                 : (tm < tc ? Bound::ComputeBound : Bound::Balanced);
      CHECK(classify_bound(b, f, kCpu) == want);
    }
  }
}
