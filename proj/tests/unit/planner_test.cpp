// SPDX-License-Identifier: Apache-2.0

#include <stdexcept>

#include "doctest.h"
#include "fixtures.hpp"
#include "moeplan/planner.hpp"

using namespace moeplan;
using namespace moeplan::testing;

namespace {
constexpr Device G = Device::Gpu;
constexpr Device C = Device::Cpu;

void check_same(const Plan& a, const Plan& b) {
  CHECK(a.predicted.total_s == b.predicted.total_s);
  CHECK(a.predicted.prefill_s == b.predicted.prefill_s);
  CHECK(a.predicted.decode_s == b.predicted.decode_s);
  CHECK(a.prefill_strategy == b.prefill_strategy);
  CHECK(a.decode_strategy == b.decode_strategy);
}

PlanRequest two_expert_request() {
  PlanRequest req{workstation(), make_model(2, 128, 256, 2, 2), make_batch(4, 16, 2)};
  req.m_candidates = {2};
  return req;
}

std::optional<Plan> try_plan(const PlanRequest& req) {
  try {
    return plan(req);
  } catch (const NoFeasiblePlan&) {
    return std::nullopt;
  }
}
}  // namespace

TEST_SUITE("planner") {
  TEST_CASE("default m candidates") {
    CHECK(default_m_candidates(1) == std::vector<std::int64_t>{1});
    CHECK(default_m_candidates(6) == std::vector<std::int64_t>{1, 2, 4, 6});
    CHECK(default_m_candidates(8) == std::vector<std::int64_t>{1, 2, 4, 8});
  }

  TEST_CASE("request validation") {
    PlanRequest req = two_expert_request();
    req.m_candidates = {5};
    CHECK_THROWS_AS(plan(req), std::invalid_argument);
    req.m_candidates = {0};
    CHECK_THROWS_AS(plan(req), std::invalid_argument);
    req = two_expert_request();
    req.activation_map = ActivationMap(1, 3);
    CHECK_THROWS_AS(plan(req), std::invalid_argument);
  }

  TEST_CASE("enumeration: two experts, one m candidate") {
    const PlanRequest req = two_expert_request();
    const StrategySet s = enumerate_strategies(req, PhaseKind::Prefill);
    CHECK(s.raw_count == 48);
    CHECK(s.feasible.size() == 48);
    // Lexicographic order by placement first.
    CHECK(s.feasible.front().placement == std::array<Device, 3>{C, C, C});
    CHECK(s.feasible.back().placement == std::array<Device, 3>{G, G, G});
    for (std::size_t i = 1; i < s.feasible.size(); ++i) {
      const auto& a = s.feasible[i - 1];
      const auto& b = s.feasible[i];
      CHECK(std::tie(a.placement, a.micro_batch, a.exp_r, a.exp_m) <
            std::tie(b.placement, b.micro_batch, b.exp_r, b.exp_m));
    }
  }

  TEST_CASE("enumeration: no usable VRAM") {
    PlanRequest req = two_expert_request();
    req.system = workstation(1.0);
    req.constraints.vram_slack_fraction = 0.0;
    req.m_candidates = {1, 2, 4};
    const CostModel cm = req.cost_model();
    for (PhaseKind kind : {PhaseKind::Prefill, PhaseKind::DecodeStep}) {
      const StrategySet s = enumerate_strategies(req, kind);
      CHECK(s.feasible.size() == 3);
      for (const auto& st : s.feasible) {
        CHECK(cm.vram_usage(st, kind).used() == 0.0);
        CHECK(st.placement == std::array<Device, 3>{C, C, C});
        CHECK(st.exp_r + st.exp_m == 0);
      }
    }
  }

  TEST_CASE("enumeration: forbid CPU attention") {
    PlanRequest req = two_expert_request();
    req.constraints.forbid_cpu_attention = true;
    const StrategySet s = enumerate_strategies(req, PhaseKind::DecodeStep);
    CHECK(s.raw_count == 24);
    for (const auto& st : s.feasible) CHECK(st.x(1) == G);
  }

  TEST_CASE("enumeration: pinned residency") {
    PlanRequest req = two_expert_request();
    const StrategySet s = enumerate_strategies(req, PhaseKind::Prefill, 1);
    // exp_r in {0, 1}, exp_m in {0, 1}: four partitions per placement.
    CHECK(s.raw_count == 32);
    for (const auto& st : s.feasible) CHECK(st.resident_experts == 1);
  }

  TEST_CASE("single feasible candidate is returned verbatim") {
    PlanRequest req = two_expert_request();
    req.system = workstation(1.0);
    req.constraints.vram_slack_fraction = 0.0;
    const Plan p = plan(req);
    const AllocationStrategy want = make_strategy(C, C, C, 0, 0, 0, 2, 2);
    CHECK(p.prefill_strategy == want);
    CHECK(p.decode_strategy == want);
    check_same(p, brute_force_plan(req));
  }

  TEST_CASE("no feasible plan") {
    PlanRequest req = two_expert_request();
    req.system = workstation(1.0);
    req.constraints.vram_slack_fraction = 0.0;
    req.constraints.force_placement[0] = G;
    CHECK_THROWS_AS(plan(req), NoFeasiblePlan);
    CHECK_THROWS_AS(brute_force_plan(req), NoFeasiblePlan);
  }

  TEST_CASE("space too large") {
    PlanRequest req = two_expert_request();
    req.brute_force_ceiling = 10;
    CHECK_THROWS_AS(brute_force_plan(req), SpaceTooLarge);
    CHECK_NOTHROW(plan(req));
  }

  TEST_CASE("toy instance matches the oracle") {
    // Two layers, four experts, identical devices.
    PlanRequest req{make_system(4e11, 4e13, 2e9, 4e11, 4e13, 16e9), make_model(2, 256, 512, 4, 2),
                    make_batch(8, 32, 4)};
    const Plan p = plan(req);
    check_same(p, brute_force_plan(req));
  }

  TEST_CASE("attention offload pays off under VRAM pressure") {
    const PlanRequest free_req = attention_offload_request();
    PlanRequest forced = free_req;
    forced.constraints.forbid_cpu_attention = true;
    const Plan p = plan(free_req);
    const Plan q = plan(forced);
    CHECK(p.decode_strategy.x(1) == C);
    CHECK(p.prefill_strategy.x(1) == C);
    CHECK(q.decode_strategy.resident_experts <= 1);
    CHECK(p.decode_strategy.resident_experts >= 4);
    CHECK(p.predicted.total_s <= 0.8 * q.predicted.total_s);
    // Under GPU attention the KV cache and buffers outweigh resident experts.
    const VramBudget& v = q.vram_prefill;
    CHECK(v.kv_cache_bytes + v.intermediate_bytes > v.resident_expert_bytes);
  }

  TEST_CASE("sweep: coalesced expert time is constant") {
    PlanRequest req{workstation(), make_model(4, 4096, 14336, 8, 2), make_batch(32, 4096, 4)};
    const auto rows = sweep_microbatch(req, {ExpertMode::Coalesced, PhaseKind::Prefill, {}});
    REQUIRE(rows.size() == 6);
    for (const auto& r : rows) {
      CHECK(r.expert_s == rows.front().expert_s);
      CHECK(r.total_s == r.expert_s + r.nonexpert_s);
    }
    // Every op stays compute bound, so non-expert time barely moves.
    const CostModel cm = req.cost_model();
    for (std::int64_t m : req.effective_m_candidates())
      for (int i = 0; i < 3; ++i) {
        const OpCost c = op_cost(i, cm.peak_phase(PhaseKind::Prefill), req.model,
                                 static_cast<double>(m));
        CHECK(classify_bound(c.d_x + c.d_y, c.flops, req.system.gpu()) == Bound::ComputeBound);
      }
    double lo = 1e300, hi = 0;
    for (const auto& r : rows) lo = std::min(lo, r.nonexpert_s), hi = std::max(hi, r.nonexpert_s);
    CHECK(hi / lo < 1.1);
  }

  TEST_CASE("sweep: micro-batched experts in decode") {
    PlanRequest req{workstation(), make_model(32, 4096, 14336, 8, 2), make_batch(64, 512, 4)};
    req.m_candidates = {8, 16, 32, 64};
    const auto rows = sweep_microbatch(req, {ExpertMode::MicroBatched, PhaseKind::DecodeStep, {}});
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const double r = rows[i - 1].expert_s / rows[i].expert_s;
      CHECK(r >= 1.8);
      CHECK(r <= 2.0);
    }
    const auto pinned = sweep_microbatch(
        req, {ExpertMode::Coalesced, PhaseKind::DecodeStep, std::array<std::int64_t, 3>{4, 2, 2}});
    for (const auto& r : pinned) CHECK(r.expert_s == pinned.front().expert_s);
  }

  TEST_CASE("tie break order") {
    const auto a = make_strategy(G, G, G, 2, 2, 0, 0, 4);
    auto b = a;
    b.exp_m = 1, b.exp_r = 1;
    CHECK(tie_break_less(a, b));
    b = a;
    b.micro_batch = 2;
    CHECK(tie_break_less(a, b));
    b = a;
    b.placement = {C, G, G};
    CHECK(tie_break_less(b, a));
    b = a;
    b.exp_r = 1, b.exp_c = 1;
    CHECK(tie_break_less(a, b));
    CHECK_FALSE(tie_break_less(a, a));
  }

  TEST_CASE("property: planner equals oracle on random instances") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      CAPTURE(seed);
      const PlanRequest req = random_small_request(seed);
      const auto p = try_plan(req);
      if (!p) {
        CHECK_THROWS_AS(brute_force_plan(req), NoFeasiblePlan);
        continue;
      }
      check_same(*p, brute_force_plan(req));
    }
  }

  TEST_CASE("property: plans are feasible and self-consistent") {
    for (std::uint64_t seed = 100; seed < 140; ++seed) {
      const PlanRequest req = random_small_request(seed);
      const auto p = try_plan(req);
      if (!p) continue;
      const CostModel cm = req.cost_model();
      CHECK(cm.vram_usage(p->prefill_strategy, PhaseKind::Prefill).feasible());
      CHECK(cm.vram_usage(p->decode_strategy, PhaseKind::DecodeStep).feasible());
      const TotalLatency t = cm.total_latency(p->prefill_strategy, p->decode_strategy);
      CHECK(t.total_s == p->predicted.total_s);
      CHECK(p->vram_prefill.feasible());
      CHECK(p->vram_decode.feasible());
    }
  }

  TEST_CASE("property: forced placements never beat the free plan") {
    for (std::uint64_t seed = 200; seed < 230; ++seed) {
      const PlanRequest req = random_small_request(seed);
      const auto p = try_plan(req);
      if (!p) continue;
      for (int op = 0; op < 3; ++op)
        for (Device d : {G, C}) {
          PlanRequest f = req;
          f.constraints.force_placement[static_cast<std::size_t>(op)] = d;
          if (const auto q = try_plan(f)) CHECK(q->predicted.total_s >= p->predicted.total_s);
        }
      PlanRequest f = req;
      f.constraints.forbid_cpu_attention = true;
      if (const auto q = try_plan(f)) CHECK(q->predicted.total_s >= p->predicted.total_s);
    }
  }

  TEST_CASE("property: more VRAM never hurts") {
    for (std::uint64_t seed = 300; seed < 330; ++seed) {
      PlanRequest req = random_small_request(seed);
      std::optional<double> prev;
      for (double scale : {1.0, 1.5, 2.0, 4.0}) {
        PlanRequest r = req;
        const auto& g = req.system.gpu();
        r.system = SystemSpec(DeviceSpec(g.name(), g.mem_bandwidth(), g.peak_compute(),
                                         g.mem_capacity() * scale),
                              req.system.cpu(), req.system.link());
        const auto p = try_plan(r);
        if (prev) REQUIRE(p);
        if (p) {
          if (prev) CHECK(p->predicted.total_s <= *prev);
          prev = p->predicted.total_s;
        }
      }
    }
  }

  TEST_CASE("property: deterministic across runs and worker counts") {
    for (std::uint64_t seed = 400; seed < 420; ++seed) {
      PlanRequest req = random_small_request(seed);
      const auto a = try_plan(req);
      const auto b = try_plan(req);
      req.workers = 4;
      const auto c = try_plan(req);
      REQUIRE(a.has_value() == c.has_value());
      if (!a) continue;
      check_same(*a, *b);
      check_same(*a, *c);
      CHECK(a->search_stats.candidates_enumerated == c->search_stats.candidates_enumerated);
      CHECK(a->search_stats.feasible_count == c->search_stats.feasible_count);
    }
  }
}
