// SPDX-License-Identifier: Apache-2.0
//
// Strategy search: placements x0..x2, the expert partition and the
// micro-batch size, minimising predicted end-to-end latency under the VRAM
// budget. `plan` takes the argmin of each phase separately for every
// residency count and skips rows of the partition space that cannot fit;
// `brute_force_plan` evaluates every (prefill, decode) pair and serves as
// its oracle.

#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "moeplan/costmodel.hpp"
#include "moeplan/routing.hpp"

namespace moeplan {

class NoFeasiblePlan : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SpaceTooLarge : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PlanConstraints {
  double vram_slack_fraction = 0.05;
  bool forbid_cpu_attention = false;
  std::array<std::optional<Device>, 3> force_placement{};
};

struct PlanRequest {
  SystemSpec system;
  ModelConfig model;
  BatchConfig batch;
  std::optional<ActivationMap> activation_map;
  // Pins the resident expert set (and its size); otherwise every residency
  // count 0..experts_per_layer is searched.
  std::optional<ResidencyPlan> residency;
  std::vector<std::int64_t> m_candidates;  // empty: default_m_candidates(B)
  PlanConstraints constraints;
  bool reuse_migrated_in_decode = false;
  unsigned workers = 1;
  std::uint64_t brute_force_ceiling = 10'000'000;

  void validate() const;
  std::vector<std::int64_t> effective_m_candidates() const;
  CostModel cost_model() const;
};

// Powers of two up to B, plus B.
std::vector<std::int64_t> default_m_candidates(std::int64_t batch_size);

struct SearchStats {
  std::uint64_t candidates_enumerated = 0;
  std::uint64_t feasible_count = 0;
  double elapsed_s = 0.0;
};

struct Plan {
  AllocationStrategy prefill_strategy;
  AllocationStrategy decode_strategy;
  TotalLatency predicted;
  std::optional<double> tokens_per_s;  // absent when no tokens are generated
  VramBudget vram_prefill;
  VramBudget vram_decode;
  SearchStats search_stats;
};

struct StrategySet {
  std::vector<AllocationStrategy> feasible;
  std::uint64_t raw_count = 0;  // before the VRAM filter
};

// Every candidate for one phase, VRAM-filtered, ordered by
// (x0, x1, x2, m, exp_r, exp_m). Without a pinned residency each composition
// (exp_r, exp_m, exp_c) of the activated experts is a candidate with
// resident_experts = exp_r.
StrategySet enumerate_strategies(const PlanRequest& request, PhaseKind phase);

// Candidates when `resident` experts per layer are held in VRAM: exp_r may
// use fewer of them (the rest run on the CPU from host copies).
StrategySet enumerate_strategies(const PlanRequest& request, PhaseKind phase,
                                 std::int64_t resident);

// Throws NoFeasiblePlan.
Plan plan(const PlanRequest& request);

// Throws NoFeasiblePlan or SpaceTooLarge.
Plan brute_force_plan(const PlanRequest& request);

// Ordering used to break exact latency ties between strategies of one phase:
// smaller exp_m, then larger m, then lexicographic placement, then larger exp_r.
bool tie_break_less(const AllocationStrategy& a, const AllocationStrategy& b);

enum class ExpertMode { Coalesced, MicroBatched };

struct SweepRow {
  std::int64_t m = 0;
  double expert_s = 0.0;
  double nonexpert_s = 0.0;
  double total_s = 0.0;
};

struct SweepOptions {
  ExpertMode mode = ExpertMode::Coalesced;
  PhaseKind phase = PhaseKind::Prefill;
  // Partition (exp_r, exp_m, exp_c) to hold fixed; without a pinned residency
  // plan, exactly exp_r experts are resident. Defaults to every activated
  // expert resident.
  std::optional<std::array<std::int64_t, 3>> partition;
};

// Evaluates a fixed placement (forced placement, GPU for unforced ops) at each
// m candidate. Times are N-layer totals for the phase.
std::vector<SweepRow> sweep_microbatch(const PlanRequest& request, const SweepOptions& options);

}  // namespace moeplan
