// SPDX-License-Identifier: Apache-2.0

#include "moeplan/planner.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <thread>
#include <tuple>

namespace moeplan {

namespace {

// Bit 2 -> x0, bit 1 -> x1, bit 0 -> x2, so counting 0..7 walks placements in
// lexicographic order with CPU < GPU.
std::array<Device, 3> placement_from_bits(int bits) {
  auto dev = [&](int shift) { return (bits >> shift) & 1 ? Device::Gpu : Device::Cpu; };
  return {dev(2), dev(1), dev(0)};
}

bool placement_allowed(const PlanConstraints& c, const std::array<Device, 3>& p) {
  if (c.forbid_cpu_attention && p[1] == Device::Cpu) return false;
  for (std::size_t i = 0; i < 3; ++i)
    if (c.force_placement[i] && *c.force_placement[i] != p[i]) return false;
  return true;
}

// Visits the allowed (placement, m) pairs in (x0, x1, x2, m) order, passing a
// strategy with only those fields set.
template <typename Fn>
void for_each_placement_m(const PlanRequest& req, Fn&& fn) {
  const auto ms = req.effective_m_candidates();
  for (int bits = 0; bits < 8; ++bits) {
    const auto placement = placement_from_bits(bits);
    if (!placement_allowed(req.constraints, placement)) continue;
    for (std::int64_t m : ms) {
      AllocationStrategy s;
      s.placement = placement;
      s.micro_batch = m;
      fn(s);
    }
  }
}

// Visits the expert partitions of `proto` in (exp_r, exp_m) order. A negative
// `resident` selects the composition space where resident_experts = exp_r.
template <typename Fn>
void for_each_partition(const CostModel& cm, PhaseKind kind, std::int64_t resident,
                        AllocationStrategy s, Fn&& fn) {
  const std::int64_t E = cm.activated_experts(kind);
  if (resident < 0) {
    for (std::int64_t er = 0; er <= E; ++er) {
      for (std::int64_t em = 0; em <= E - er; ++em) {
        s.resident_experts = er;
        s.exp_r = er;
        s.exp_m = em;
        s.exp_c = E - er - em;
        fn(s);
      }
    }
    return;
  }
  const std::int64_t r_avail = std::min(resident, E);
  for (std::int64_t er = 0; er <= r_avail; ++er) {
    for (std::int64_t em = 0; em <= E - r_avail; ++em) {
      s.resident_experts = resident;
      s.exp_r = er;
      s.exp_m = em;
      s.exp_c = E - er - em;
      fn(s);
    }
  }
}

StrategySet enumerate_impl(const PlanRequest& req, const CostModel& cm, PhaseKind kind,
                           std::int64_t resident) {
  StrategySet out;
  for_each_placement_m(req, [&](const AllocationStrategy& proto) {
    for_each_partition(cm, kind, resident, proto, [&](const AllocationStrategy& s) {
      ++out.raw_count;
      if (cm.vram_usage(s, kind).feasible()) out.feasible.push_back(s);
    });
  });
  return out;
}

std::vector<std::int64_t> residency_range(const PlanRequest& req) {
  if (req.residency) return {req.residency->capacity_per_layer};
  std::vector<std::int64_t> r(static_cast<std::size_t>(req.model.experts_per_layer + 1));
  std::iota(r.begin(), r.end(), 0);
  return r;
}

struct Best {
  AllocationStrategy strategy;
  double cost = 0.0;
};

bool better(double cost, const AllocationStrategy& s, const std::optional<Best>& best) {
  if (!best) return true;
  if (cost != best->cost) return cost < best->cost;
  return tie_break_less(s, best->strategy);
}

struct ResidencyResult {
  bool feasible = false;
  AllocationStrategy prefill, decode;
  double prefill_s = 0.0, decode_s = 0.0, total_s = 0.0;
  std::uint64_t raw = 0, feasible_count = 0;
};

// Exhaustive per-phase argmin at one residency count. The non-expert part of
// the cost is shared by the partitions of a (placement, m) pair that leave
// the layer output on the same device.
ResidencyResult best_for_residency(const PlanRequest& req, const CostModel& cm,
                                   std::int64_t resident) {
  ResidencyResult r;
  std::optional<Best> best[2];
  const PhaseKind kinds[2] = {PhaseKind::Prefill, PhaseKind::DecodeStep};
  for (int k = 0; k < 2; ++k) {
    const PhaseKind kind = kinds[k];
    for_each_placement_m(req, [&](const AllocationStrategy& proto) {
      // Indexed by the expert home, which the QKV load depends on.
      std::optional<std::vector<double>> non_expert[2];
      // With exp_r fixed and exp_m >= 1, VRAM use only grows with exp_m, so
      // the rest of an (exp_r) row is infeasible once one entry is.
      std::int64_t dead_row = -1;
      for_each_partition(cm, kind, resident, proto, [&](const AllocationStrategy& s) {
        ++r.raw;
        if (s.exp_r == dead_row) return;
        if (!cm.vram_usage(s, kind).feasible()) {
          if (s.exp_m >= 1) dead_row = s.exp_r;
          return;
        }
        ++r.feasible_count;
        auto& steps = non_expert[s.gpu_runs_experts() ? 1 : 0];
        if (!steps) steps = cm.non_expert_steps(s, kind);
        const double cost = cm.phase_latency(s, kind, *steps);
        if (better(cost, s, best[k])) best[k] = Best{s, cost};
      });
    });
  }
  if (!best[0] || !best[1]) return r;
  r.feasible = true;
  r.prefill = best[0]->strategy;
  r.decode = best[1]->strategy;
  r.prefill_s = best[0]->cost;
  r.decode_s = best[1]->cost;
  r.total_s = r.prefill_s + r.decode_s;
  return r;
}

Plan assemble(const PlanRequest& req, const CostModel& cm, const AllocationStrategy& pre,
              const AllocationStrategy& dec, SearchStats stats) {
  Plan p;
  p.prefill_strategy = pre;
  p.decode_strategy = dec;
  p.predicted = cm.total_latency(pre, dec);
  if (req.batch.output_len > 0 && p.predicted.total_s > 0.0)
    p.tokens_per_s = throughput(p.predicted, req.batch);
  p.vram_prefill = cm.vram_usage(pre, PhaseKind::Prefill);
  p.vram_decode = cm.vram_usage(dec, PhaseKind::DecodeStep);
  p.search_stats = stats;
  return p;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void PlanRequest::validate() const {
  model.validate();
  batch.validate();
  for (std::int64_t m : m_candidates)
    if (m < 1 || m > batch.batch_size)
      throw std::invalid_argument("m candidate " + std::to_string(m) +
                                  " outside [1, batch_size]");
  if (!(constraints.vram_slack_fraction >= 0.0 && constraints.vram_slack_fraction < 1.0))
    throw std::invalid_argument("vram_slack_fraction must be in [0, 1)");
  if (activation_map) {
    if (activation_map->num_layers() < 1 ||
        activation_map->experts_per_layer() != model.experts_per_layer)
      throw std::invalid_argument("activation map does not match experts_per_layer");
  }
  if (residency) residency->validate(model.experts_per_layer);
  if (residency && !activation_map)
    throw std::invalid_argument("a pinned residency plan needs an activation map");
}

std::vector<std::int64_t> PlanRequest::effective_m_candidates() const {
  auto ms = m_candidates.empty() ? default_m_candidates(batch.batch_size) : m_candidates;
  std::sort(ms.begin(), ms.end());
  ms.erase(std::unique(ms.begin(), ms.end()), ms.end());
  return ms;
}

CostModel PlanRequest::cost_model() const {
  ExpertProfile profile;
  if (activation_map)
    profile = residency ? ExpertProfile(*activation_map, *residency)
                        : ExpertProfile(*activation_map);
  CostOptions opts;
  opts.workspace_fraction = constraints.vram_slack_fraction;
  opts.reuse_migrated_in_decode = reuse_migrated_in_decode;
  return CostModel(system, model, batch, std::move(profile), opts);
}

std::vector<std::int64_t> default_m_candidates(std::int64_t batch_size) {
  std::vector<std::int64_t> ms;
  for (std::int64_t m = 1; m <= batch_size; m *= 2) ms.push_back(m);
  if (ms.back() != batch_size) ms.push_back(batch_size);
  return ms;
}

bool tie_break_less(const AllocationStrategy& a, const AllocationStrategy& b) {
  if (a.exp_m != b.exp_m) return a.exp_m < b.exp_m;
  if (a.micro_batch != b.micro_batch) return a.micro_batch > b.micro_batch;
  if (a.placement != b.placement) return a.placement < b.placement;
  if (a.exp_r != b.exp_r) return a.exp_r > b.exp_r;
  return a.resident_experts < b.resident_experts;
}

StrategySet enumerate_strategies(const PlanRequest& request, PhaseKind phase) {
  request.validate();
  const CostModel cm = request.cost_model();
  const std::int64_t resident = request.residency ? request.residency->capacity_per_layer : -1;
  return enumerate_impl(request, cm, phase, resident);
}

StrategySet enumerate_strategies(const PlanRequest& request, PhaseKind phase,
                                 std::int64_t resident) {
  request.validate();
  if (resident < 0 || resident > request.model.experts_per_layer)
    throw std::invalid_argument("resident count out of range");
  const CostModel cm = request.cost_model();
  return enumerate_impl(request, cm, phase, resident);
}

Plan plan(const PlanRequest& request) {
  const auto t0 = std::chrono::steady_clock::now();
  request.validate();
  const CostModel cm = request.cost_model();
  const auto residents = residency_range(request);

  std::vector<ResidencyResult> results(residents.size());
  const unsigned workers =
      std::max(1u, std::min<unsigned>(request.workers, static_cast<unsigned>(residents.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < residents.size(); ++i)
      results[i] = best_for_residency(request, cm, residents[i]);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < residents.size(); i += workers)
          results[i] = best_for_residency(request, cm, residents[i]);
      });
    }
  }

  SearchStats stats;
  const ResidencyResult* best = nullptr;
  for (const auto& r : results) {
    stats.candidates_enumerated += r.raw;
    stats.feasible_count += r.feasible_count;
    if (r.feasible && (!best || r.total_s < best->total_s)) best = &r;
  }
  if (!best) throw NoFeasiblePlan("no allocation strategy fits the VRAM budget");
  stats.elapsed_s = seconds_since(t0);
  return assemble(request, cm, best->prefill, best->decode, stats);
}

Plan brute_force_plan(const PlanRequest& request) {
  const auto t0 = std::chrono::steady_clock::now();
  request.validate();
  const CostModel cm = request.cost_model();
  const auto residents = residency_range(request);

  std::vector<std::pair<StrategySet, StrategySet>> spaces;
  std::uint64_t pairs = 0;
  SearchStats stats;
  for (std::int64_t r : residents) {
    spaces.emplace_back(enumerate_impl(request, cm, PhaseKind::Prefill, r),
                        enumerate_impl(request, cm, PhaseKind::DecodeStep, r));
    const auto& [pre, dec] = spaces.back();
    pairs += pre.raw_count * dec.raw_count;
    stats.candidates_enumerated += pre.raw_count + dec.raw_count;
    stats.feasible_count += pre.feasible.size() + dec.feasible.size();
    if (pairs > request.brute_force_ceiling)
      throw SpaceTooLarge("search space exceeds " +
                          std::to_string(request.brute_force_ceiling) + " candidate pairs");
  }

  struct Best {
    double total, pre_s, dec_s;
    std::int64_t resident;
    const AllocationStrategy* pre;
    const AllocationStrategy* dec;
  };
  auto less = [](const Best& a, const Best& b) {
    if (a.total != b.total) return a.total < b.total;
    if (a.resident != b.resident) return a.resident < b.resident;
    if (a.pre_s != b.pre_s) return a.pre_s < b.pre_s;
    if (*a.pre != *b.pre) return tie_break_less(*a.pre, *b.pre);
    if (a.dec_s != b.dec_s) return a.dec_s < b.dec_s;
    return tie_break_less(*a.dec, *b.dec);
  };

  std::optional<Best> best;
  for (std::size_t i = 0; i < residents.size(); ++i) {
    const auto& [pre, dec] = spaces[i];
    std::vector<double> pre_cost, dec_cost;
    for (const auto& s : pre.feasible) pre_cost.push_back(cm.phase_latency(s, PhaseKind::Prefill));
    for (const auto& s : dec.feasible)
      dec_cost.push_back(cm.phase_latency(s, PhaseKind::DecodeStep));
    for (std::size_t a = 0; a < pre.feasible.size(); ++a) {
      for (std::size_t b = 0; b < dec.feasible.size(); ++b) {
        const Best cand{pre_cost[a] + dec_cost[b], pre_cost[a], dec_cost[b], residents[i],
                        &pre.feasible[a], &dec.feasible[b]};
        if (!best || less(cand, *best)) best = cand;
      }
    }
  }
  if (!best) throw NoFeasiblePlan("no allocation strategy fits the VRAM budget");
  stats.elapsed_s = seconds_since(t0);
  return assemble(request, cm, *best->pre, *best->dec, stats);
}

std::vector<SweepRow> sweep_microbatch(const PlanRequest& request, const SweepOptions& options) {
  request.validate();
  const CostModel cm = request.cost_model();
  const PhaseKind kind = options.phase;
  const std::int64_t E = cm.activated_experts(kind);

  AllocationStrategy base;
  for (std::size_t i = 0; i < 3; ++i)
    base.placement[i] = request.constraints.force_placement[i].value_or(Device::Gpu);
  base.coalesced_experts = options.mode == ExpertMode::Coalesced;
  base.resident_experts = request.residency ? request.residency->capacity_per_layer
                                            : request.model.experts_per_layer;
  if (options.partition) {
    base.exp_r = (*options.partition)[0];
    base.exp_m = (*options.partition)[1];
    base.exp_c = (*options.partition)[2];
    if (!request.residency) base.resident_experts = base.exp_r;
  } else {
    base.exp_r = std::min(base.resident_experts, E);
    base.exp_c = E - base.exp_r;
  }

  const double N = static_cast<double>(request.model.num_layers);
  std::vector<SweepRow> rows;
  for (std::int64_t m : request.effective_m_candidates()) {
    AllocationStrategy s = base;
    s.micro_batch = m;
    SweepRow row{m, 0.0, 0.0, 0.0};
    auto add = [&](const LayerCost& lc) {
      row.expert_s += N * lc.expert();
      row.nonexpert_s += N * lc.non_expert();
    };
    if (kind == PhaseKind::Prefill) {
      add(cm.layer_latency(s, cm.peak_phase(kind)));
    } else {
      for (std::int64_t t = 1; t <= request.batch.output_len; ++t)
        add(cm.layer_latency(s, cm.decode_phase(t),
                             !(request.reuse_migrated_in_decode && t > 1)));
    }
    row.total_s = row.expert_s + row.nonexpert_s;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace moeplan
