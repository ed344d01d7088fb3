// SPDX-License-Identifier: Apache-2.0
//
// Analytical per-layer latency of an allocation strategy, its VRAM budget, and
// end-to-end latency across prefill and every decode step.
//
// A layer is modelled sequentially: for each op the load (PCIe activation
// transfer when the executing device changes), compute (roofline on the
// executing device, repeated per micro-batch) and store (KV cache shipped to
// host when attention runs on the CPU but QKV on the GPU) are summed. The
// expert stage always runs on the coalesced batch B and splits its experts
// into GPU-resident (exp_r), migrated over PCIe (exp_m) and CPU-computed
// (exp_c) groups that execute concurrently on the two devices.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "moeplan/hwmodel.hpp"
#include "moeplan/routing.hpp"
#include "moeplan/workload.hpp"

namespace moeplan {

struct AllocationStrategy {
  std::array<Device, 3> placement{Device::Gpu, Device::Gpu, Device::Gpu};  // x0, x1, x2
  std::int64_t resident_experts = 0;  // experts per layer held in VRAM
  std::int64_t exp_r = 0;             // resident experts computed on the GPU
  std::int64_t exp_m = 0;             // experts fetched over PCIe each pass
  std::int64_t exp_c = 0;             // experts computed on the CPU
  std::int64_t micro_batch = 1;       // m for ops 0..2
  // Expert stage on the whole batch. false replays micro-batched expert
  // execution and exists for sensitivity studies only.
  bool coalesced_experts = true;

  Device x(int i) const { return placement[static_cast<std::size_t>(i)]; }
  std::int64_t num_micro_batches(std::int64_t batch_size) const {
    return (batch_size + micro_batch - 1) / micro_batch;
  }
  bool gpu_runs_experts() const { return exp_r + exp_m > 0; }
  // Device that holds the layer output after the expert stage.
  Device expert_home() const { return gpu_runs_experts() ? Device::Gpu : Device::Cpu; }
  bool any_op_on(Device d) const {
    return placement[0] == d || placement[1] == d || placement[2] == d;
  }

  friend bool operator==(const AllocationStrategy&, const AllocationStrategy&) = default;
};

struct OpTiming {
  double t_load = 0.0;
  double t_comp = 0.0;
  double t_store = 0.0;
  double sum() const { return t_load + t_comp + t_store; }
};

struct LayerCost {
  std::array<OpTiming, 4> ops{};
  double total = 0.0;
  double non_expert() const { return ops[0].sum() + ops[1].sum() + ops[2].sum(); }
  double expert() const { return ops[3].sum(); }
};

struct VramBudget {
  double resident_expert_bytes = 0.0;
  double non_moe_weight_bytes = 0.0;
  double intermediate_bytes = 0.0;
  double kv_cache_bytes = 0.0;
  double workspace_bytes = 0.0;
  double capacity = 0.0;

  double used() const {
    return resident_expert_bytes + non_moe_weight_bytes + intermediate_bytes + kv_cache_bytes +
           workspace_bytes;
  }
  bool feasible() const { return used() <= capacity; }
};

// Token fractions routed to each expert group.
struct GroupShares {
  double resident = 0.0;
  double migrated = 0.0;
  double cpu = 0.0;
  double gpu() const { return resident + migrated; }
};

// How tokens spread over the expert groups. Default-constructed profiles use
// the uniform split (each activated expert gets 1/E of the tokens). With an
// activation map, experts are ranked hottest first; the resident group is the
// hottest `resident` experts (or a pinned residency plan), migrated experts
// are the hottest non-resident ones and everything else runs on the CPU.
// Shares are summed over layers, so per-layer skew is folded into one
// homogeneous-layer estimate.
class ExpertProfile {
 public:
  ExpertProfile() = default;
  explicit ExpertProfile(const ActivationMap& map);
  ExpertProfile(const ActivationMap& map, const ResidencyPlan& pinned);

  bool uniform() const { return non_resident_.empty(); }
  const std::optional<std::int64_t>& pinned_capacity() const { return pinned_capacity_; }

  GroupShares shares(std::int64_t resident, std::int64_t activated, std::int64_t exp_r,
                     std::int64_t exp_m) const;

 private:
  // Per-layer prefix sums of the ranked counts, added up over layers.
  std::vector<double> resident_;      // pinned profiles only
  std::vector<double> non_resident_;  // all experts when unpinned
  std::optional<std::int64_t> pinned_capacity_;
};

struct CostOptions {
  double workspace_fraction = 0.05;        // kernel scratch, fraction of VRAM
  bool reuse_migrated_in_decode = false;   // keep EXP_M weights across decode steps
};

struct ExpertStageTime {
  double t_load = 0.0;         // activation cross-over + migration
  double t_comp = 0.0;         // max(latency_gpu, latency_cpu)
  double t_handoff = 0.0;      // CPU expert outputs back to the GPU
  double activation_s = 0.0;   // cross-device expert input transfer
  double migration_s = 0.0;    // EXP_M weight fetch
  double latency_gpu = 0.0;
  double latency_cpu = 0.0;
  Device activation_dest = Device::Cpu;  // where the crossing activations go
  GroupShares shares;
};

struct TotalLatency {
  double prefill_s = 0.0;
  double decode_s = 0.0;
  double total_s = 0.0;
};

class CostModel {
 public:
  CostModel(SystemSpec system, ModelConfig model, BatchConfig batch, ExpertProfile profile = {},
            CostOptions options = {});

  const SystemSpec& system() const { return system_; }
  const ModelConfig& model() const { return model_; }
  const BatchConfig& batch() const { return batch_; }
  const ExpertProfile& profile() const { return profile_; }
  const CostOptions& options() const { return options_; }

  // Distinct experts touched in one layer: min(experts, tokens * top_k).
  std::int64_t activated_experts(const Phase& phase) const;
  std::int64_t activated_experts(PhaseKind kind) const;

  // Throws std::invalid_argument when the partition does not cover the
  // activated experts or exceeds what residency allows.
  void check_strategy(const AllocationStrategy& s, const Phase& phase) const;

  double op_load_time(int i, const AllocationStrategy& s, const Phase& phase) const;
  double op_compute_time(int i, const AllocationStrategy& s, const Phase& phase) const;
  // i = 1: KV store; i = 3: expert output hand-off; otherwise 0.
  double op_store_time(int i, const AllocationStrategy& s, const Phase& phase) const;

  ExpertStageTime expert_stage_time(const AllocationStrategy& s, const Phase& phase,
                                    bool charge_migration = true) const;

  LayerCost layer_latency(const AllocationStrategy& s, const Phase& phase,
                          bool charge_migration = true) const;

  // N * per-layer latency summed over the phase (all decode steps for decode).
  double phase_latency(const AllocationStrategy& s, PhaseKind kind) const;

  // Per-layer time of the three non-expert ops at each step of the phase (one
  // entry for prefill). Depends on the placement, m and expert_home() only, so
  // a search can share it across expert partitions.
  std::vector<double> non_expert_steps(const AllocationStrategy& s, PhaseKind kind) const;
  // Same value as phase_latency(s, kind), given non_expert_steps(s, kind).
  double phase_latency(const AllocationStrategy& s, PhaseKind kind,
                       std::span<const double> non_expert) const;

  TotalLatency total_latency(const AllocationStrategy& prefill,
                             const AllocationStrategy& decode) const;

  // Peak VRAM of the phase (decode uses the final KV length).
  VramBudget vram_usage(const AllocationStrategy& s, PhaseKind kind) const;

  Phase peak_phase(PhaseKind kind) const;
  Phase decode_phase(std::int64_t step) const;  // step is 1-based

 private:
  SystemSpec system_;
  ModelConfig model_;
  BatchConfig batch_;
  ExpertProfile profile_;
  CostOptions options_;
};

// Generated tokens per second: B * L_out / total_s.
// Throws std::invalid_argument when total_s <= 0 or L_out == 0.
double throughput(const TotalLatency& latency, const BatchConfig& batch);

}  // namespace moeplan
