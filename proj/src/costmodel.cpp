// SPDX-License-Identifier: Apache-2.0

#include "moeplan/costmodel.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>

namespace moeplan {

namespace {

std::vector<double> prefix_sums(const std::vector<double>& v) {
  std::vector<double> p(v.size() + 1, 0.0);
  std::partial_sum(v.begin(), v.end(), p.begin() + 1);
  return p;
}

std::vector<double> sorted_desc(std::vector<double> v) {
  std::sort(v.begin(), v.end(), std::greater<>());
  return v;
}

void accumulate_into(std::vector<double>& total, const std::vector<double>& layer) {
  if (total.empty()) total.assign(layer.size(), 0.0);
  for (std::size_t i = 0; i < layer.size(); ++i) total[i] += layer[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// ExpertProfile
// ---------------------------------------------------------------------------

ExpertProfile::ExpertProfile(const ActivationMap& map) {
  for (std::int64_t l = 0; l < map.num_layers(); ++l)
    accumulate_into(non_resident_, prefix_sums(sorted_desc(map.layer(l))));
}

ExpertProfile::ExpertProfile(const ActivationMap& map, const ResidencyPlan& pinned)
    : pinned_capacity_(pinned.capacity_per_layer) {
  pinned.validate(map.experts_per_layer());
  if (pinned.num_layers() != map.num_layers())
    throw std::invalid_argument("residency plan and activation map disagree on layer count");
  for (std::int64_t l = 0; l < map.num_layers(); ++l) {
    std::vector<double> res, non;
    const auto& counts = map.layer(l);
    for (std::size_t e = 0; e < counts.size(); ++e)
      (pinned.contains(l, static_cast<std::int32_t>(e)) ? res : non).push_back(counts[e]);
    // Layers holding fewer experts than the capacity keep the free slots empty.
    res.resize(static_cast<std::size_t>(pinned.capacity_per_layer), 0.0);
    accumulate_into(resident_, prefix_sums(sorted_desc(res)));
    accumulate_into(non_resident_, prefix_sums(sorted_desc(non)));
  }
}

GroupShares ExpertProfile::shares(std::int64_t resident, std::int64_t activated,
                                  std::int64_t exp_r, std::int64_t exp_m) const {
  const std::int64_t r_avail = std::min(resident, activated);
  const std::int64_t nonres_active = activated - r_avail;
  if (uniform()) {
    const double E = static_cast<double>(activated);
    const std::int64_t exp_c = activated - exp_r - exp_m;
    return {static_cast<double>(exp_r) / E, static_cast<double>(exp_m) / E,
            static_cast<double>(exp_c) / E};
  }

  // Unpinned profiles rank every expert in one list; residents are its head.
  const bool pinned = pinned_capacity_.has_value();
  const auto& res = pinned ? resident_ : non_resident_;
  const auto& non = non_resident_;
  const std::size_t non_base = pinned ? 0 : static_cast<std::size_t>(resident);
  auto at = [](const std::vector<double>& p, std::size_t i) {
    return p[std::min(i, p.size() - 1)];
  };
  const auto er = static_cast<std::size_t>(exp_r);
  const auto em = static_cast<std::size_t>(exp_m);
  const double gpu = at(res, er);
  const double mig = at(non, non_base + em) - at(non, non_base);
  const double cpu = (at(res, static_cast<std::size_t>(r_avail)) - at(res, er)) +
                     (at(non, non_base + static_cast<std::size_t>(nonres_active)) -
                      at(non, non_base + em));
  const double total = gpu + mig + cpu;
  if (!(total > 0.0)) return ExpertProfile{}.shares(resident, activated, exp_r, exp_m);
  return {gpu / total, mig / total, cpu / total};
}

// ---------------------------------------------------------------------------
// CostModel
// ---------------------------------------------------------------------------

CostModel::CostModel(SystemSpec system, ModelConfig model, BatchConfig batch,
                     ExpertProfile profile, CostOptions options)
    : system_(std::move(system)),
      model_(model),
      batch_(batch),
      profile_(std::move(profile)),
      options_(options) {
  model_.validate();
  batch_.validate();
  if (!(options_.workspace_fraction >= 0.0 && options_.workspace_fraction < 1.0))
    throw std::invalid_argument("workspace fraction must be in [0, 1)");
}

std::int64_t CostModel::activated_experts(const Phase& phase) const {
  const std::int64_t tokens = batch_.batch_size * phase.seq_len;
  // tokens * top_k can only exceed the pool size; avoid overflow on huge batches.
  if (tokens >= model_.experts_per_layer) return model_.experts_per_layer;
  return std::min(model_.experts_per_layer, tokens * model_.top_k);
}

std::int64_t CostModel::activated_experts(PhaseKind kind) const {
  return activated_experts(kind == PhaseKind::Prefill ? Phase::prefill(batch_.input_len)
                                                      : Phase::decode_step(batch_.input_len));
}

Phase CostModel::peak_phase(PhaseKind kind) const {
  if (kind == PhaseKind::Prefill) return Phase::prefill(batch_.input_len);
  return Phase::decode_step(std::max<std::int64_t>(1, batch_.input_len + batch_.output_len - 1));
}

Phase CostModel::decode_phase(std::int64_t step) const {
  return Phase::decode_step(batch_.input_len + step - 1);
}

void CostModel::check_strategy(const AllocationStrategy& s, const Phase& phase) const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("allocation strategy: " + msg);
  };
  if (s.micro_batch < 1 || s.micro_batch > batch_.batch_size)
    fail("micro_batch must be in [1, batch_size]");
  if (s.exp_r < 0 || s.exp_m < 0 || s.exp_c < 0) fail("expert counts must be >= 0");
  if (s.resident_experts < 0 || s.resident_experts > model_.experts_per_layer)
    fail("resident_experts out of range");
  const std::int64_t E = activated_experts(phase);
  if (s.exp_r + s.exp_m + s.exp_c != E)
    fail("exp_r + exp_m + exp_c = " + std::to_string(s.exp_r + s.exp_m + s.exp_c) +
         " but " + std::to_string(E) + " experts are activated");
  const std::int64_t r_avail = std::min(s.resident_experts, E);
  if (s.exp_r > r_avail) fail("exp_r exceeds the resident experts");
  if (s.exp_m > E - r_avail) fail("exp_m exceeds the non-resident activated experts");
  if (profile_.pinned_capacity() && *profile_.pinned_capacity() != s.resident_experts)
    fail("resident_experts disagrees with the pinned residency plan");
}

double CostModel::op_load_time(int i, const AllocationStrategy& s, const Phase& phase) const {
  if (i < 0 || i > 2) throw std::invalid_argument("op_load_time: op must be in 0..2");
  const Device prev = i == 0 ? s.expert_home() : s.x(i - 1);
  if (s.x(i) == prev) return 0.0;
  const double M = static_cast<double>(s.num_micro_batches(batch_.batch_size));
  const OpCost c = op_cost(i, phase, model_, static_cast<double>(s.micro_batch));
  return M * c.d_x / system_.link().effective_bandwidth();
}

double CostModel::op_compute_time(int i, const AllocationStrategy& s, const Phase& phase) const {
  if (i < 0 || i > 2) throw std::invalid_argument("op_compute_time: op must be in 0..2");
  const double M = static_cast<double>(s.num_micro_batches(batch_.batch_size));
  const OpCost c = op_cost(i, phase, model_, static_cast<double>(s.micro_batch));
  return M * roofline_time(c.d_x + c.d_y, c.flops, system_.device(s.x(i)));
}

double CostModel::op_store_time(int i, const AllocationStrategy& s, const Phase& phase) const {
  if (i < 0 || i > 3) throw std::invalid_argument("op_store_time: op must be in 0..3");
  if (i == 3) return expert_stage_time(s, phase).t_handoff;
  if (i != 1 || s.x(0) != Device::Gpu || s.x(1) != Device::Cpu) return 0.0;
  const double M = static_cast<double>(s.num_micro_batches(batch_.batch_size));
  return M * kv_store_bytes(model_, static_cast<double>(s.micro_batch), phase.seq_len) /
         system_.link().effective_bandwidth();
}

ExpertStageTime CostModel::expert_stage_time(const AllocationStrategy& s, const Phase& phase,
                                             bool charge_migration) const {
  check_strategy(s, phase);
  const std::int64_t E = activated_experts(phase);
  ExpertStageTime out;
  out.shares = profile_.shares(s.resident_experts, E, s.exp_r, s.exp_m);

  const double dt = static_cast<double>(model_.dtype_bytes);
  const double L = static_cast<double>(phase.seq_len);
  const double dh = static_cast<double>(model_.hidden_dim);
  const double de = static_cast<double>(model_.expert_dim);
  const double B = static_cast<double>(batch_.batch_size);
  const double w = weight_bytes(model_).per_expert;
  const double bw_link = system_.link().effective_bandwidth();

  const double dx_total = dt * B * L * dh;
  const double gpu_share = out.shares.gpu();
  const double cpu_share = out.shares.cpu;
  const double gpu_weights = static_cast<double>(s.exp_r + s.exp_m) * w;
  const double cpu_weights = static_cast<double>(s.exp_c) * w;

  auto device_latency = [&](const DeviceSpec& dev, double share, double weights) {
    if (s.coalesced_experts) {
      const double c_total = 6.0 * B * L * dh * de;
      return std::max((share * dx_total + weights) / dev.mem_bandwidth(),
                      share * c_total / dev.peak_compute());
    }
    // Every micro-batch streams the expert weights again.
    const double m = static_cast<double>(s.micro_batch);
    const double M = static_cast<double>(s.num_micro_batches(batch_.batch_size));
    const double dx_mb = dt * m * L * dh;
    const double c_mb = 6.0 * m * L * dh * de;
    return M * std::max((share * dx_mb + weights) / dev.mem_bandwidth(),
                        share * c_mb / dev.peak_compute());
  };
  out.latency_gpu = device_latency(system_.gpu(), gpu_share, gpu_weights);
  out.latency_cpu = device_latency(system_.cpu(), cpu_share, cpu_weights);
  out.t_comp = std::max(out.latency_gpu, out.latency_cpu);

  // Expert inputs leave the device that ran the output projection only for the
  // experts that execute on the other device.
  const bool x2_gpu = s.x(2) == Device::Gpu;
  const double cross_bytes = (x2_gpu ? cpu_share : gpu_share) * dx_total;
  out.activation_dest = x2_gpu ? Device::Cpu : Device::Gpu;
  const double migrate_bytes = charge_migration ? static_cast<double>(s.exp_m) * w : 0.0;
  out.activation_s = cross_bytes / bw_link;
  out.migration_s = migrate_bytes / bw_link;
  out.t_load = (cross_bytes + migrate_bytes) / bw_link;

  if (s.exp_c > 0 && s.gpu_runs_experts() && s.x(0) == Device::Gpu)
    out.t_handoff = cpu_share * dx_total / bw_link;
  return out;
}

LayerCost CostModel::layer_latency(const AllocationStrategy& s, const Phase& phase,
                                   bool charge_migration) const {
  check_strategy(s, phase);
  LayerCost lc;
  for (int i = 0; i < 3; ++i) {
    auto& op = lc.ops[static_cast<std::size_t>(i)];
    op.t_load = op_load_time(i, s, phase);
    op.t_comp = op_compute_time(i, s, phase);
    op.t_store = op_store_time(i, s, phase);
  }
  const ExpertStageTime ex = expert_stage_time(s, phase, charge_migration);
  lc.ops[3] = {ex.t_load, ex.t_comp, ex.t_handoff};
  for (const auto& op : lc.ops) lc.total += op.t_load + op.t_comp + op.t_store;
  return lc;
}

std::vector<double> CostModel::non_expert_steps(const AllocationStrategy& s,
                                                PhaseKind kind) const {
  // Summed in the same order as layer_latency so totals match it bit for bit.
  auto op_sum = [&](int i, const Phase& phase) {
    return op_load_time(i, s, phase) + op_compute_time(i, s, phase) + op_store_time(i, s, phase);
  };
  if (kind == PhaseKind::Prefill) {
    const Phase phase = peak_phase(kind);
    double total = 0.0;
    for (int i = 0; i < 3; ++i) total += op_sum(i, phase);
    return {total};
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(batch_.output_len));
  if (batch_.output_len == 0) return out;
  // Only attention reads the KV length.
  const Phase first = decode_phase(1);
  const double qkv = op_sum(0, first);
  const double proj = op_sum(2, first);
  for (std::int64_t t = 1; t <= batch_.output_len; ++t) {
    double total = 0.0;
    total += qkv;
    total += op_sum(1, decode_phase(t));
    total += proj;
    out.push_back(total);
  }
  return out;
}

double CostModel::phase_latency(const AllocationStrategy& s, PhaseKind kind,
                                std::span<const double> non_expert) const {
  const double N = static_cast<double>(model_.num_layers);
  auto expert = [&](const Phase& phase, bool charge) {
    const ExpertStageTime ex = expert_stage_time(s, phase, charge);
    return ex.t_load + ex.t_comp + ex.t_handoff;
  };
  if (kind == PhaseKind::Prefill) {
    if (non_expert.size() != 1)
      throw std::invalid_argument("phase_latency: prefill needs one non-expert entry");
    return N * (non_expert[0] + expert(peak_phase(kind), true));
  }
  if (non_expert.size() != static_cast<std::size_t>(batch_.output_len))
    throw std::invalid_argument("phase_latency: need one non-expert entry per decode step");
  if (batch_.output_len == 0) return 0.0;
  const Phase step = decode_phase(1);
  const double charged = expert(step, true);
  const double reused =
      options_.reuse_migrated_in_decode && batch_.output_len > 1 ? expert(step, false) : charged;
  double sum = 0.0;
  for (std::int64_t t = 1; t <= batch_.output_len; ++t)
    sum += N * (non_expert[static_cast<std::size_t>(t - 1)] + (t > 1 ? reused : charged));
  return sum;
}

double CostModel::phase_latency(const AllocationStrategy& s, PhaseKind kind) const {
  return phase_latency(s, kind, non_expert_steps(s, kind));
}

TotalLatency CostModel::total_latency(const AllocationStrategy& prefill,
                                      const AllocationStrategy& decode) const {
  TotalLatency t;
  t.prefill_s = phase_latency(prefill, PhaseKind::Prefill);
  t.decode_s = phase_latency(decode, PhaseKind::DecodeStep);
  t.total_s = t.prefill_s + t.decode_s;
  return t;
}

VramBudget CostModel::vram_usage(const AllocationStrategy& s, PhaseKind kind) const {
  const Phase phase = peak_phase(kind);
  const double N = static_cast<double>(model_.num_layers);
  const double dt = static_cast<double>(model_.dtype_bytes);
  const double dh = static_cast<double>(model_.hidden_dim);
  const double B = static_cast<double>(batch_.batch_size);
  const WeightBytes wb = weight_bytes(model_);

  VramBudget v;
  v.capacity = system_.gpu().mem_capacity();
  v.workspace_bytes = options_.workspace_fraction * v.capacity;
  v.resident_expert_bytes = static_cast<double>(s.resident_experts) * wb.per_expert * N;
  if (s.x(0) == Device::Gpu) v.non_moe_weight_bytes += 3.0 * dt * dh * dh * N;
  if (s.x(2) == Device::Gpu) v.non_moe_weight_bytes += dt * dh * dh * N;

  const std::array<bool, 3> on_gpu{s.x(0) == Device::Gpu, s.x(1) == Device::Gpu,
                                   s.x(2) == Device::Gpu};
  if (s.any_op_on(Device::Gpu))
    v.intermediate_bytes = intermediate_bytes(model_, batch_, phase, s.micro_batch, on_gpu);
  if (s.gpu_runs_experts()) {
    // Coalesced expert input and output for the whole batch.
    v.intermediate_bytes += 2.0 * dt * B * static_cast<double>(phase.seq_len) * dh;
  }
  if (s.exp_m > 0) {
    const bool cached = kind == PhaseKind::DecodeStep && options_.reuse_migrated_in_decode;
    v.intermediate_bytes += static_cast<double>(s.exp_m) * wb.per_expert * (cached ? N : 1.0);
  }
  if (s.x(1) == Device::Gpu) {
    const std::int64_t kv_tokens =
        batch_.input_len + (kind == PhaseKind::DecodeStep ? batch_.output_len : 0);
    v.kv_cache_bytes = 2.0 * dt * B * static_cast<double>(kv_tokens) * dh * N;
  }
  return v;
}

double throughput(const TotalLatency& latency, const BatchConfig& batch) {
  if (!(latency.total_s > 0.0)) throw std::invalid_argument("throughput: total_s must be > 0");
  if (batch.output_len <= 0) throw std::invalid_argument("throughput: output_len must be > 0");
  return static_cast<double>(batch.batch_size) * static_cast<double>(batch.output_len) /
         latency.total_s;
}

}  // namespace moeplan
