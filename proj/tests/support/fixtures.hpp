// SPDX-License-Identifier: Apache-2.0
//
// Builders shared by the unit tests and the acceptance runner.

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "moeplan/costmodel.hpp"
#include "moeplan/eas.hpp"
#include "moeplan/hwmodel.hpp"
#include "moeplan/planner.hpp"
#include "moeplan/rng.hpp"
#include "moeplan/workload.hpp"

namespace moeplan::testing {

inline SystemSpec make_system(double gpu_bw, double gpu_tf, double vram, double cpu_bw,
                              double cpu_tf, double link_bw, bool duplex = true,
                              double dram = 1e15) {
  return SystemSpec(DeviceSpec("gpu", gpu_bw, gpu_tf, vram), DeviceSpec("cpu", cpu_bw, cpu_tf, dram),
                    LinkSpec(link_bw, duplex));
}

// Workstation-like numbers: RTX-class GPU, server CPU, PCIe 4.0 x16.
inline SystemSpec workstation(double vram = 48e9) {
  return make_system(960e9, 364e12, vram, 300e9, 144e12, 32e9);
}

inline ModelConfig make_model(std::int64_t layers, std::int64_t dh, std::int64_t de,
                              std::int64_t experts, std::int64_t top_k,
                              std::int64_t dtype = 2) {
  ModelConfig m;
  m.num_layers = layers;
  m.hidden_dim = dh;
  m.expert_dim = de;
  m.experts_per_layer = experts;
  m.top_k = top_k;
  m.dtype_bytes = dtype;
  return m;
}

inline BatchConfig make_batch(std::int64_t b, std::int64_t in, std::int64_t out) {
  return {b, in, out};
}

inline AllocationStrategy make_strategy(Device x0, Device x1, Device x2, std::int64_t resident,
                                        std::int64_t exp_r, std::int64_t exp_m,
                                        std::int64_t exp_c, std::int64_t m) {
  AllocationStrategy s;
  s.placement = {x0, x1, x2};
  s.resident_experts = resident;
  s.exp_r = exp_r;
  s.exp_m = exp_m;
  s.exp_c = exp_c;
  s.micro_batch = m;
  return s;
}

inline double pick(Rng& rng, std::initializer_list<double> values) {
  auto it = values.begin();
  std::advance(it, static_cast<long>(rng.below(values.size())));
  return *it;
}

inline std::int64_t pick_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

// Small planning instance: at most 4 layers, 8 experts and 4 m candidates.
// VRAM is drawn relative to the model size so that every regime from "nothing
// fits" to "everything fits" shows up across seeds.
inline PlanRequest random_small_request(std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 77));
  const std::int64_t experts = pick_int(rng, 2, 8);
  const ModelConfig model = make_model(pick_int(rng, 1, 4), 64 * pick_int(rng, 1, 8),
                                       64 * pick_int(rng, 1, 16), experts,
                                       pick_int(rng, 1, std::min<std::int64_t>(experts, 3)),
                                       rng.below(2) ? 2 : 1);
  const std::int64_t b = std::int64_t{1} << pick_int(rng, 0, 5);
  const BatchConfig batch = make_batch(b, pick_int(rng, 1, 64), pick_int(rng, 0, 6));

  const WeightBytes wb = weight_bytes(model);
  const double n = static_cast<double>(model.num_layers);
  const double model_bytes =
      n * (wb.non_expert_per_layer + static_cast<double>(experts) * wb.per_expert);
  const double vram = model_bytes * pick(rng, {0.3, 0.6, 1.0, 1.5, 3.0});

  PlanRequest req{make_system(pick(rng, {1e11, 1e12, 3e12}), pick(rng, {1e13, 1e14, 1e15}),
                              vram, pick(rng, {5e10, 1e11, 3e11}), pick(rng, {1e12, 1e13, 1e14}),
                              pick(rng, {8e9, 32e9, 64e9}), rng.below(4) != 0),
                  model, batch};
  std::vector<std::int64_t> ms = default_m_candidates(b);
  while (ms.size() > 4) ms.erase(ms.begin() + static_cast<long>(rng.below(ms.size())));
  req.m_candidates = ms;
  req.constraints.vram_slack_fraction = 0.05;
  if (rng.below(3) == 0) {
    ActivationMap map(model.num_layers, experts);
    for (std::int64_t l = 0; l < model.num_layers; ++l)
      for (auto& c : map.layer(l)) c = static_cast<double>(rng.below(50));
    map.layer(0)[0] += 1.0;
    req.activation_map = map;
  }
  req.reuse_migrated_in_decode = rng.below(4) == 0;
  return req;
}

// Long prompts on a 12 GB GPU with large experts. With attention on the GPU the
// KV cache and activation buffers leave room for about one expert per layer;
// keeping attention and its KV cache on the host frees VRAM for most experts.
inline PlanRequest attention_offload_request() {
  PlanRequest req{workstation(12e9), make_model(4, 4096, 14336, 8, 2), make_batch(32, 4096, 8)};
  return req;
}

// A skewed trace small enough for exhaustive checks.
inline RoutingTrace small_trace(std::int64_t experts, std::int64_t layers, std::uint64_t seed,
                                std::int64_t samples = 200) {
  SyntheticTraceConfig cfg;
  cfg.num_samples = samples;
  cfg.embedding_dim = 8;
  cfg.num_layers = layers;
  cfg.experts_per_layer = experts;
  cfg.top_k = std::min<std::int64_t>(2, experts);
  cfg.num_latent_topics = 3;
  cfg.seed = seed;
  return generate_synthetic_trace(cfg);
}

}  // namespace moeplan::testing
