// SPDX-License-Identifier: Apache-2.0
//
// Expert-aware stratification: cluster sample embeddings into strata, pick
// the most central samples of each stratum in proportion to its size, probe
// only those samples' routing, and keep the most frequently activated experts
// resident in VRAM.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moeplan/routing.hpp"

namespace moeplan {

struct SyntheticTraceConfig {
  std::int64_t num_samples = 10'000;
  std::int64_t embedding_dim = 32;
  std::int64_t num_layers = 4;
  std::int64_t experts_per_layer = 64;
  std::int64_t top_k = 8;
  std::int64_t num_latent_topics = 8;
  double zipf_exponent = 1.2;
  // Each topic ranks experts by a shared per-layer ranking perturbed with
  // Gaussian noise of this many experts (as a fraction of the pool). 0 gives
  // every topic the same ranking; large values make topics independent.
  double topic_dispersion = 0.1;
  // Spread of topic centres relative to the unit within-topic noise.
  double topic_separation = 4.0;
  std::int64_t min_tokens = 4;
  std::int64_t max_tokens = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

// Samples come from Gaussian topic blobs. Each token of a sample activates
// top_k distinct experts drawn without replacement from the topic's Zipf
// preference for that layer; counts aggregate over the sample's tokens.
RoutingTrace generate_synthetic_trace(const SyntheticTraceConfig& config);

struct StratificationConfig {
  std::int64_t num_clusters = 8;  // K
  double sample_ratio = 0.05;
  std::uint64_t seed = 0;
  std::int64_t max_kmeans_iters = 100;
  double tolerance = 1e-6;  // largest centroid shift that counts as converged

  void validate(std::size_t num_samples) const;
};

struct ClusterResult {
  std::int64_t k = 0;
  std::int64_t dim = 0;
  std::vector<std::int32_t> assignments;
  std::vector<double> centroids;          // k x dim, row-major
  std::vector<double> distortion_history; // after every assignment pass
  std::int64_t iterations = 0;

  std::span<const double> centroid(std::int64_t c) const {
    return {centroids.data() + c * dim, static_cast<std::size_t>(dim)};
  }
  double distortion() const { return distortion_history.back(); }
};

// Lloyd iteration from farthest-point seeding (first seed drawn from
// config.seed). Empty clusters are reseeded at the sample farthest from its
// centroid. Throws std::invalid_argument when K exceeds the sample count.
ClusterResult cluster(std::span<const double> points, std::int64_t dim,
                      const StratificationConfig& config);
ClusterResult cluster(const RoutingTrace& trace, const StratificationConfig& config);

// max(1, round(ratio * n_k)) samples per non-empty cluster, nearest to the
// centroid first (ties by index). Returned indices are ascending.
std::vector<std::size_t> select_prototypes(std::span<const double> points, std::int64_t dim,
                                           const ClusterResult& clusters, double sample_ratio);
std::vector<std::size_t> select_prototypes(const RoutingTrace& trace,
                                           const ClusterResult& clusters, double sample_ratio);

// `count` distinct samples drawn uniformly, ascending.
std::vector<std::size_t> random_prototypes(std::size_t num_samples, std::size_t count,
                                           std::uint64_t seed);

ActivationMap probe(const RoutingTrace& trace, std::span<const std::size_t> prototypes);
ActivationMap exact_activation_map(const RoutingTrace& trace);

// Highest-count experts per layer; ties go to the lower index.
ResidencyPlan select_resident_experts(const ActivationMap& map, std::int64_t capacity_per_layer);

// Token-weighted fraction of activations that land on a resident expert.
double hit_ratio(const RoutingTrace& trace, const ResidencyPlan& plan);

// Uniform subset per layer. For a fixed seed, larger capacities give supersets.
ResidencyPlan random_baseline(std::int64_t experts_per_layer, std::int64_t capacity,
                              std::int64_t num_layers, std::uint64_t seed);

struct StratificationResult {
  ClusterResult clusters;
  std::vector<std::size_t> prototypes;
  ActivationMap probed;
  ResidencyPlan residency;
};

StratificationResult stratify(const RoutingTrace& trace, const StratificationConfig& config,
                              std::int64_t capacity_per_layer);

// Row-major copy of the trace embeddings.
std::vector<double> embedding_matrix(const RoutingTrace& trace);

}  // namespace moeplan
