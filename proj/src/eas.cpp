// SPDX-License-Identifier: Apache-2.0

#include "moeplan/eas.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "moeplan/kernels.hpp"
#include "moeplan/rng.hpp"

namespace moeplan {

namespace {

enum Stream : std::uint64_t { kBaseRanking = 1, kTopics, kSamples, kSeeding, kRandomProto };

std::vector<std::int32_t> permutation(std::int64_t n, Rng& rng) {
  std::vector<std::int32_t> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

// Draws k distinct indices with probability proportional to weight, removing
// each pick before the next draw.
void draw_without_replacement(std::span<const double> weights, std::int64_t k,
                              std::vector<double>& scratch, std::vector<std::int64_t>& counts,
                              Rng& rng) {
  scratch.assign(weights.begin(), weights.end());
  for (std::int64_t j = 0; j < k; ++j) {
    const double total = std::accumulate(scratch.begin(), scratch.end(), 0.0);
    double u = rng.uniform01() * total;
    std::size_t pick = scratch.size();
    for (std::size_t e = 0; e < scratch.size(); ++e) {
      if (scratch[e] <= 0.0) continue;
      pick = e;  // last positive weight absorbs rounding at the top end
      if (u < scratch[e]) break;
      u -= scratch[e];
    }
    ++counts[pick];
    scratch[pick] = 0.0;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic traces
// ---------------------------------------------------------------------------

void SyntheticTraceConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("tracegen: " + msg); };
  if (num_samples < 1 || embedding_dim < 1 || num_layers < 1 || experts_per_layer < 1 ||
      num_latent_topics < 1)
    fail("counts must be >= 1");
  if (top_k < 1 || top_k > experts_per_layer) fail("top_k must be in [1, experts_per_layer]");
  if (!(zipf_exponent > 0.0)) fail("zipf_exponent must be > 0");
  if (!(topic_dispersion >= 0.0)) fail("topic_dispersion must be >= 0");
  if (!(topic_separation >= 0.0)) fail("topic_separation must be >= 0");
  if (min_tokens < 1 || max_tokens < min_tokens) fail("need 1 <= min_tokens <= max_tokens");
}

RoutingTrace generate_synthetic_trace(const SyntheticTraceConfig& cfg) {
  cfg.validate();
  const auto n = cfg.experts_per_layer;
  const auto T = cfg.num_latent_topics;
  const auto L = cfg.num_layers;
  const auto D = cfg.embedding_dim;

  Rng base_rng(Rng::derive(cfg.seed, kBaseRanking));
  std::vector<std::vector<double>> base_rank(static_cast<std::size_t>(L));
  for (auto& rank : base_rank) {
    const auto perm = permutation(n, base_rng);
    rank.resize(static_cast<std::size_t>(n));
    for (std::int64_t pos = 0; pos < n; ++pos)
      rank[static_cast<std::size_t>(perm[static_cast<std::size_t>(pos)])] =
          static_cast<double>(pos);
  }

  Rng topic_rng(Rng::derive(cfg.seed, kTopics));
  std::vector<double> centres(static_cast<std::size_t>(T * D));
  for (double& c : centres) c = cfg.topic_separation * topic_rng.normal();

  // preference[t][l][e]: unnormalised Zipf weight of expert e.
  std::vector<std::vector<std::vector<double>>> preference(
      static_cast<std::size_t>(T),
      std::vector<std::vector<double>>(static_cast<std::size_t>(L),
                                       std::vector<double>(static_cast<std::size_t>(n))));
  const double spread = cfg.topic_dispersion * static_cast<double>(n);
  for (std::int64_t t = 0; t < T; ++t) {
    for (std::int64_t l = 0; l < L; ++l) {
      std::vector<double> key(base_rank[static_cast<std::size_t>(l)]);
      for (double& k : key) k += spread * topic_rng.normal();
      std::vector<std::int32_t> order(static_cast<std::size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
        return key[static_cast<std::size_t>(a)] < key[static_cast<std::size_t>(b)];
      });
      auto& w = preference[static_cast<std::size_t>(t)][static_cast<std::size_t>(l)];
      for (std::int64_t r = 0; r < n; ++r)
        w[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] =
            std::pow(static_cast<double>(r + 1), -cfg.zipf_exponent);
    }
  }

  RoutingTrace trace;
  trace.embedding_dim = D;
  trace.num_layers = L;
  trace.experts_per_layer = n;
  trace.samples.resize(static_cast<std::size_t>(cfg.num_samples));

  Rng rng(Rng::derive(cfg.seed, kSamples));
  std::vector<double> scratch;
  std::vector<std::int64_t> counts(static_cast<std::size_t>(n));
  for (auto& sample : trace.samples) {
    const auto t = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(T)));
    sample.embedding.resize(static_cast<std::size_t>(D));
    for (std::int64_t d = 0; d < D; ++d)
      sample.embedding[static_cast<std::size_t>(d)] =
          centres[t * static_cast<std::size_t>(D) + static_cast<std::size_t>(d)] + rng.normal();
    const auto tokens = cfg.min_tokens + static_cast<std::int64_t>(rng.below(
                                             static_cast<std::uint64_t>(cfg.max_tokens -
                                                                        cfg.min_tokens + 1)));
    sample.layers.resize(static_cast<std::size_t>(L));
    for (std::int64_t l = 0; l < L; ++l) {
      std::fill(counts.begin(), counts.end(), 0);
      for (std::int64_t tok = 0; tok < tokens; ++tok)
        draw_without_replacement(preference[t][static_cast<std::size_t>(l)], cfg.top_k, scratch,
                                 counts, rng);
      auto& out = sample.layers[static_cast<std::size_t>(l)];
      for (std::int64_t e = 0; e < n; ++e)
        if (counts[static_cast<std::size_t>(e)] > 0)
          out.emplace_back(static_cast<std::int32_t>(e), counts[static_cast<std::size_t>(e)]);
    }
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

void StratificationConfig::validate(std::size_t num_samples) const {
  if (num_clusters < 1) throw std::invalid_argument("stratify: num_clusters must be >= 1");
  if (static_cast<std::size_t>(num_clusters) > num_samples)
    throw std::invalid_argument("stratify: num_clusters (" + std::to_string(num_clusters) +
                                ") exceeds the number of samples (" +
                                std::to_string(num_samples) + ")");
  if (!(sample_ratio > 0.0 && sample_ratio <= 1.0))
    throw std::invalid_argument("stratify: sample_ratio must be in (0, 1]");
  if (max_kmeans_iters < 0) throw std::invalid_argument("stratify: max_kmeans_iters must be >= 0");
  if (!(tolerance >= 0.0)) throw std::invalid_argument("stratify: tolerance must be >= 0");
}

std::vector<double> embedding_matrix(const RoutingTrace& trace) {
  std::vector<double> m;
  m.reserve(trace.size() * static_cast<std::size_t>(trace.embedding_dim));
  for (const auto& s : trace.samples) m.insert(m.end(), s.embedding.begin(), s.embedding.end());
  return m;
}

ClusterResult cluster(std::span<const double> points, std::int64_t dim,
                      const StratificationConfig& config) {
  if (dim < 1) throw std::invalid_argument("cluster: dim must be >= 1");
  const std::size_t d = static_cast<std::size_t>(dim);
  const std::size_t n = points.size() / d;
  config.validate(n);
  const auto& kt = kernels::active();
  const auto k = static_cast<std::size_t>(config.num_clusters);
  auto point = [&](std::size_t i) { return points.subspan(i * d, d); };

  ClusterResult out;
  out.k = config.num_clusters;
  out.dim = dim;
  out.centroids.resize(k * d);
  out.assignments.assign(n, 0);
  auto set_centroid = [&](std::size_t c, std::size_t sample) {
    std::copy_n(points.begin() + static_cast<std::ptrdiff_t>(sample * d), d,
                out.centroids.begin() + static_cast<std::ptrdiff_t>(c * d));
  };

  // Farthest-point seeding.
  Rng rng(Rng::derive(config.seed, kSeeding));
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::size_t next = static_cast<std::size_t>(rng.below(n));
  for (std::size_t c = 0; c < k; ++c) {
    set_centroid(c, next);
    std::size_t far = 0;
    for (std::size_t i = 0; i < n; ++i) {
      min_dist[i] = std::min(min_dist[i], kt.squared_distance(point(i).data(),
                                                              out.centroids.data() + c * d, d));
      if (min_dist[i] > min_dist[far]) far = i;
    }
    next = far;
  }

  std::vector<double> dist(n);
  auto assign = [&] {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto nr = kernels::nearest_row(point(i), out.centroids, d, kt);
      out.assignments[i] = static_cast<std::int32_t>(nr.index);
      dist[i] = nr.distance;
      total += nr.distance;
    }
    out.distortion_history.push_back(total);
  };

  assign();
  std::vector<double> sums(k * d);
  std::vector<std::size_t> sizes(k);
  std::vector<double> previous;
  for (std::int64_t it = 0; it < config.max_kmeans_iters; ++it) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(sizes.begin(), sizes.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(out.assignments[i]);
      kt.accumulate(sums.data() + c * d, point(i).data(), d);
      ++sizes[c];
    }
    previous = out.centroids;
    std::vector<bool> taken(n, false);
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] > 0) {
        const double inv = 1.0 / static_cast<double>(sizes[c]);
        for (std::size_t j = 0; j < d; ++j) out.centroids[c * d + j] = sums[c * d + j] * inv;
        continue;
      }
      // Empty cluster: move it onto the worst-served sample not yet used.
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i] && (far == n || dist[i] > dist[far])) far = i;
      taken[far] = true;
      dist[far] = 0.0;
      set_centroid(c, far);
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c)
      shift = std::max(shift, kt.squared_distance(previous.data() + c * d,
                                                  out.centroids.data() + c * d, d));
    assign();
    out.iterations = it + 1;
    if (std::sqrt(shift) < config.tolerance) break;
  }
  return out;
}

ClusterResult cluster(const RoutingTrace& trace, const StratificationConfig& config) {
  const auto m = embedding_matrix(trace);
  return cluster(m, trace.embedding_dim, config);
}

// ---------------------------------------------------------------------------
// Prototype selection and probing
// ---------------------------------------------------------------------------

std::vector<std::size_t> select_prototypes(std::span<const double> points, std::int64_t dim,
                                           const ClusterResult& clusters, double sample_ratio) {
  if (!(sample_ratio > 0.0 && sample_ratio <= 1.0))
    throw std::invalid_argument("select_prototypes: sample_ratio must be in (0, 1]");
  const auto d = static_cast<std::size_t>(dim);
  const auto& kt = kernels::active();
  std::vector<std::vector<std::pair<double, std::size_t>>> members(
      static_cast<std::size_t>(clusters.k));
  for (std::size_t i = 0; i < clusters.assignments.size(); ++i) {
    const auto c = static_cast<std::size_t>(clusters.assignments[i]);
    members[c].emplace_back(
        kt.squared_distance(points.data() + i * d, clusters.centroids.data() + c * d, d), i);
  }
  std::vector<std::size_t> out;
  for (auto& m : members) {
    if (m.empty()) continue;
    std::sort(m.begin(), m.end());
    const auto want = static_cast<std::size_t>(
        std::max<long>(1, std::lround(sample_ratio * static_cast<double>(m.size()))));
    for (std::size_t j = 0; j < std::min(want, m.size()); ++j) out.push_back(m[j].second);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> select_prototypes(const RoutingTrace& trace,
                                           const ClusterResult& clusters, double sample_ratio) {
  const auto m = embedding_matrix(trace);
  return select_prototypes(m, trace.embedding_dim, clusters, sample_ratio);
}

std::vector<std::size_t> random_prototypes(std::size_t num_samples, std::size_t count,
                                           std::uint64_t seed) {
  if (count > num_samples) throw std::invalid_argument("random_prototypes: count > samples");
  Rng rng(Rng::derive(seed, kRandomProto));
  std::vector<std::size_t> idx(num_samples);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < count; ++i)
    std::swap(idx[i], idx[i + rng.below(num_samples - i)]);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

ActivationMap probe(const RoutingTrace& trace, std::span<const std::size_t> prototypes) {
  if (prototypes.empty()) throw std::invalid_argument("probe: no prototypes");
  ActivationMap map(trace.num_layers, trace.experts_per_layer);
  for (std::size_t idx : prototypes) {
    if (idx >= trace.size()) throw std::invalid_argument("probe: prototype index out of range");
    const auto& sample = trace.samples[idx];
    for (std::int64_t l = 0; l < trace.num_layers; ++l)
      for (const auto& [expert, count] : sample.layers[static_cast<std::size_t>(l)])
        map.layer(l)[static_cast<std::size_t>(expert)] += static_cast<double>(count);
  }
  return map;
}

ActivationMap exact_activation_map(const RoutingTrace& trace) {
  std::vector<std::size_t> all(trace.size());
  std::iota(all.begin(), all.end(), 0);
  return probe(trace, all);
}

// ---------------------------------------------------------------------------
// Residency
// ---------------------------------------------------------------------------

ResidencyPlan select_resident_experts(const ActivationMap& map, std::int64_t capacity_per_layer) {
  if (capacity_per_layer < 0) throw std::invalid_argument("capacity must be >= 0");
  const std::int64_t n = map.experts_per_layer();
  const std::int64_t cap = std::min(capacity_per_layer, n);
  ResidencyPlan plan;
  plan.capacity_per_layer = cap;
  for (std::int64_t l = 0; l < map.num_layers(); ++l) {
    const auto& counts = map.layer(l);
    std::vector<std::int32_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
      return counts[static_cast<std::size_t>(a)] > counts[static_cast<std::size_t>(b)];
    });
    order.resize(static_cast<std::size_t>(cap));
    std::sort(order.begin(), order.end());
    plan.resident.push_back(std::move(order));
  }
  return plan;
}

double hit_ratio(const RoutingTrace& trace, const ResidencyPlan& plan) {
  if (plan.num_layers() != trace.num_layers)
    throw std::invalid_argument("hit_ratio: layer count mismatch");
  std::vector<std::vector<char>> resident(static_cast<std::size_t>(trace.num_layers),
                                          std::vector<char>(
                                              static_cast<std::size_t>(trace.experts_per_layer)));
  for (std::int64_t l = 0; l < trace.num_layers; ++l)
    for (auto e : plan.resident[static_cast<std::size_t>(l)])
      resident[static_cast<std::size_t>(l)][static_cast<std::size_t>(e)] = 1;
  std::int64_t hits = 0, events = 0;
  for (const auto& s : trace.samples) {
    for (std::size_t l = 0; l < s.layers.size(); ++l) {
      for (const auto& [expert, count] : s.layers[l]) {
        events += count;
        if (resident[l][static_cast<std::size_t>(expert)]) hits += count;
      }
    }
  }
  return events == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(events);
}

ResidencyPlan random_baseline(std::int64_t experts_per_layer, std::int64_t capacity,
                              std::int64_t num_layers, std::uint64_t seed) {
  if (capacity < 0 || capacity > experts_per_layer)
    throw std::invalid_argument("random_baseline: capacity must be in [0, experts_per_layer]");
  ResidencyPlan plan;
  plan.capacity_per_layer = capacity;
  for (std::int64_t l = 0; l < num_layers; ++l) {
    // One stream per layer, so a larger capacity extends every layer's set.
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(l)));
    std::vector<std::int32_t> ids(static_cast<std::size_t>(experts_per_layer));
    std::iota(ids.begin(), ids.end(), 0);
    for (std::size_t i = 0; i < static_cast<std::size_t>(capacity); ++i)
      std::swap(ids[i], ids[i + rng.below(ids.size() - i)]);
    ids.resize(static_cast<std::size_t>(capacity));
    std::sort(ids.begin(), ids.end());
    plan.resident.push_back(std::move(ids));
  }
  return plan;
}

StratificationResult stratify(const RoutingTrace& trace, const StratificationConfig& config,
                              std::int64_t capacity_per_layer) {
  const auto m = embedding_matrix(trace);
  StratificationResult r;
  r.clusters = cluster(m, trace.embedding_dim, config);
  r.prototypes = select_prototypes(m, trace.embedding_dim, r.clusters, config.sample_ratio);
  r.probed = probe(trace, r.prototypes);
  r.residency = select_resident_experts(r.probed, capacity_per_layer);
  return r;
}

}  // namespace moeplan
