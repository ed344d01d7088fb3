// SPDX-License-Identifier: Apache-2.0
//
// Expert-routing data shared by the stratification pipeline and the cost
// model: per-sample routing traces, aggregated activation maps, and static
// residency plans.

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace moeplan {

// (expert index, token count) for one layer of one sample.
using ExpertCount = std::pair<std::int32_t, std::int64_t>;

struct RoutingSample {
  std::vector<double> embedding;
  std::vector<std::vector<ExpertCount>> layers;  // one list per layer
};

struct RoutingTrace {
  std::int64_t embedding_dim = 0;
  std::int64_t num_layers = 0;
  std::int64_t experts_per_layer = 0;
  std::vector<RoutingSample> samples;

  std::size_t size() const { return samples.size(); }

  // Checks dimensions, expert index range and token counts >= 1.
  void validate() const;
};

// Per layer, activation counts per expert. Counts are token-weighted.
class ActivationMap {
 public:
  ActivationMap() = default;
  ActivationMap(std::int64_t num_layers, std::int64_t experts_per_layer);
  explicit ActivationMap(std::vector<std::vector<double>> counts);

  static ActivationMap uniform(std::int64_t num_layers, std::int64_t experts_per_layer,
                               double count = 1.0);

  std::int64_t num_layers() const { return static_cast<std::int64_t>(counts_.size()); }
  std::int64_t experts_per_layer() const {
    return counts_.empty() ? 0 : static_cast<std::int64_t>(counts_.front().size());
  }
  bool empty() const { return counts_.empty(); }

  const std::vector<double>& layer(std::int64_t l) const {
    return counts_[static_cast<std::size_t>(l)];
  }
  std::vector<double>& layer(std::int64_t l) { return counts_[static_cast<std::size_t>(l)]; }
  const std::vector<std::vector<double>>& counts() const { return counts_; }

  double layer_total(std::int64_t l) const;
  double total() const;
  std::vector<double> frequencies(std::int64_t l) const;

  ActivationMap& operator+=(const ActivationMap& other);
  friend bool operator==(const ActivationMap&, const ActivationMap&) = default;

 private:
  std::vector<std::vector<double>> counts_;
};

struct ResidencyPlan {
  std::int64_t capacity_per_layer = 0;
  std::vector<std::vector<std::int32_t>> resident;  // sorted expert ids per layer

  std::int64_t num_layers() const { return static_cast<std::int64_t>(resident.size()); }
  bool contains(std::int64_t layer, std::int32_t expert) const;
  void validate(std::int64_t experts_per_layer) const;

  friend bool operator==(const ResidencyPlan&, const ResidencyPlan&) = default;
};

}  // namespace moeplan
