// SPDX-License-Identifier: Apache-2.0

#include "moeplan/routing.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace moeplan {

void RoutingTrace::validate() const {
  if (embedding_dim < 1 || num_layers < 1 || experts_per_layer < 1)
    throw std::invalid_argument("trace: dimensions must be >= 1");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::string where = "trace sample " + std::to_string(i) + ": ";
    if (static_cast<std::int64_t>(s.embedding.size()) != embedding_dim)
      throw std::invalid_argument(where + "embedding dimension mismatch");
    if (static_cast<std::int64_t>(s.layers.size()) != num_layers)
      throw std::invalid_argument(where + "layer count mismatch");
    for (const auto& layer : s.layers) {
      for (const auto& [expert, count] : layer) {
        if (expert < 0 || expert >= experts_per_layer)
          throw std::invalid_argument(where + "expert index out of range");
        if (count < 1) throw std::invalid_argument(where + "token count must be >= 1");
      }
    }
  }
}

ActivationMap::ActivationMap(std::int64_t num_layers, std::int64_t experts_per_layer)
    : counts_(static_cast<std::size_t>(num_layers),
              std::vector<double>(static_cast<std::size_t>(experts_per_layer), 0.0)) {}

ActivationMap::ActivationMap(std::vector<std::vector<double>> counts) : counts_(std::move(counts)) {
  for (const auto& layer : counts_) {
    if (layer.size() != counts_.front().size())
      throw std::invalid_argument("activation map: ragged layers");
    for (double c : layer)
      if (!(c >= 0.0)) throw std::invalid_argument("activation map: negative count");
  }
}

ActivationMap ActivationMap::uniform(std::int64_t num_layers, std::int64_t experts_per_layer,
                                     double count) {
  ActivationMap map(num_layers, experts_per_layer);
  for (auto& layer : map.counts_) std::fill(layer.begin(), layer.end(), count);
  return map;
}

double ActivationMap::layer_total(std::int64_t l) const {
  const auto& v = layer(l);
  return std::accumulate(v.begin(), v.end(), 0.0);
}

double ActivationMap::total() const {
  double t = 0.0;
  for (std::int64_t l = 0; l < num_layers(); ++l) t += layer_total(l);
  return t;
}

std::vector<double> ActivationMap::frequencies(std::int64_t l) const {
  std::vector<double> f = layer(l);
  const double t = layer_total(l);
  if (t > 0.0)
    for (double& x : f) x /= t;
  return f;
}

ActivationMap& ActivationMap::operator+=(const ActivationMap& other) {
  if (counts_.empty()) {
    counts_ = other.counts_;
    return *this;
  }
  if (other.num_layers() != num_layers() || other.experts_per_layer() != experts_per_layer())
    throw std::invalid_argument("activation map: shape mismatch");
  for (std::size_t l = 0; l < counts_.size(); ++l)
    for (std::size_t e = 0; e < counts_[l].size(); ++e) counts_[l][e] += other.counts_[l][e];
  return *this;
}

bool ResidencyPlan::contains(std::int64_t layer, std::int32_t expert) const {
  const auto& v = resident[static_cast<std::size_t>(layer)];
  return std::binary_search(v.begin(), v.end(), expert);
}

void ResidencyPlan::validate(std::int64_t experts_per_layer) const {
  if (capacity_per_layer < 0 || capacity_per_layer > experts_per_layer)
    throw std::invalid_argument("residency: capacity out of range");
  for (const auto& layer : resident) {
    if (static_cast<std::int64_t>(layer.size()) > capacity_per_layer)
      throw std::invalid_argument("residency: layer exceeds capacity");
    if (!std::is_sorted(layer.begin(), layer.end()) ||
        std::adjacent_find(layer.begin(), layer.end()) != layer.end())
      throw std::invalid_argument("residency: expert ids must be sorted and unique");
    for (auto e : layer)
      if (e < 0 || e >= experts_per_layer)
        throw std::invalid_argument("residency: expert index out of range");
  }
}

}  // namespace moeplan
