// SPDX-License-Identifier: Apache-2.0
//
// File formats: hardware/model/batch configs (JSON, comments allowed), routing
// traces (JSON lines), and JSON records for strategies, plans, activation
// maps and residency plans.
//
// System config:
//   { "gpu":  { "name": str?, "bw_bytes_per_s": num, "tflops": num, "vram_bytes": num },
//     "cpu":  { "name": str?, "bw_bytes_per_s": num, "tflops": num, "dram_bytes": num },
//     "link": { "bw_bytes_per_s": num, "duplex": bool?, "efficiency": num? } }
// Model config: num_layers, hidden_dim, expert_dim, experts_per_layer, top_k,
//   dtype_bytes (optional, default 2).
// Batch config: batch_size, input_len, output_len.
// Unknown keys are errors.
//
// Trace file: first line {"format":"moeplan-trace","version":1,
//   "embedding_dim":D,"num_layers":N,"experts_per_layer":n}; then one sample
//   per line {"embedding":[D floats],"layers":[[[expert,count],...] x N]}.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "moeplan/costmodel.hpp"
#include "moeplan/planner.hpp"
#include "moeplan/routing.hpp"

namespace moeplan {

using json = nlohmann::json;

// Bad or missing config values; the message names the key and the file.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input files; the message names the file and line.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kRecordVersion = 1;

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

// Parses JSON text (comments allowed). `source` names the origin in errors.
json parse_json(std::string_view text, const std::string& source);
json load_json_file(const std::filesystem::path& path);

// Applies "a.b.c=value" to `tree`; value is parsed as JSON, falling back to a
// plain string. Every object on the path must exist; the leaf may be new.
void apply_override(json& tree, const std::string& assignment, const std::string& source);

SystemSpec system_from_json(const json& tree, const std::string& source);
ModelConfig model_from_json(const json& tree, const std::string& source);
BatchConfig batch_from_json(const json& tree, const std::string& source);

json to_json(const SystemSpec& s);
json to_json(const ModelConfig& m);
json to_json(const BatchConfig& b);

// The three configs of one experiment, kept as trees so overrides apply
// before validation.
struct ConfigSet {
  json system, model, batch;
  std::string system_source = "system", model_source = "model", batch_source = "batch";

  // Routes "key=value" to the system, model or batch tree by key name.
  void apply(const std::string& assignment);
  SystemSpec system_spec() const { return system_from_json(system, system_source); }
  ModelConfig model_config() const { return model_from_json(model, model_source); }
  BatchConfig batch_config() const { return batch_from_json(batch, batch_source); }
};

// Strategies and plans.
json to_json(const AllocationStrategy& s);
AllocationStrategy strategy_from_json(const json& j, const std::string& source);
json to_json(const LayerCost& c);
json to_json(const VramBudget& v);
json to_json(const TotalLatency& t);
json to_json(const Plan& p);
Plan plan_from_json(const json& j, const std::string& source);

// Activation maps and residency plans.
json to_json(const ActivationMap& map);
ActivationMap activation_map_from_json(const json& j, const std::string& source);
json to_json(const ResidencyPlan& plan);
ResidencyPlan residency_from_json(const json& j, const std::string& source);

// Traces.
void write_trace(std::ostream& out, const RoutingTrace& trace);
void write_trace(const std::filesystem::path& path, const RoutingTrace& trace);
RoutingTrace read_trace(std::istream& in, const std::string& source);
RoutingTrace read_trace(const std::filesystem::path& path);

// Shortest round-trip text for a double, used in CSV output.
std::string format_double(double v);

}  // namespace moeplan
