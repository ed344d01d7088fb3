// SPDX-License-Identifier: Apache-2.0
//
// Discrete-event simulation of one layer's CPU/GPU/PCIe pipeline. A strategy
// becomes a task DAG whose durations come from the cost model; tasks run on
// exclusive resources so transfers overlap compute where dependencies allow.
//
// Scheduling: every resource serves its tasks in priority order (dependency
// depth, then id) and a task starts as soon as its dependencies have finished
// and the previous task on its resource is done. Tasks never overtake one
// another on a resource, so lengthening a task can only delay others.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "moeplan/costmodel.hpp"
#include "json.hpp"

namespace moeplan {

enum class Resource { GpuCompute = 0, CpuCompute = 1, LinkH2D = 2, LinkD2H = 3 };
std::string_view to_string(Resource r);

class CycleDetected : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Task {
  std::int64_t id = 0;
  std::string name;
  Resource resource = Resource::GpuCompute;
  double duration = 0.0;
  std::vector<std::int64_t> deps;
};

// Task ids equal their index in `tasks`.
struct TaskGraph {
  std::vector<Task> tasks;

  std::int64_t add(std::string name, Resource resource, double duration,
                   std::vector<std::int64_t> deps = {});
  double total_duration() const;
  // True when the dependencies force one task at a time.
  bool is_chain() const;
  // Throws std::invalid_argument on bad ids or negative durations.
  void validate() const;
};

struct TimelineEntry {
  std::int64_t task = 0;
  double start = 0.0;
  double end = 0.0;
};

struct Timeline {
  std::vector<TimelineEntry> entries;  // indexed by task id
  double makespan = 0.0;
};

struct SimOptions {
  bool duplex = true;  // separate H2D and D2H lanes
};

// Tasks sorted by (dependency depth, id), where depth is the length of the
// longest dependency chain leading to the task. Throws CycleDetected when the
// graph has a cycle.
std::vector<std::int64_t> topological_order(const TaskGraph& graph);

Timeline simulate(const TaskGraph& graph, const SimOptions& options = {});

// Empty when the timeline satisfies every schedule invariant, otherwise one
// message per violation.
std::vector<std::string> validate_timeline(const TaskGraph& graph, const Timeline& timeline,
                                           const SimOptions& options = {}, double tol = 1e-12);

// Longest dependency chain and the busiest resource, both lower bounds on any
// valid makespan.
double critical_path(const TaskGraph& graph);
double max_resource_load(const TaskGraph& graph, const SimOptions& options = {});

// One layer of `strategy` at `phase`. Throws std::invalid_argument when the
// strategy does not fit in VRAM for its phase.
TaskGraph build_task_graph(const AllocationStrategy& strategy, const Phase& phase,
                           const CostModel& model, bool charge_migration = true);

struct ModelComparison {
  double analytical_s = 0.0;
  double simulated_s = 0.0;
  double ratio = 1.0;  // simulated / analytical, 1 when both are 0
};

ModelComparison make_comparison(double analytical_s, double simulated_s);

// Single layer at `phase`, scaled by the layer count.
ModelComparison compare_to_model(const AllocationStrategy& strategy, const Phase& phase,
                                 const CostModel& model);

struct PlanSimulation {
  ModelComparison prefill;
  ModelComparison decode;  // one representative step, or every step
  ModelComparison total;
  Timeline prefill_timeline;
  Timeline decode_timeline;  // the representative step
  TaskGraph prefill_graph;
  TaskGraph decode_graph;
};

// Simulates prefill and decode step `decode_step` (1-based). With
// `all_decode_steps`, the decode figures sum every step exactly like the
// analytical total.
PlanSimulation simulate_plan(const AllocationStrategy& prefill, const AllocationStrategy& decode,
                             const CostModel& model, std::int64_t decode_step = 1,
                             bool all_decode_steps = false);

// Trace-event records: name, res, ts and dur in microseconds, ph "X".
nlohmann::json to_trace_events(const TaskGraph& graph, const Timeline& timeline,
                               const SimOptions& options = {});

}  // namespace moeplan
