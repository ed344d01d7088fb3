// SPDX-License-Identifier: Apache-2.0

#include "moeplan/sim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <queue>
#include <tuple>

#include <fmt/format.h>

namespace moeplan {

std::string_view to_string(Resource r) {
  switch (r) {
    case Resource::GpuCompute:
      return "gpu";
    case Resource::CpuCompute:
      return "cpu";
    case Resource::LinkH2D:
      return "h2d";
    case Resource::LinkD2H:
      return "d2h";
  }
  return "?";
}

namespace {

int lane_of(Resource r, const SimOptions& opt) {
  if (!opt.duplex && r == Resource::LinkD2H) return static_cast<int>(Resource::LinkH2D);
  return static_cast<int>(r);
}

Resource compute_of(Device d) {
  return d == Device::Gpu ? Resource::GpuCompute : Resource::CpuCompute;
}

// Link direction for data moving onto `dest`.
Resource link_to(Device dest) {
  return dest == Device::Gpu ? Resource::LinkH2D : Resource::LinkD2H;
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

std::int64_t TaskGraph::add(std::string name, Resource resource, double duration,
                            std::vector<std::int64_t> deps) {
  const auto id = static_cast<std::int64_t>(tasks.size());
  tasks.push_back({id, std::move(name), resource, duration, std::move(deps)});
  return id;
}

double TaskGraph::total_duration() const {
  double sum = 0.0;
  for (const auto& t : tasks) sum += t.duration;
  return sum;
}

bool TaskGraph::is_chain() const {
  // Serialised exactly when every task depends directly on its predecessor in
  // topological order.
  const auto order = topological_order(*this);
  for (std::size_t k = 1; k < order.size(); ++k) {
    const auto& deps = tasks[static_cast<std::size_t>(order[k])].deps;
    if (std::find(deps.begin(), deps.end(), order[k - 1]) == deps.end()) return false;
  }
  return true;
}

void TaskGraph::validate() const {
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& t = tasks[i];
    if (t.id != static_cast<std::int64_t>(i))
      throw std::invalid_argument(fmt::format("task {} has id {}", i, t.id));
    if (!(t.duration >= 0.0) || !std::isfinite(t.duration))
      throw std::invalid_argument(fmt::format("task {} ({}) has invalid duration", i, t.name));
    for (auto d : t.deps)
      if (d < 0 || d >= static_cast<std::int64_t>(tasks.size()))
        throw std::invalid_argument(fmt::format("task {} depends on unknown task {}", i, d));
  }
}

std::vector<std::int64_t> topological_order(const TaskGraph& graph) {
  graph.validate();
  const std::size_t n = graph.tasks.size();
  std::vector<std::vector<std::int64_t>> succ(n);
  std::vector<std::size_t> indegree(n, 0);
  for (const auto& t : graph.tasks) {
    for (auto d : t.deps) succ[static_cast<std::size_t>(d)].push_back(t.id);
    indegree[static_cast<std::size_t>(t.id)] = t.deps.size();
  }
  std::priority_queue<std::int64_t, std::vector<std::int64_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < n; ++i)
    if (indegree[i] == 0) ready.push(static_cast<std::int64_t>(i));
  std::vector<std::int64_t> order;
  order.reserve(n);
  while (!ready.empty()) {
    const auto id = ready.top();
    ready.pop();
    order.push_back(id);
    for (auto s : succ[static_cast<std::size_t>(id)])
      if (--indegree[static_cast<std::size_t>(s)] == 0) ready.push(s);
  }
  if (order.size() != n)
    throw CycleDetected(fmt::format("task graph has a cycle ({} of {} tasks unreachable)",
                                    n - order.size(), n));

  // Breadth-first by dependency depth, so independent micro-batches
  // interleave on shared lanes instead of running back to back.
  std::vector<std::int64_t> depth(n, 0);
  for (auto id : order)
    for (auto d : graph.tasks[static_cast<std::size_t>(id)].deps)
      depth[static_cast<std::size_t>(id)] =
          std::max(depth[static_cast<std::size_t>(id)], depth[static_cast<std::size_t>(d)] + 1);
  std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    return std::tie(depth[static_cast<std::size_t>(a)], a) <
           std::tie(depth[static_cast<std::size_t>(b)], b);
  });
  return order;
}

// ---------------------------------------------------------------------------
// Scheduling
// ---------------------------------------------------------------------------

Timeline simulate(const TaskGraph& graph, const SimOptions& options) {
  const auto order = topological_order(graph);
  Timeline tl;
  tl.entries.resize(graph.tasks.size());
  std::array<double, 4> lane_free{};
  // Walking the topological order visits each lane's tasks in priority order,
  // so the previous task on a lane is always already placed.
  for (auto id : order) {
    const auto& t = graph.tasks[static_cast<std::size_t>(id)];
    const int lane = lane_of(t.resource, options);
    double start = lane_free[static_cast<std::size_t>(lane)];
    for (auto d : t.deps) start = std::max(start, tl.entries[static_cast<std::size_t>(d)].end);
    const double end = start + t.duration;
    tl.entries[static_cast<std::size_t>(id)] = {id, start, end};
    lane_free[static_cast<std::size_t>(lane)] = end;
    tl.makespan = std::max(tl.makespan, end);
  }
  return tl;
}

std::vector<std::string> validate_timeline(const TaskGraph& graph, const Timeline& timeline,
                                           const SimOptions& options, double tol) {
  std::vector<std::string> errors;
  if (timeline.entries.size() != graph.tasks.size()) {
    errors.push_back(fmt::format("timeline has {} entries for {} tasks", timeline.entries.size(),
                                 graph.tasks.size()));
    return errors;
  }
  double max_end = 0.0;
  for (std::size_t i = 0; i < graph.tasks.size(); ++i) {
    const auto& t = graph.tasks[i];
    const auto& e = timeline.entries[i];
    if (e.task != t.id) errors.push_back(fmt::format("entry {} names task {}", i, e.task));
    if (e.start < -tol) errors.push_back(fmt::format("task {} starts before 0", t.id));
    if (std::abs(e.end - (e.start + t.duration)) > tol * std::max(1.0, std::abs(e.end)))
      errors.push_back(fmt::format("task {} ({}): end != start + duration", t.id, t.name));
    for (auto d : t.deps)
      if (e.start + tol < timeline.entries[static_cast<std::size_t>(d)].end)
        errors.push_back(fmt::format("task {} ({}) starts before dependency {} ends", t.id,
                                     t.name, d));
    max_end = std::max(max_end, e.end);
  }
  if (std::abs(max_end - timeline.makespan) > tol * std::max(1.0, max_end))
    errors.push_back(
        fmt::format("makespan {} differs from the latest end {}", timeline.makespan, max_end));

  std::array<std::vector<std::size_t>, 4> lanes;
  for (std::size_t i = 0; i < graph.tasks.size(); ++i)
    lanes[static_cast<std::size_t>(lane_of(graph.tasks[i].resource, options))].push_back(i);
  for (auto& lane : lanes) {
    std::sort(lane.begin(), lane.end(), [&](std::size_t a, std::size_t b) {
      const auto& ea = timeline.entries[a];
      const auto& eb = timeline.entries[b];
      return std::tie(ea.start, ea.end, a) < std::tie(eb.start, eb.end, b);
    });
    std::int64_t busy_task = -1;
    double busy_until = 0.0;
    for (std::size_t k : lane) {
      const auto& cur = timeline.entries[k];
      // Zero-length tasks occupy no time and may sit anywhere.
      if (cur.end - cur.start <= 0.0) continue;
      if (busy_task >= 0 && cur.start + tol < busy_until)
        errors.push_back(fmt::format("tasks {} and {} overlap on {}", busy_task, cur.task,
                                     to_string(graph.tasks[k].resource)));
      if (cur.end > busy_until) {
        busy_until = cur.end;
        busy_task = cur.task;
      }
    }
  }
  return errors;
}

double critical_path(const TaskGraph& graph) {
  const auto order = topological_order(graph);
  std::vector<double> finish(graph.tasks.size(), 0.0);
  double best = 0.0;
  for (auto id : order) {
    const auto& t = graph.tasks[static_cast<std::size_t>(id)];
    double start = 0.0;
    for (auto d : t.deps) start = std::max(start, finish[static_cast<std::size_t>(d)]);
    finish[static_cast<std::size_t>(id)] = start + t.duration;
    best = std::max(best, start + t.duration);
  }
  return best;
}

double max_resource_load(const TaskGraph& graph, const SimOptions& options) {
  std::array<double, 4> load{};
  for (const auto& t : graph.tasks)
    load[static_cast<std::size_t>(lane_of(t.resource, options))] += t.duration;
  return *std::max_element(load.begin(), load.end());
}

// ---------------------------------------------------------------------------
// Strategy to DAG
// ---------------------------------------------------------------------------

TaskGraph build_task_graph(const AllocationStrategy& s, const Phase& phase, const CostModel& cm,
                           bool charge_migration) {
  cm.check_strategy(s, phase);
  const VramBudget vram = cm.vram_usage(s, phase.kind);
  if (!vram.feasible())
    throw std::invalid_argument(fmt::format(
        "strategy needs {:.6g} bytes of VRAM but the GPU has {:.6g}", vram.used(), vram.capacity));

  const std::int64_t M = s.num_micro_batches(cm.batch().batch_size);
  const double Md = static_cast<double>(M);
  std::array<double, 3> load{}, comp{};
  for (int i = 0; i < 3; ++i) {
    load[static_cast<std::size_t>(i)] = cm.op_load_time(i, s, phase) / Md;
    comp[static_cast<std::size_t>(i)] = cm.op_compute_time(i, s, phase) / Md;
  }
  const double kv_store = cm.op_store_time(1, s, phase) / Md;

  TaskGraph g;
  std::vector<std::int64_t> op2_done;
  for (std::int64_t j = 0; j < M; ++j) {
    std::int64_t prev = -1;
    for (int i = 0; i < 3; ++i) {
      const auto iu = static_cast<std::size_t>(i);
      const Device dev = s.x(i);
      std::vector<std::int64_t> deps;
      if (prev >= 0) deps.push_back(prev);
      if (load[iu] > 0.0)
        deps.push_back(g.add(fmt::format("op{}.load[{}]", i, j), link_to(dev), load[iu],
                             prev >= 0 ? std::vector<std::int64_t>{prev}
                                       : std::vector<std::int64_t>{}));
      if (i == 1 && kv_store > 0.0)
        deps.push_back(g.add(fmt::format("op1.kv_store[{}]", j), Resource::LinkD2H, kv_store,
                             {prev}));
      prev = g.add(fmt::format("op{}[{}]", i, j), compute_of(dev), comp[iu], std::move(deps));
    }
    op2_done.push_back(prev);
  }

  const ExpertStageTime ex = cm.expert_stage_time(s, phase, charge_migration);
  std::int64_t act = -1, mig = -1, gpu = -1, cpu = -1, handoff = -1;
  if (ex.activation_s > 0.0)
    act = g.add("experts.activation", link_to(ex.activation_dest), ex.activation_s, op2_done);
  if (ex.migration_s > 0.0) mig = g.add("experts.migrate", Resource::LinkH2D, ex.migration_s);

  auto stage_deps = [&](Device d) {
    std::vector<std::int64_t> deps = op2_done;
    if (act >= 0 && ex.activation_dest == d) deps.push_back(act);
    if (d == Device::Gpu && mig >= 0) deps.push_back(mig);
    return deps;
  };
  if (s.gpu_runs_experts())
    gpu = g.add("experts.gpu", Resource::GpuCompute, ex.latency_gpu, stage_deps(Device::Gpu));
  if (s.exp_c > 0)
    cpu = g.add("experts.cpu", Resource::CpuCompute, ex.latency_cpu, stage_deps(Device::Cpu));
  if (ex.t_handoff > 0.0) handoff = g.add("experts.handoff", Resource::LinkH2D, ex.t_handoff, {cpu});

  std::vector<std::int64_t> merge_deps;
  for (auto id : {gpu, cpu, handoff})
    if (id >= 0) merge_deps.push_back(id);
  if (merge_deps.empty()) merge_deps = op2_done;  // no activated experts
  g.add("merge", compute_of(s.expert_home()), 0.0, std::move(merge_deps));
  return g;
}

ModelComparison make_comparison(double analytical_s, double simulated_s) {
  ModelComparison c{analytical_s, simulated_s, 1.0};
  if (analytical_s > 0.0) c.ratio = simulated_s / analytical_s;
  return c;
}

ModelComparison compare_to_model(const AllocationStrategy& s, const Phase& phase,
                                 const CostModel& cm) {
  const double N = static_cast<double>(cm.model().num_layers);
  const Timeline tl = simulate(build_task_graph(s, phase, cm),
                               SimOptions{cm.system().link().duplex()});
  return make_comparison(N * cm.layer_latency(s, phase).total, N * tl.makespan);
}

PlanSimulation simulate_plan(const AllocationStrategy& prefill, const AllocationStrategy& decode,
                             const CostModel& cm, std::int64_t decode_step,
                             bool all_decode_steps) {
  const auto& batch = cm.batch();
  if (batch.output_len > 0 && (decode_step < 1 || decode_step > batch.output_len))
    throw std::invalid_argument(
        fmt::format("decode step must be in [1, {}]", batch.output_len));
  const SimOptions opt{cm.system().link().duplex()};
  const double N = static_cast<double>(cm.model().num_layers);
  const bool reuse = cm.options().reuse_migrated_in_decode;

  PlanSimulation out;
  const Phase pf = cm.peak_phase(PhaseKind::Prefill);
  out.prefill_graph = build_task_graph(prefill, pf, cm);
  out.prefill_timeline = simulate(out.prefill_graph, opt);
  out.prefill = make_comparison(N * cm.layer_latency(prefill, pf).total,
                                N * out.prefill_timeline.makespan);

  if (batch.output_len > 0) {
    const auto run_step = [&](std::int64_t t, TaskGraph* keep_graph, Timeline* keep_tl) {
      const Phase ph = cm.decode_phase(t);
      const bool charge = !(reuse && t > 1);
      TaskGraph g = build_task_graph(decode, ph, cm, charge);
      Timeline tl = simulate(g, opt);
      const double analytical = N * cm.layer_latency(decode, ph, charge).total;
      const double simulated = N * tl.makespan;
      if (keep_graph) {
        *keep_graph = std::move(g);
        *keep_tl = std::move(tl);
      }
      return std::pair{analytical, simulated};
    };
    double a = 0.0, sim = 0.0;
    if (all_decode_steps) {
      for (std::int64_t t = 1; t <= batch.output_len; ++t) {
        const bool keep = t == decode_step;
        const auto [ta, ts] = run_step(t, keep ? &out.decode_graph : nullptr,
                                       keep ? &out.decode_timeline : nullptr);
        a += ta;
        sim += ts;
      }
    } else {
      std::tie(a, sim) = run_step(decode_step, &out.decode_graph, &out.decode_timeline);
    }
    out.decode = make_comparison(a, sim);
  }
  out.total = make_comparison(out.prefill.analytical_s + out.decode.analytical_s,
                              out.prefill.simulated_s + out.decode.simulated_s);
  return out;
}

nlohmann::json to_trace_events(const TaskGraph& graph, const Timeline& timeline,
                               const SimOptions& options) {
  nlohmann::json events = nlohmann::json::array();
  for (const auto& t : graph.tasks) {
    const auto& e = timeline.entries[static_cast<std::size_t>(t.id)];
    events.push_back({{"name", t.name},
                      {"res", std::string(to_string(t.resource))},
                      {"ts", e.start * 1e6},
                      {"dur", (e.end - e.start) * 1e6},
                      {"ph", "X"},
                      {"pid", 0},
                      {"tid", lane_of(t.resource, options)},
                      {"args", {{"id", t.id}}}});
  }
  return nlohmann::json{{"traceEvents", std::move(events)}, {"displayTimeUnit", "ms"}};
}

}  // namespace moeplan
