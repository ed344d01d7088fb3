// SPDX-License-Identifier: Apache-2.0

#include "moeplan/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "CLI11.hpp"
#include "moeplan/eas.hpp"
#include "moeplan/io.hpp"
#include "moeplan/planner.hpp"
#include "moeplan/rng.hpp"
#include "moeplan/sim.hpp"

#ifndef MOEPLAN_VERSION
#define MOEPLAN_VERSION "0.0.0"
#endif

namespace moeplan::cli {

const char* version() { return MOEPLAN_VERSION; }

namespace {

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  std::vector<std::string> args;
  std::ostream& out;
  std::ostream& err;
  RunOptions options;
  json manifest_inputs = json::array();
  json report;

  void record_input(const std::string& role, const std::string& path) {
    manifest_inputs.push_back(
        {{"role", role}, {"path", path}, {"fnv1a64", hex64(fnv1a64(read_file(path)))}});
  }

  void write(const std::string& path, std::string_view contents) const {
    if (options.write_outputs && !path.empty()) write_file(path, contents);
  }

  void finish(const std::string& command, std::uint64_t seed, json result) {
    report = {{"manifest",
               {{"format", "moeplan-report"},
                {"version", kRecordVersion},
                {"command", command},
                {"args", args},
                {"inputs", manifest_inputs},
                {"seed", seed},
                {"tool_version", version()},
                {"timestamp", timestamp()}}},
              {"result", std::move(result)}};
  }

  static std::string timestamp() {
    const std::time_t now =
        std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }
};

std::string dump_report(const json& report) { return report.dump(2) + "\n"; }

struct ConfigArgs {
  std::string system, model, batch;
  std::vector<std::string> sets;

  void add_to(CLI::App* app, bool required = true) {
    auto* s = app->add_option("--system", system, "hardware config (JSON)");
    auto* m = app->add_option("--model", model, "model config (JSON)");
    auto* b = app->add_option("--batch", batch, "batch config (JSON)");
    if (required) {
      s->required();
      m->required();
      b->required();
    }
    app->add_option("--set", sets, "override a config value, e.g. gpu.vram_bytes=24e9");
  }

  ConfigSet load(Context& ctx) const {
    ConfigSet c;
    c.system = load_json_file(system);
    c.model = load_json_file(model);
    c.batch = load_json_file(batch);
    c.system_source = system;
    c.model_source = model;
    c.batch_source = batch;
    ctx.record_input("system", system);
    ctx.record_input("model", model);
    ctx.record_input("batch", batch);
    for (const auto& s : sets) c.apply(s);
    return c;
  }
};

Device parse_device(const std::string& text, const std::string& what) {
  if (text == "gpu" || text == "GPU") return Device::Gpu;
  if (text == "cpu" || text == "CPU") return Device::Cpu;
  throw UsageError(fmt::format("{}: expected gpu or cpu, got '{}'", what, text));
}

std::array<std::optional<Device>, 3> parse_force(const std::vector<std::string>& items) {
  std::array<std::optional<Device>, 3> out{};
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq != 2 || item[0] != 'x' || item[1] < '0' || item[1] > '2')
      throw UsageError(fmt::format("--force '{}': expected x0|x1|x2=gpu|cpu", item));
    out[static_cast<std::size_t>(item[1] - '0')] = parse_device(item.substr(3), "--force " + item);
  }
  return out;
}

// Planner inputs shared by plan, sweep and simulate.
struct PlanArgs {
  ConfigArgs configs;
  std::string map_path, trace_path, residency_path;
  std::vector<std::string> force;
  std::vector<std::int64_t> m_candidates;
  bool forbid_cpu_attention = false;
  bool reuse_migrated = false;
  double vram_slack = 0.05;
  unsigned workers = 1;

  void add_to(CLI::App* app) {
    configs.add_to(app);
    app->add_option("--map", map_path, "activation map (JSON) for skewed expert shares");
    app->add_option("--trace", trace_path, "routing trace; its exact activation map is used");
    app->add_option("--residency", residency_path, "pin the resident expert set (JSON)");
    app->add_option("--force", force, "force a placement, e.g. x1=gpu");
    app->add_option("--m", m_candidates, "micro-batch candidates")->delimiter(',');
    app->add_flag("--forbid-cpu-attention", forbid_cpu_attention);
    app->add_flag("--reuse-migrated", reuse_migrated,
                  "keep migrated expert weights across decode steps");
    app->add_option("--vram-slack", vram_slack, "VRAM workspace fraction")
        ->check(CLI::Range(0.0, 0.99));
    app->add_option("--workers", workers, "planner threads")->check(CLI::Range(1u, 256u));
  }

  PlanRequest request(Context& ctx) const {
    const ConfigSet cs = configs.load(ctx);
    PlanRequest req{cs.system_spec(), cs.model_config(), cs.batch_config()};
    if (!map_path.empty() && !trace_path.empty())
      throw UsageError("--map and --trace are mutually exclusive");
    if (!map_path.empty()) {
      req.activation_map = activation_map_from_json(load_json_file(map_path), map_path);
      ctx.record_input("activation_map", map_path);
    }
    if (!trace_path.empty()) {
      req.activation_map = exact_activation_map(read_trace(trace_path));
      ctx.record_input("trace", trace_path);
    }
    if (!residency_path.empty()) {
      req.residency = residency_from_json(load_json_file(residency_path), residency_path);
      ctx.record_input("residency", residency_path);
    }
    req.m_candidates = m_candidates;
    req.constraints.vram_slack_fraction = vram_slack;
    req.constraints.forbid_cpu_attention = forbid_cpu_attention;
    req.constraints.force_placement = parse_force(force);
    req.reuse_migrated_in_decode = reuse_migrated;
    req.workers = workers;
    try {
      req.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    return req;
  }
};

// Everything needed to rebuild the cost model of a saved plan.
json request_to_json(const PlanRequest& req) {
  return {{"system", to_json(req.system)},
          {"model", to_json(req.model)},
          {"batch", to_json(req.batch)},
          {"activation_map", req.activation_map ? to_json(*req.activation_map) : json(nullptr)},
          {"residency", req.residency ? to_json(*req.residency) : json(nullptr)},
          {"vram_slack_fraction", req.constraints.vram_slack_fraction},
          {"reuse_migrated_in_decode", req.reuse_migrated_in_decode}};
}

PlanRequest request_from_json(const json& j, const std::string& source) {
  for (const char* key : {"system", "model", "batch"})
    if (!j.contains(key)) throw ConfigError(fmt::format("{}: key 'inputs.{}': missing", source, key));
  PlanRequest req{system_from_json(j.at("system"), source), model_from_json(j.at("model"), source),
                  batch_from_json(j.at("batch"), source)};
  if (j.contains("activation_map") && !j.at("activation_map").is_null())
    req.activation_map = activation_map_from_json(j.at("activation_map"), source);
  if (j.contains("residency") && !j.at("residency").is_null())
    req.residency = residency_from_json(j.at("residency"), source);
  req.constraints.vram_slack_fraction = j.value("vram_slack_fraction", 0.05);
  req.reuse_migrated_in_decode = j.value("reuse_migrated_in_decode", false);
  return req;
}

std::string placement_text(const AllocationStrategy& s) {
  return fmt::format("{}/{}/{}", to_string(s.x(0)), to_string(s.x(1)), to_string(s.x(2)));
}

void print_strategy_table(std::ostream& os, const Plan& p) {
  const auto& a = p.prefill_strategy;
  const auto& b = p.decode_strategy;
  fmt::print(os, "{:<22}{:>16}{:>16}\n", "strategy", "prefill", "decode");
  fmt::print(os, "{:<22}{:>16}{:>16}\n", "placement x0/x1/x2", placement_text(a),
             placement_text(b));
  fmt::print(os, "{:<22}{:>16}{:>16}\n", "resident experts", a.resident_experts,
             b.resident_experts);
  fmt::print(os, "{:<22}{:>16}{:>16}\n", "exp_r / exp_m / exp_c",
             fmt::format("{}/{}/{}", a.exp_r, a.exp_m, a.exp_c),
             fmt::format("{}/{}/{}", b.exp_r, b.exp_m, b.exp_c));
  fmt::print(os, "{:<22}{:>16}{:>16}\n", "micro-batch m", a.micro_batch, b.micro_batch);
}

void print_layer_table(std::ostream& os, const std::string& title, const LayerCost& lc) {
  static constexpr const char* kNames[] = {"qkv", "attention", "out_proj", "experts"};
  fmt::print(os, "\n{} (seconds per layer)\n", title);
  fmt::print(os, "{:<10}{:>14}{:>14}{:>14}{:>14}\n", "op", "t_load", "t_comp", "t_store", "sum");
  for (std::size_t i = 0; i < 4; ++i)
    fmt::print(os, "{:<10}{:>14.6e}{:>14.6e}{:>14.6e}{:>14.6e}\n", kNames[i], lc.ops[i].t_load,
               lc.ops[i].t_comp, lc.ops[i].t_store, lc.ops[i].sum());
  fmt::print(os, "{:<10}{:>56.6e}\n", "total", lc.total);
}

void print_vram_table(std::ostream& os, const VramBudget& pre, const VramBudget& dec) {
  fmt::print(os, "\nVRAM budget (GB){:>14}{:>14}\n", "prefill", "decode");
  auto row = [&](const char* name, double a, double b) {
    fmt::print(os, "{:<16}{:>14.3f}{:>14.3f}\n", name, a / 1e9, b / 1e9);
  };
  row("resident", pre.resident_expert_bytes, dec.resident_expert_bytes);
  row("non-MoE weights", pre.non_moe_weight_bytes, dec.non_moe_weight_bytes);
  row("intermediate", pre.intermediate_bytes, dec.intermediate_bytes);
  row("KV cache", pre.kv_cache_bytes, dec.kv_cache_bytes);
  row("workspace", pre.workspace_bytes, dec.workspace_bytes);
  row("used", pre.used(), dec.used());
  row("capacity", pre.capacity, dec.capacity);
}

void print_plan(std::ostream& os, const Plan& p, const LayerCost& pre_layer,
                const std::optional<LayerCost>& dec_layer) {
  print_strategy_table(os, p);
  print_layer_table(os, "prefill layer", pre_layer);
  if (dec_layer) print_layer_table(os, "decode layer, first step", *dec_layer);
  print_vram_table(os, p.vram_prefill, p.vram_decode);
  fmt::print(os, "\npredicted prefill {:.6g} s, decode {:.6g} s, total {:.6g} s\n",
             p.predicted.prefill_s, p.predicted.decode_s, p.predicted.total_s);
  if (p.tokens_per_s) fmt::print(os, "predicted throughput {:.6g} tokens/s\n", *p.tokens_per_s);
}

json layer_costs_json(const CostModel& cm, const Plan& p) {
  json j{{"prefill",
          to_json(cm.layer_latency(p.prefill_strategy, cm.peak_phase(PhaseKind::Prefill)))}};
  if (cm.batch().output_len > 0)
    j["decode_first_step"] = to_json(cm.layer_latency(p.decode_strategy, cm.decode_phase(1)));
  return j;
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

struct PlanCmd {
  PlanArgs plan;
  std::string out;
};

void run_plan(const PlanCmd& a, Context& ctx) {
  const PlanRequest req = a.plan.request(ctx);
  const Plan p = plan(req);
  const CostModel cm = req.cost_model();
  const LayerCost pre = cm.layer_latency(p.prefill_strategy, cm.peak_phase(PhaseKind::Prefill));
  std::optional<LayerCost> dec;
  if (req.batch.output_len > 0) dec = cm.layer_latency(p.decode_strategy, cm.decode_phase(1));
  print_plan(ctx.out, p, pre, dec);
  ctx.finish("plan", 0,
             {{"inputs", request_to_json(req)},
              {"plan", to_json(p)},
              {"layer_costs", layer_costs_json(cm, p)}});
  ctx.write(a.out, dump_report(ctx.report));
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepCmd {
  PlanArgs plan;
  std::string mode = "coalesced";
  std::string phase = "prefill";
  std::vector<std::int64_t> partition;
  std::string out, report;
};

void run_sweep(const SweepCmd& a, Context& ctx) {
  const PlanRequest req = a.plan.request(ctx);
  SweepOptions opt;
  opt.mode = a.mode == "microbatched" ? ExpertMode::MicroBatched : ExpertMode::Coalesced;
  opt.phase = a.phase == "decode" ? PhaseKind::DecodeStep : PhaseKind::Prefill;
  if (!a.partition.empty()) {
    if (a.partition.size() != 3) throw UsageError("--partition needs exp_r,exp_m,exp_c");
    opt.partition = std::array{a.partition[0], a.partition[1], a.partition[2]};
  }
  std::vector<SweepRow> rows;
  try {
    rows = sweep_microbatch(req, opt);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  std::string csv = "m,expert_s,nonexpert_s,total_s\n";
  json jrows = json::array();
  for (const auto& r : rows) {
    csv += fmt::format("{},{},{},{}\n", r.m, format_double(r.expert_s),
                       format_double(r.nonexpert_s), format_double(r.total_s));
    jrows.push_back({{"m", r.m},
                     {"expert_s", r.expert_s},
                     {"nonexpert_s", r.nonexpert_s},
                     {"total_s", r.total_s}});
  }
  ctx.finish("sweep", 0, {{"mode", a.mode}, {"phase", a.phase}, {"rows", jrows}});
  if (a.out.empty()) {
    ctx.out << csv;
  } else {
    ctx.write(a.out, csv);
    fmt::print(ctx.out, "wrote {} rows to {}\n", rows.size(), a.out);
  }
  const std::string report = !a.report.empty() ? a.report
                             : a.out.empty()   ? std::string{}
                                               : a.out + ".report.json";
  ctx.write(report, dump_report(ctx.report));
}

// ---------------------------------------------------------------------------
// tracegen
// ---------------------------------------------------------------------------

struct TracegenCmd {
  SyntheticTraceConfig cfg;
  std::string out, report;
};

void run_tracegen(const TracegenCmd& a, Context& ctx) {
  RoutingTrace trace;
  try {
    trace = generate_synthetic_trace(a.cfg);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  std::ostringstream ss;
  write_trace(ss, trace);
  const std::string text = ss.str();
  const auto& c = a.cfg;
  ctx.finish("tracegen", c.seed,
             {{"config",
               {{"num_samples", c.num_samples},
                {"embedding_dim", c.embedding_dim},
                {"num_layers", c.num_layers},
                {"experts_per_layer", c.experts_per_layer},
                {"top_k", c.top_k},
                {"num_latent_topics", c.num_latent_topics},
                {"zipf_exponent", c.zipf_exponent},
                {"topic_dispersion", c.topic_dispersion},
                {"topic_separation", c.topic_separation},
                {"min_tokens", c.min_tokens},
                {"max_tokens", c.max_tokens}}},
              {"samples", trace.size()},
              {"trace_fnv1a64", hex64(fnv1a64(text))}});
  ctx.write(a.out, text);
  fmt::print(ctx.out, "generated {} samples ({} layers x {} experts), trace hash {}\n",
             trace.size(), trace.num_layers, trace.experts_per_layer,
             ctx.report["result"]["trace_fnv1a64"].get<std::string>());
  ctx.write(a.report.empty() ? a.out + ".report.json" : a.report, dump_report(ctx.report));
}

// ---------------------------------------------------------------------------
// stratify / hitratio
// ---------------------------------------------------------------------------

struct EasArgs {
  std::string trace;
  std::int64_t clusters = 8;
  double ratio = 0.05;
  std::int64_t max_iters = 100;
  std::uint64_t seed = 0;

  void add_to(CLI::App* app) {
    app->add_option("--trace", trace, "routing trace (JSON lines)")->required();
    app->add_option("--clusters", clusters, "number of strata K");
    app->add_option("--ratio", ratio, "fraction of each stratum probed");
    app->add_option("--max-iters", max_iters, "k-means iteration cap");
    app->add_option("--seed", seed, "random seed");
  }

  StratificationConfig config() const {
    StratificationConfig c;
    c.num_clusters = clusters;
    c.sample_ratio = ratio;
    c.max_kmeans_iters = max_iters;
    c.seed = seed;
    return c;
  }
};

std::int64_t capacity_count(double fraction, std::int64_t experts) {
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw UsageError(fmt::format("capacity fraction {} outside [0, 1]", fraction));
  return std::llround(fraction * static_cast<double>(experts));
}

// Largest per-layer difference in normalised activation frequency.
double map_gap(const ActivationMap& a, const ActivationMap& b) {
  double gap = 0.0;
  for (std::int64_t l = 0; l < a.num_layers(); ++l) {
    const auto fa = a.frequencies(l);
    const auto fb = b.frequencies(l);
    for (std::size_t e = 0; e < fa.size(); ++e) gap = std::max(gap, std::abs(fa[e] - fb[e]));
  }
  return gap;
}

struct StratifyCmd {
  EasArgs eas;
  std::optional<std::int64_t> capacity;
  double capacity_fraction = 0.25;
  std::string out, residency_out, map_out;
};

void run_stratify(const StratifyCmd& a, Context& ctx) {
  const RoutingTrace trace = read_trace(a.eas.trace);
  ctx.record_input("trace", a.eas.trace);
  const std::int64_t cap =
      a.capacity ? *a.capacity : capacity_count(a.capacity_fraction, trace.experts_per_layer);
  if (cap < 0 || cap > trace.experts_per_layer)
    throw UsageError(fmt::format("--capacity must be in [0, {}]", trace.experts_per_layer));
  StratificationResult r;
  try {
    r = stratify(trace, a.eas.config(), cap);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const ActivationMap exact = exact_activation_map(trace);
  const double eas_hit = hit_ratio(trace, r.residency);
  const double oracle_hit = hit_ratio(trace, select_resident_experts(exact, cap));
  const double gap = map_gap(r.probed, exact);

  fmt::print(ctx.out, "samples {}  clusters {}  k-means iterations {}  distortion {:.6g}\n",
             trace.size(), r.clusters.k, r.clusters.iterations, r.clusters.distortion());
  fmt::print(ctx.out, "prototypes probed {} ({:.2f}% of samples)\n", r.prototypes.size(),
             100.0 * static_cast<double>(r.prototypes.size()) /
                 static_cast<double>(trace.size()));
  fmt::print(ctx.out, "capacity {} of {} experts per layer\n", cap, trace.experts_per_layer);
  fmt::print(ctx.out, "hit ratio: stratified {:.4f}  exact-map oracle {:.4f}\n", eas_hit,
             oracle_hit);
  fmt::print(ctx.out, "activation map gap (max |freq difference|) {:.6g}\n", gap);

  ctx.finish("stratify", a.eas.seed,
             {{"capacity_per_layer", cap},
              {"kmeans",
               {{"iterations", r.clusters.iterations},
                {"distortion_history", r.clusters.distortion_history}}},
              {"prototypes", r.prototypes},
              {"hit_ratio", {{"stratified", eas_hit}, {"oracle", oracle_hit}}},
              {"map_gap", gap},
              {"residency", to_json(r.residency)},
              {"probed_map", to_json(r.probed)}});
  ctx.write(a.out, dump_report(ctx.report));
  ctx.write(a.residency_out, to_json(r.residency).dump(2) + "\n");
  ctx.write(a.map_out, to_json(r.probed).dump(2) + "\n");
}

struct HitratioCmd {
  EasArgs eas;
  std::vector<double> capacities{0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0};
  std::int64_t random_seeds = 50;
  std::string out, report;
};

void run_hitratio(const HitratioCmd& a, Context& ctx) {
  const RoutingTrace trace = read_trace(a.eas.trace);
  ctx.record_input("trace", a.eas.trace);
  if (a.random_seeds < 1) throw UsageError("--random-seeds must be >= 1");
  StratificationResult strat;
  try {
    strat = stratify(trace, a.eas.config(), 0);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const ActivationMap exact = exact_activation_map(trace);
  const auto n = trace.experts_per_layer;

  std::vector<std::int64_t> caps;
  for (double f : a.capacities) caps.push_back(capacity_count(f, n));
  std::sort(caps.begin(), caps.end());
  caps.erase(std::unique(caps.begin(), caps.end()), caps.end());

  std::string csv = "capacity,eas,random,oracle\n";
  json rows = json::array();
  for (auto cap : caps) {
    const double eas = hit_ratio(trace, select_resident_experts(strat.probed, cap));
    const double oracle = hit_ratio(trace, select_resident_experts(exact, cap));
    double random = 0.0;
    for (std::int64_t s = 0; s < a.random_seeds; ++s)
      random += hit_ratio(trace, random_baseline(n, cap, trace.num_layers,
                                                 Rng::derive(a.eas.seed, 1000 + s)));
    random /= static_cast<double>(a.random_seeds);
    csv += fmt::format("{},{},{},{}\n", cap, format_double(eas), format_double(random),
                       format_double(oracle));
    rows.push_back({{"capacity", cap}, {"eas", eas}, {"random", random}, {"oracle", oracle}});
  }
  ctx.finish("hitratio", a.eas.seed,
             {{"experts_per_layer", n}, {"random_seeds", a.random_seeds}, {"rows", rows}});
  if (a.out.empty()) {
    ctx.out << csv;
  } else {
    ctx.write(a.out, csv);
    fmt::print(ctx.out, "wrote {} rows to {}\n", caps.size(), a.out);
  }
  const std::string report = !a.report.empty() ? a.report
                             : a.out.empty()   ? std::string{}
                                               : a.out + ".report.json";
  ctx.write(report, dump_report(ctx.report));
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateCmd {
  PlanArgs plan;
  std::string plan_file;
  std::int64_t decode_step = 1;
  bool all_decode_steps = false;
  std::string out, timeline;
};

void run_simulate(const SimulateCmd& a, Context& ctx) {
  std::optional<PlanRequest> req_holder;
  Plan p;
  if (a.plan_file.empty()) {
    req_holder = a.plan.request(ctx);
    p = plan(*req_holder);
  } else {
    const json j = load_json_file(a.plan_file);
    ctx.record_input("plan", a.plan_file);
    const json& result = j.contains("result") ? j.at("result") : j;
    for (const char* key : {"inputs", "plan"})
      if (!result.is_object() || !result.contains(key))
        throw ConfigError(fmt::format("{}: key 'result.{}': missing", a.plan_file, key));
    req_holder = request_from_json(result.at("inputs"), a.plan_file);
    p = plan_from_json(result.at("plan"), a.plan_file);
  }
  const PlanRequest& req = *req_holder;
  const CostModel cm = req.cost_model();
  PlanSimulation sim;
  try {
    sim = simulate_plan(p.prefill_strategy, p.decode_strategy, cm, a.decode_step,
                        a.all_decode_steps);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const SimOptions opt{req.system.link().duplex()};
  auto errors = validate_timeline(sim.prefill_graph, sim.prefill_timeline, opt);
  if (req.batch.output_len > 0) {
    auto more = validate_timeline(sim.decode_graph, sim.decode_timeline, opt);
    errors.insert(errors.end(), more.begin(), more.end());
  }

  fmt::print(ctx.out, "{:<10}{:>16}{:>16}{:>10}\n", "phase", "analytical_s", "simulated_s",
             "ratio");
  auto row = [&](const char* name, const ModelComparison& c) {
    fmt::print(ctx.out, "{:<10}{:>16.6e}{:>16.6e}{:>10.4f}\n", name, c.analytical_s,
               c.simulated_s, c.ratio);
  };
  row("prefill", sim.prefill);
  if (req.batch.output_len > 0) row("decode", sim.decode);
  row("total", sim.total);
  fmt::print(ctx.out, "decode figures cover {}\n",
             a.all_decode_steps ? std::string("every step")
                                : fmt::format("step {} only", a.decode_step));
  fmt::print(ctx.out, "timeline validity: {}\n", errors.empty() ? "ok" : "VIOLATED");
  for (const auto& e : errors) fmt::print(ctx.out, "  {}\n", e);

  auto comparison = [](const ModelComparison& c) {
    return json{{"analytical_s", c.analytical_s},
                {"simulated_s", c.simulated_s},
                {"ratio", c.ratio}};
  };
  json events = to_trace_events(sim.prefill_graph, sim.prefill_timeline, opt)["traceEvents"];
  if (req.batch.output_len > 0) {
    for (auto& e : to_trace_events(sim.decode_graph, sim.decode_timeline, opt)["traceEvents"]) {
      e["pid"] = 1;
      events.push_back(e);
    }
  }
  ctx.finish("simulate", 0,
             {{"prefill", comparison(sim.prefill)},
              {"decode", comparison(sim.decode)},
              {"total", comparison(sim.total)},
              {"decode_step", a.decode_step},
              {"all_decode_steps", a.all_decode_steps},
              {"makespan_per_layer",
               {{"prefill", sim.prefill_timeline.makespan},
                {"decode", sim.decode_timeline.makespan}}},
              {"timeline_valid", errors.empty()}});
  ctx.write(a.out, dump_report(ctx.report));
  ctx.write(a.timeline, json{{"traceEvents", events}, {"displayTimeUnit", "ms"}}.dump(1) + "\n");
  if (!errors.empty()) throw std::runtime_error("simulated timeline violates its invariants");
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportCmd {
  std::string in;
  bool verify = false;
};

void render_report(std::ostream& os, const json& report) {
  const json& m = report.at("manifest");
  fmt::print(os, "command   {}\n", m.value("command", "?"));
  fmt::print(os, "version   {}\n", m.value("tool_version", "?"));
  fmt::print(os, "timestamp {}\n", m.value("timestamp", "?"));
  fmt::print(os, "seed      {}\n", m.value("seed", json(0)).dump());
  for (const auto& in : m.value("inputs", json::array()))
    fmt::print(os, "input     {:<16} {} ({})\n", in.value("role", ""), in.value("path", ""),
               in.value("fnv1a64", ""));
  const json& r = report.at("result");
  const std::string cmd = m.value("command", "");
  if (cmd == "plan") {
    const Plan p = plan_from_json(r.at("plan"), "report");
    fmt::print(os, "\n");
    print_strategy_table(os, p);
    fmt::print(os, "\npredicted total {:.6g} s", p.predicted.total_s);
    if (p.tokens_per_s) fmt::print(os, ", {:.6g} tokens/s", *p.tokens_per_s);
    fmt::print(os, "\n");
  } else if (cmd == "sweep" || cmd == "hitratio") {
    const json& rows = r.at("rows");
    if (!rows.empty()) {
      fmt::print(os, "\n");
      std::vector<std::string> keys;
      for (const auto& [k, _] : rows.front().items()) keys.push_back(k);
      for (const auto& k : keys) fmt::print(os, "{:>16}", k);
      fmt::print(os, "\n");
      for (const auto& row : rows) {
        for (const auto& k : keys) fmt::print(os, "{:>16.6g}", row.at(k).get<double>());
        fmt::print(os, "\n");
      }
    }
  } else {
    fmt::print(os, "\n{}\n", r.dump(2));
  }
}

RunResult dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
                   const RunOptions& options);

int run_report(const ReportCmd& a, Context& ctx) {
  const json report = load_json_file(a.in);
  if (!report.contains("manifest") || !report.contains("result"))
    throw ConfigError(fmt::format("{}: not a moeplan report (needs manifest and result)", a.in));
  render_report(ctx.out, report);
  if (!a.verify) return kOk;

  const json& manifest = report.at("manifest");
  bool ok = true;
  for (const auto& in : manifest.value("inputs", json::array())) {
    const std::string path = in.value("path", "");
    std::string now;
    try {
      now = hex64(fnv1a64(read_file(path)));
    } catch (const ConfigError&) {
      now = "missing";
    }
    if (now != in.value("fnv1a64", "")) {
      fmt::print(ctx.out, "verify: input {} changed ({} -> {})\n", path,
                 in.value("fnv1a64", ""), now);
      ok = false;
    }
  }
  std::ostringstream sink;
  const auto rerun = dispatch(manifest.at("args").get<std::vector<std::string>>(), sink, sink,
                              RunOptions{false});
  if (rerun.exit_code != kOk) {
    fmt::print(ctx.out, "verify: re-run failed with exit code {}\n", rerun.exit_code);
    return kFailure;
  }
  if (rerun.report.at("result") != report.at("result")) {
    fmt::print(ctx.out, "verify: re-run result differs\n");
    ok = false;
  }
  fmt::print(ctx.out, "verify: {}\n", ok ? "reproduced" : "MISMATCH");
  return ok ? kOk : kFailure;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

RunResult dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
                   const RunOptions& options) {
  CLI::App app{"moeplan: MoE CPU-GPU inference planner and pipeline simulator", "moeplan"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(version()));

  PlanCmd plan_cmd;
  auto* plan_app = app.add_subcommand("plan", "search the minimum-latency strategy");
  plan_cmd.plan.add_to(plan_app);
  plan_app->add_option("--out", plan_cmd.out, "write the plan report (JSON)");

  SweepCmd sweep_cmd;
  auto* sweep_app = app.add_subcommand("sweep", "micro-batch sensitivity sweep (CSV)");
  sweep_cmd.plan.add_to(sweep_app);
  sweep_app->add_option("--mode", sweep_cmd.mode, "expert execution")
      ->check(CLI::IsMember({"coalesced", "microbatched"}));
  sweep_app->add_option("--phase", sweep_cmd.phase)->check(CLI::IsMember({"prefill", "decode"}));
  sweep_app->add_option("--partition", sweep_cmd.partition, "exp_r,exp_m,exp_c")
      ->delimiter(',');
  sweep_app->add_option("--out", sweep_cmd.out, "CSV path (default: stdout)");
  sweep_app->add_option("--report", sweep_cmd.report, "report path (default: OUT.report.json)");

  TracegenCmd tg;
  auto* tg_app = app.add_subcommand("tracegen", "generate a synthetic routing trace");
  tg_app->add_option("--out", tg.out, "trace path (JSON lines)")->required();
  tg_app->add_option("--report", tg.report, "report path (default: OUT.report.json)");
  tg_app->add_option("--samples", tg.cfg.num_samples);
  tg_app->add_option("--embedding-dim", tg.cfg.embedding_dim);
  tg_app->add_option("--layers", tg.cfg.num_layers);
  tg_app->add_option("--experts", tg.cfg.experts_per_layer);
  tg_app->add_option("--top-k", tg.cfg.top_k);
  tg_app->add_option("--topics", tg.cfg.num_latent_topics);
  tg_app->add_option("--zipf", tg.cfg.zipf_exponent);
  tg_app->add_option("--dispersion", tg.cfg.topic_dispersion);
  tg_app->add_option("--separation", tg.cfg.topic_separation);
  tg_app->add_option("--min-tokens", tg.cfg.min_tokens);
  tg_app->add_option("--max-tokens", tg.cfg.max_tokens);
  tg_app->add_option("--seed", tg.cfg.seed);

  StratifyCmd st;
  auto* st_app = app.add_subcommand("stratify", "pick resident experts from a trace");
  st.eas.add_to(st_app);
  st_app->add_option("--capacity", st.capacity, "resident experts per layer");
  st_app->add_option("--capacity-fraction", st.capacity_fraction,
                     "resident experts as a fraction of the pool (default 0.25)");
  st_app->add_option("--out", st.out, "report path (JSON)");
  st_app->add_option("--residency-out", st.residency_out, "residency plan path (JSON)");
  st_app->add_option("--map-out", st.map_out, "probed activation map path (JSON)");

  HitratioCmd hr;
  auto* hr_app = app.add_subcommand("hitratio", "hit ratio vs capacity curves (CSV)");
  hr.eas.add_to(hr_app);
  hr_app->add_option("--capacities", hr.capacities, "capacity fractions")->delimiter(',');
  hr_app->add_option("--random-seeds", hr.random_seeds, "random baselines averaged");
  hr_app->add_option("--out", hr.out, "CSV path (default: stdout)");
  hr_app->add_option("--report", hr.report, "report path (default: OUT.report.json)");

  SimulateCmd sim;
  auto* sim_app = app.add_subcommand("simulate", "simulate a plan's pipeline");
  sim.plan.configs.add_to(sim_app, false);
  sim_app->add_option("--plan", sim.plan_file, "plan report from `moeplan plan --out`");
  sim_app->add_option("--map", sim.plan.map_path);
  sim_app->add_option("--trace", sim.plan.trace_path);
  sim_app->add_option("--residency", sim.plan.residency_path);
  sim_app->add_option("--force", sim.plan.force);
  sim_app->add_option("--m", sim.plan.m_candidates)->delimiter(',');
  sim_app->add_option("--decode-step", sim.decode_step, "decode step simulated (1-based)");
  sim_app->add_flag("--all-decode-steps", sim.all_decode_steps);
  sim_app->add_option("--out", sim.out, "report path (JSON)");
  sim_app->add_option("--timeline", sim.timeline, "trace-event timeline path (JSON)");

  ReportCmd rep;
  auto* rep_app = app.add_subcommand("report", "render a report; --verify re-runs it");
  rep_app->add_option("--in", rep.in, "report path")->required();
  rep_app->add_flag("--verify", rep.verify, "re-run the manifest and compare");

  Context ctx{args, out, err, options};
  RunResult result;
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    if (plan_app->parsed()) {
      run_plan(plan_cmd, ctx);
    } else if (sweep_app->parsed()) {
      run_sweep(sweep_cmd, ctx);
    } else if (tg_app->parsed()) {
      run_tracegen(tg, ctx);
    } else if (st_app->parsed()) {
      run_stratify(st, ctx);
    } else if (hr_app->parsed()) {
      run_hitratio(hr, ctx);
    } else if (sim_app->parsed()) {
      const bool have_configs =
          !sim.plan.configs.system.empty() && !sim.plan.configs.model.empty() &&
          !sim.plan.configs.batch.empty();
      if (sim.plan_file.empty() && !have_configs)
        throw UsageError("simulate needs --plan or --system/--model/--batch");
      run_simulate(sim, ctx);
    } else if (rep_app->parsed()) {
      result.exit_code = run_report(rep, ctx);
      return result;
    }
  } catch (const CLI::ParseError& e) {
    result.exit_code = app.exit(e, out, err) == 0 ? kOk : kConfigError;
    return result;
  } catch (const UsageError& e) {
    fmt::print(err, "error: {}\n", e.what());
    result.exit_code = kConfigError;
    return result;
  } catch (const ConfigError& e) {
    fmt::print(err, "config error: {}\n", e.what());
    result.exit_code = kConfigError;
    return result;
  } catch (const NoFeasiblePlan& e) {
    fmt::print(err, "no feasible plan: {}\n", e.what());
    result.exit_code = kNoFeasiblePlan;
    return result;
  } catch (const ParseError& e) {
    fmt::print(err, "parse error: {}\n", e.what());
    result.exit_code = kParseError;
    return result;
  } catch (const std::exception& e) {
    fmt::print(err, "error: {}\n", e.what());
    result.exit_code = kFailure;
    return result;
  }
  result.report = std::move(ctx.report);
  return result;
}

}  // namespace

RunResult run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
              const RunOptions& options) {
  return dispatch(args, out, err, options);
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr).exit_code;
}

}  // namespace moeplan::cli
