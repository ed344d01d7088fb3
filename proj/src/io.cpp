// SPDX-License-Identifier: Apache-2.0

#include "moeplan/io.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

namespace moeplan {

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("{}: cannot open file", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("{}: cannot open for writing", path.string()));
  out << contents;
  if (!out) throw std::runtime_error(fmt::format("{}: write failed", path.string()));
}

json parse_json(std::string_view text, const std::string& source) {
  try {
    return json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    // nlohmann reports "... at line L, column C: ..."; keep it verbatim.
    throw ParseError(fmt::format("{}: {}", source, e.what()));
  }
}

json load_json_file(const std::filesystem::path& path) {
  return parse_json(read_file(path), path.string());
}

namespace {

std::vector<std::string> split_key(const std::string& key) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    parts.push_back(key.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return parts;
}

// Typed, strict access to one object of a config tree.
class Section {
 public:
  Section(const json& node, std::string source, std::string prefix)
      : node_(node), source_(std::move(source)), prefix_(std::move(prefix)) {
    if (!node_.is_object()) fail("", "expected an object");
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError(fmt::format("{}: key '{}': {}", source_, qualified(key), msg));
  }

  std::string qualified(const std::string& key) const {
    if (prefix_.empty()) return key;
    return key.empty() ? prefix_ : prefix_ + "." + key;
  }

  bool has(const std::string& key) const { return node_.contains(key); }

  Section child(const std::string& key) const {
    if (!has(key)) fail(key, "missing");
    seen_.insert(key);
    return Section(node_.at(key), source_, qualified(key));
  }

  double number(const std::string& key) const {
    const json& v = get(key);
    if (!v.is_number()) fail(key, fmt::format("expected a number, got {}", v.dump()));
    const double d = v.get<double>();
    if (!std::isfinite(d)) fail(key, "must be finite");
    return d;
  }

  double positive(const std::string& key) const {
    const double d = number(key);
    if (!(d > 0.0)) fail(key, fmt::format("must be > 0, got {}", d));
    return d;
  }

  double number_or(const std::string& key, double fallback) const {
    return has(key) ? number(key) : fallback;
  }

  std::int64_t integer(const std::string& key) const {
    const json& v = get(key);
    if (v.is_number_integer()) return v.get<std::int64_t>();
    if (v.is_number_float()) {
      const double d = v.get<double>();
      if (std::isfinite(d) && d == std::floor(d) && std::abs(d) < 9.0e15)
        return static_cast<std::int64_t>(d);
    }
    fail(key, fmt::format("expected an integer, got {}", v.dump()));
  }

  std::int64_t integer_or(const std::string& key, std::int64_t fallback) const {
    return has(key) ? integer(key) : fallback;
  }

  bool boolean_or(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const json& v = get(key);
    if (!v.is_boolean()) fail(key, fmt::format("expected true or false, got {}", v.dump()));
    return v.get<bool>();
  }

  std::string string_or(const std::string& key, const std::string& fallback) const {
    if (!has(key)) return fallback;
    const json& v = get(key);
    if (!v.is_string()) fail(key, fmt::format("expected a string, got {}", v.dump()));
    return v.get<std::string>();
  }

  const json& raw(const std::string& key) const { return get(key); }

  void reject_unknown() const {
    for (const auto& [k, _] : node_.items())
      if (!seen_.count(k)) fail(k, "unknown key");
  }

 private:
  const json& get(const std::string& key) const {
    if (!has(key)) fail(key, "missing");
    seen_.insert(key);
    return node_.at(key);
  }

  const json& node_;
  std::string source_;
  std::string prefix_;
  mutable std::set<std::string> seen_;
};

template <class F>
auto validated(const std::string& source, F&& make) {
  try {
    return make();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(fmt::format("{}: {}", source, e.what()));
  }
}

}  // namespace

void apply_override(json& tree, const std::string& assignment, const std::string& source) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError(fmt::format("--set '{}': expected key=value", assignment));
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  // Intermediate objects must exist; the leaf may be new (optional keys).
  // Unknown leaves are rejected when the tree is validated.
  json* node = &tree;
  const auto parts = split_key(key);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const bool leaf = i + 1 == parts.size();
    if (!node->is_object() || (!leaf && !node->contains(parts[i])))
      throw ConfigError(fmt::format("{}: key '{}': unknown key (from --set)", source, key));
    node = &(*node)[parts[i]];
  }
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  *node = std::move(value);
}

void ConfigSet::apply(const std::string& assignment) {
  const auto eq = assignment.find('=');
  const std::string key = assignment.substr(0, eq);
  const std::string head = split_key(key).front();
  static const std::set<std::string> kSystem{"gpu", "cpu", "link"};
  static const std::set<std::string> kModel{"num_layers", "hidden_dim",        "expert_dim",
                                            "experts_per_layer", "top_k", "dtype_bytes", "name"};
  static const std::set<std::string> kBatch{"batch_size", "input_len", "output_len"};
  if (kSystem.count(head))
    apply_override(system, assignment, system_source);
  else if (kModel.count(head))
    apply_override(model, assignment, model_source);
  else if (kBatch.count(head))
    apply_override(batch, assignment, batch_source);
  else
    throw ConfigError(fmt::format("--set '{}': key '{}' is not a config key", assignment, key));
}

SystemSpec system_from_json(const json& tree, const std::string& source) {
  Section root(tree, source, "");
  auto device = [&](const char* which, const char* capacity_key) {
    Section s = root.child(which);
    const std::string name = s.string_or("name", which);
    const double bw = s.positive("bw_bytes_per_s");
    const double tf = s.positive("tflops") * 1e12;
    const double cap = s.positive(capacity_key);
    s.reject_unknown();
    return validated(source, [&] { return DeviceSpec(name, bw, tf, cap); });
  };
  DeviceSpec gpu = device("gpu", "vram_bytes");
  DeviceSpec cpu = device("cpu", "dram_bytes");
  Section l = root.child("link");
  const double bw = l.positive("bw_bytes_per_s");
  const bool duplex = l.boolean_or("duplex", true);
  const double eff = l.number_or("efficiency", 1.0);
  if (!(eff > 0.0 && eff <= 1.0)) l.fail("efficiency", fmt::format("must be in (0, 1], got {}", eff));
  l.reject_unknown();
  LinkSpec link = validated(source, [&] { return LinkSpec(bw, duplex, eff); });
  root.reject_unknown();
  return validated(source, [&] { return SystemSpec(gpu, cpu, link); });
}

ModelConfig model_from_json(const json& tree, const std::string& source) {
  Section s(tree, source, "");
  ModelConfig m;
  m.num_layers = s.integer("num_layers");
  m.hidden_dim = s.integer("hidden_dim");
  m.expert_dim = s.integer("expert_dim");
  m.experts_per_layer = s.integer("experts_per_layer");
  m.top_k = s.integer("top_k");
  m.dtype_bytes = s.integer_or("dtype_bytes", 2);
  s.string_or("name", "");
  s.reject_unknown();
  validated(source, [&] {
    m.validate();
    return 0;
  });
  return m;
}

BatchConfig batch_from_json(const json& tree, const std::string& source) {
  Section s(tree, source, "");
  BatchConfig b;
  b.batch_size = s.integer("batch_size");
  b.input_len = s.integer("input_len");
  b.output_len = s.integer("output_len");
  s.reject_unknown();
  validated(source, [&] {
    b.validate();
    return 0;
  });
  return b;
}

json to_json(const SystemSpec& s) {
  return {{"gpu",
           {{"name", s.gpu().name()},
            {"bw_bytes_per_s", s.gpu().mem_bandwidth()},
            {"tflops", s.gpu().peak_compute() / 1e12},
            {"vram_bytes", s.gpu().mem_capacity()}}},
          {"cpu",
           {{"name", s.cpu().name()},
            {"bw_bytes_per_s", s.cpu().mem_bandwidth()},
            {"tflops", s.cpu().peak_compute() / 1e12},
            {"dram_bytes", s.cpu().mem_capacity()}}},
          {"link",
           {{"bw_bytes_per_s", s.link().bandwidth()},
            {"duplex", s.link().duplex()},
            {"efficiency", s.link().efficiency()}}}};
}

json to_json(const ModelConfig& m) {
  return {{"num_layers", m.num_layers},   {"hidden_dim", m.hidden_dim},
          {"expert_dim", m.expert_dim},   {"experts_per_layer", m.experts_per_layer},
          {"top_k", m.top_k},             {"dtype_bytes", m.dtype_bytes}};
}

json to_json(const BatchConfig& b) {
  return {{"batch_size", b.batch_size}, {"input_len", b.input_len}, {"output_len", b.output_len}};
}

// ---------------------------------------------------------------------------
// Strategies and plans
// ---------------------------------------------------------------------------

json to_json(const AllocationStrategy& s) {
  json placement = json::array();
  for (Device d : s.placement) placement.push_back(std::string(to_string(d)));
  return {{"placement", placement},
          {"resident_experts", s.resident_experts},
          {"exp_r", s.exp_r},
          {"exp_m", s.exp_m},
          {"exp_c", s.exp_c},
          {"micro_batch", s.micro_batch},
          {"coalesced_experts", s.coalesced_experts}};
}

AllocationStrategy strategy_from_json(const json& j, const std::string& source) {
  Section s(j, source, "strategy");
  AllocationStrategy out;
  const json& placement = s.raw("placement");
  if (!placement.is_array() || placement.size() != 3)
    s.fail("placement", "expected three of \"cpu\"/\"gpu\"");
  for (std::size_t i = 0; i < 3; ++i) {
    const json& v = placement[i];
    if (v == "gpu")
      out.placement[i] = Device::Gpu;
    else if (v == "cpu")
      out.placement[i] = Device::Cpu;
    else
      s.fail("placement", fmt::format("entry {} must be \"cpu\" or \"gpu\", got {}", i, v.dump()));
  }
  out.resident_experts = s.integer("resident_experts");
  out.exp_r = s.integer("exp_r");
  out.exp_m = s.integer("exp_m");
  out.exp_c = s.integer("exp_c");
  out.micro_batch = s.integer("micro_batch");
  out.coalesced_experts = s.boolean_or("coalesced_experts", true);
  s.reject_unknown();
  return out;
}

json to_json(const LayerCost& c) {
  static constexpr const char* kNames[] = {"qkv", "attention", "out_proj", "experts"};
  json ops = json::array();
  for (std::size_t i = 0; i < 4; ++i)
    ops.push_back({{"op", kNames[i]},
                   {"t_load", c.ops[i].t_load},
                   {"t_comp", c.ops[i].t_comp},
                   {"t_store", c.ops[i].t_store}});
  return {{"ops", ops}, {"total", c.total}};
}

json to_json(const VramBudget& v) {
  return {{"resident_expert_bytes", v.resident_expert_bytes},
          {"non_moe_weight_bytes", v.non_moe_weight_bytes},
          {"intermediate_bytes", v.intermediate_bytes},
          {"kv_cache_bytes", v.kv_cache_bytes},
          {"workspace_bytes", v.workspace_bytes},
          {"used", v.used()},
          {"capacity", v.capacity},
          {"feasible", v.feasible()}};
}

json to_json(const TotalLatency& t) {
  return {{"prefill_s", t.prefill_s}, {"decode_s", t.decode_s}, {"total_s", t.total_s}};
}

json to_json(const Plan& p) {
  json j{{"prefill_strategy", to_json(p.prefill_strategy)},
         {"decode_strategy", to_json(p.decode_strategy)},
         {"predicted", to_json(p.predicted)},
         {"tokens_per_s", p.tokens_per_s ? json(*p.tokens_per_s) : json(nullptr)},
         {"vram_prefill", to_json(p.vram_prefill)},
         {"vram_decode", to_json(p.vram_decode)},
         {"search",
          {{"candidates_enumerated", p.search_stats.candidates_enumerated},
           {"feasible_count", p.search_stats.feasible_count}}}};
  return j;
}

Plan plan_from_json(const json& j, const std::string& source) {
  if (!j.is_object()) throw ConfigError(fmt::format("{}: plan must be an object", source));
  for (const char* key : {"prefill_strategy", "decode_strategy"})
    if (!j.contains(key)) throw ConfigError(fmt::format("{}: key '{}': missing", source, key));
  Plan p;
  p.prefill_strategy = strategy_from_json(j.at("prefill_strategy"), source);
  p.decode_strategy = strategy_from_json(j.at("decode_strategy"), source);
  if (j.contains("predicted")) {
    const json& t = j.at("predicted");
    p.predicted = {t.value("prefill_s", 0.0), t.value("decode_s", 0.0), t.value("total_s", 0.0)};
  }
  if (j.contains("tokens_per_s") && j.at("tokens_per_s").is_number())
    p.tokens_per_s = j.at("tokens_per_s").get<double>();
  return p;
}

// ---------------------------------------------------------------------------
// Activation maps and residency
// ---------------------------------------------------------------------------

namespace {

void check_header(const json& j, const char* format, const std::string& source) {
  if (!j.is_object() || j.value("format", "") != format)
    throw ParseError(fmt::format("{}: expected a \"{}\" record", source, format));
  if (j.value("version", 0) != kRecordVersion)
    throw ParseError(fmt::format("{}: unsupported {} version {}", source, format,
                                 j.value("version", json(nullptr)).dump()));
}

}  // namespace

json to_json(const ActivationMap& map) {
  return {{"format", "moeplan-activation-map"},
          {"version", kRecordVersion},
          {"num_layers", map.num_layers()},
          {"experts_per_layer", map.experts_per_layer()},
          {"counts", map.counts()}};
}

ActivationMap activation_map_from_json(const json& j, const std::string& source) {
  check_header(j, "moeplan-activation-map", source);
  try {
    return ActivationMap(j.at("counts").get<std::vector<std::vector<double>>>());
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("{}: counts: {}", source, e.what()));
  } catch (const std::invalid_argument& e) {
    throw ParseError(fmt::format("{}: {}", source, e.what()));
  }
}

json to_json(const ResidencyPlan& plan) {
  return {{"format", "moeplan-residency"},
          {"version", kRecordVersion},
          {"capacity_per_layer", plan.capacity_per_layer},
          {"resident", plan.resident}};
}

ResidencyPlan residency_from_json(const json& j, const std::string& source) {
  check_header(j, "moeplan-residency", source);
  try {
    ResidencyPlan p;
    p.capacity_per_layer = j.at("capacity_per_layer").get<std::int64_t>();
    p.resident = j.at("resident").get<std::vector<std::vector<std::int32_t>>>();
    return p;
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("{}: {}", source, e.what()));
  }
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

void write_trace(std::ostream& out, const RoutingTrace& trace) {
  out << json{{"format", "moeplan-trace"},
              {"version", kRecordVersion},
              {"embedding_dim", trace.embedding_dim},
              {"num_layers", trace.num_layers},
              {"experts_per_layer", trace.experts_per_layer}}
             .dump()
      << '\n';
  for (const auto& s : trace.samples) {
    json layers = json::array();
    for (const auto& layer : s.layers) {
      json l = json::array();
      for (const auto& [e, c] : layer) l.push_back({e, c});
      layers.push_back(std::move(l));
    }
    out << json{{"embedding", s.embedding}, {"layers", std::move(layers)}}.dump() << '\n';
  }
}

void write_trace(const std::filesystem::path& path, const RoutingTrace& trace) {
  std::ostringstream ss;
  write_trace(ss, trace);
  write_file(path, ss.str());
}

RoutingTrace read_trace(std::istream& in, const std::string& source) {
  RoutingTrace trace;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  auto fail = [&](const std::string& msg) -> void {
    throw ParseError(fmt::format("{}:{}: {}", source, lineno, msg));
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(e.what());
    }
    try {
      if (!have_header) {
        if (j.value("format", "") != "moeplan-trace") fail("missing moeplan-trace header");
        if (j.value("version", 0) != kRecordVersion)
          fail(fmt::format("unsupported trace version {}", j.value("version", json()).dump()));
        trace.embedding_dim = j.at("embedding_dim").get<std::int64_t>();
        trace.num_layers = j.at("num_layers").get<std::int64_t>();
        trace.experts_per_layer = j.at("experts_per_layer").get<std::int64_t>();
        have_header = true;
        continue;
      }
      RoutingSample s;
      s.embedding = j.at("embedding").get<std::vector<double>>();
      for (const auto& layer : j.at("layers")) {
        std::vector<ExpertCount> l;
        for (const auto& pair : layer) {
          if (!pair.is_array() || pair.size() != 2) fail("layer entries must be [expert, count]");
          l.emplace_back(pair[0].get<std::int32_t>(), pair[1].get<std::int64_t>());
        }
        s.layers.push_back(std::move(l));
      }
      if (static_cast<std::int64_t>(s.embedding.size()) != trace.embedding_dim)
        fail(fmt::format("embedding has {} values, header says {}", s.embedding.size(),
                         trace.embedding_dim));
      if (static_cast<std::int64_t>(s.layers.size()) != trace.num_layers)
        fail(fmt::format("sample has {} layers, header says {}", s.layers.size(),
                         trace.num_layers));
      for (const auto& l : s.layers)
        for (const auto& [e, c] : l)
          if (e < 0 || e >= trace.experts_per_layer || c < 1)
            fail(fmt::format("bad expert entry [{}, {}]", e, c));
      trace.samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      fail(e.what());
    }
  }
  if (!have_header) throw ParseError(fmt::format("{}: empty trace file", source));
  return trace;
}

RoutingTrace read_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("{}: cannot open file", path.string()));
  return read_trace(in, path.string());
}

std::string format_double(double v) { return fmt::format("{}", v); }

}  // namespace moeplan
