// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <sstream>
#include <string>

#include "fixtures.hpp"
#include "moeplan/io.hpp"

using namespace moeplan;
using namespace moeplan::testing;

namespace {

json system_tree() {
  return parse_json(R"({
    // a workstation
    "gpu":  {"name": "rtx", "bw_bytes_per_s": 960e9, "tflops": 364, "vram_bytes": 48e9},
    "cpu":  {"bw_bytes_per_s": 300e9, "tflops": 144, "dram_bytes": 512e9},
    "link": {"bw_bytes_per_s": 32e9, "duplex": false, "efficiency": 0.8}
  })",
                    "sys.json");
}

std::string error_of(auto&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_SUITE("io") {
  TEST_CASE("fnv1a64 reference values") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(hex64(0xabcull) == "0000000000000abc");
  }

  TEST_CASE("parse_json accepts comments and reports the source on errors") {
    const json j = parse_json("/* c */ {\"a\": 1 // tail\n}", "x.json");
    CHECK(j.at("a") == 1);
    const std::string msg = error_of([] { parse_json("{\n\"a\": }", "bad.json"); });
    CHECK(msg.find("bad.json") == 0);
    CHECK(msg.find("line 2") != std::string::npos);
    CHECK_THROWS_AS(parse_json("{", "x"), ParseError);
  }

  TEST_CASE("system config scales tflops and reads link fields") {
    const SystemSpec s = system_from_json(system_tree(), "sys.json");
    CHECK(s.gpu().name() == "rtx");
    CHECK(s.cpu().name() == "cpu");
    CHECK(s.gpu().peak_compute() == doctest::Approx(364e12));
    CHECK(s.cpu().mem_capacity() == doctest::Approx(512e9));
    CHECK_FALSE(s.link().duplex());
    CHECK(s.link().efficiency() == doctest::Approx(0.8));
  }

  TEST_CASE("config errors name the file and the qualified key") {
    json t = system_tree();
    t["gpu"]["vram_bytes"] = -1;
    CHECK(error_of([&] { system_from_json(t, "sys.json"); }) ==
          "sys.json: key 'gpu.vram_bytes': must be > 0, got -1");

    t = system_tree();
    t["gpu"]["colour"] = "red";
    CHECK(error_of([&] { system_from_json(t, "sys.json"); }) ==
          "sys.json: key 'gpu.colour': unknown key");

    t = system_tree();
    t["link"].erase("bw_bytes_per_s");
    CHECK(error_of([&] { system_from_json(t, "sys.json"); }) ==
          "sys.json: key 'link.bw_bytes_per_s': missing");

    t = system_tree();
    t["link"]["efficiency"] = 1.5;
    CHECK(error_of([&] { system_from_json(t, "sys.json"); }).find("key 'link.efficiency'") !=
          std::string::npos);

    t = system_tree();
    t["cpu"]["tflops"] = "fast";
    CHECK_THROWS_AS(system_from_json(t, "sys.json"), ConfigError);
  }

  TEST_CASE("model and batch configs") {
    const json m = parse_json(
        R"({"name": "toy", "num_layers": 2, "hidden_dim": 8, "expert_dim": 16,
            "experts_per_layer": 4, "top_k": 2})",
        "m.json");
    const ModelConfig model = model_from_json(m, "m.json");
    CHECK(model.dtype_bytes == 2);
    CHECK(model.experts_per_layer == 4);

    json bad = m;
    bad["top_k"] = 5;
    CHECK_THROWS_AS(model_from_json(bad, "m.json"), ConfigError);
    bad = m;
    bad["hidden_dim"] = 8.5;
    CHECK(error_of([&] { model_from_json(bad, "m.json"); }).find("key 'hidden_dim'") !=
          std::string::npos);

    const json b = parse_json(R"({"batch_size": 4, "input_len": 16, "output_len": 2})", "b");
    CHECK(batch_from_json(b, "b").batch_size == 4);
    json bb = b;
    bb["batch_size"] = 0;
    CHECK_THROWS_AS(batch_from_json(bb, "b"), ConfigError);
  }

  TEST_CASE("apply_override sets nested values and parses JSON literals") {
    json t = system_tree();
    apply_override(t, "gpu.vram_bytes=24e9", "sys.json");
    CHECK(t["gpu"]["vram_bytes"].get<double>() == doctest::Approx(24e9));
    apply_override(t, "link.duplex=true", "sys.json");
    CHECK(t["link"]["duplex"] == true);
    apply_override(t, "gpu.name=h100", "sys.json");
    CHECK(t["gpu"]["name"] == "h100");
    CHECK_THROWS_AS(apply_override(t, "nothing", "sys.json"), ConfigError);
    CHECK(error_of([&] { apply_override(t, "disk.size=1", "sys.json"); }) ==
          "sys.json: key 'disk.size': unknown key (from --set)");
    // A new leaf is accepted here and rejected by validation.
    apply_override(t, "gpu.colour=1", "sys.json");
    CHECK_THROWS_AS(system_from_json(t, "sys.json"), ConfigError);
  }

  TEST_CASE("ConfigSet routes overrides by key") {
    ConfigSet cs;
    cs.system = system_tree();
    cs.model = to_json(make_model(2, 8, 16, 4, 2));
    cs.batch = to_json(make_batch(4, 16, 2));
    cs.apply("gpu.tflops=100");
    cs.apply("top_k=1");
    cs.apply("batch_size=8");
    CHECK(cs.system_spec().gpu().peak_compute() == doctest::Approx(100e12));
    CHECK(cs.model_config().top_k == 1);
    CHECK(cs.batch_config().batch_size == 8);
    CHECK(error_of([&] { cs.apply("colour=red"); }) ==
          "--set 'colour=red': key 'colour' is not a config key");
  }

  TEST_CASE("system, model and batch round trip") {
    const SystemSpec s = system_from_json(system_tree(), "sys.json");
    const SystemSpec s2 = system_from_json(to_json(s), "again");
    CHECK(to_json(s2) == to_json(s));
    const ModelConfig m = make_model(3, 64, 128, 8, 2, 1);
    CHECK(to_json(model_from_json(to_json(m), "m")) == to_json(m));
    const BatchConfig b = make_batch(2, 7, 9);
    CHECK(to_json(batch_from_json(to_json(b), "b")) == to_json(b));
  }

  TEST_CASE("strategy and plan round trip") {
    AllocationStrategy s = make_strategy(Device::Gpu, Device::Cpu, Device::Gpu, 3, 2, 1, 4, 8);
    s.coalesced_experts = false;
    CHECK(strategy_from_json(to_json(s), "s") == s);

    json bad = to_json(s);
    bad["placement"] = {"gpu", "tpu", "gpu"};
    CHECK(error_of([&] { strategy_from_json(bad, "s"); }).find("key 'strategy.placement'") !=
          std::string::npos);

    const Plan p = plan(random_small_request(3));
    const Plan q = plan_from_json(parse_json(to_json(p).dump(), "p"), "p");
    CHECK(q.prefill_strategy == p.prefill_strategy);
    CHECK(q.decode_strategy == p.decode_strategy);
    CHECK(q.predicted.total_s == p.predicted.total_s);
    CHECK(q.tokens_per_s.has_value() == p.tokens_per_s.has_value());
    CHECK_THROWS_AS(plan_from_json(json::object(), "p"), ConfigError);
  }

  TEST_CASE("activation map and residency round trip") {
    ActivationMap map(2, 3);
    map.layer(0) = {1.0, 2.5, 0.0};
    map.layer(1) = {4.0, 0.0, 1.0};
    CHECK(activation_map_from_json(parse_json(to_json(map).dump(), "a"), "a") == map);

    ResidencyPlan r{2, {{0, 2}, {1, 2}}};
    CHECK(residency_from_json(to_json(r), "r") == r);

    json wrong = to_json(r);
    wrong["version"] = 7;
    CHECK_THROWS_AS(residency_from_json(wrong, "r"), ParseError);
    CHECK_THROWS_AS(activation_map_from_json(to_json(r), "r"), ParseError);
  }

  TEST_CASE("trace round trip is exact") {
    const RoutingTrace t = small_trace(6, 3, 11, 25);
    std::stringstream ss;
    write_trace(ss, t);
    const RoutingTrace u = read_trace(ss, "t.jsonl");
    REQUIRE(u.size() == t.size());
    CHECK(u.embedding_dim == t.embedding_dim);
    for (std::size_t i = 0; i < t.size(); ++i) {
      CHECK(u.samples[i].embedding == t.samples[i].embedding);
      CHECK(u.samples[i].layers == t.samples[i].layers);
    }
    std::stringstream again;
    write_trace(again, u);
    std::stringstream first;
    write_trace(first, t);
    CHECK(again.str() == first.str());
  }

  TEST_CASE("trace errors carry file and line") {
    const std::string header =
        R"({"format":"moeplan-trace","version":1,"embedding_dim":2,"num_layers":1,"experts_per_layer":4})";
    auto read = [](const std::string& text) {
      std::istringstream in(text);
      return read_trace(in, "t.jsonl");
    };
    CHECK(read(header + "\n\n" + R"({"embedding":[1,2],"layers":[[[3,1]]]})").size() == 1);
    CHECK(error_of([&] { read(header + "\n" + R"({"embedding":[1],"layers":[[[3,1]]]})"); })
              .find("t.jsonl:2: embedding has 1 values") == 0);
    CHECK(error_of([&] { read(header + "\n\n" + R"({"embedding":[1,2],"layers":[[[4,1]]]})"); })
              .find("t.jsonl:3: bad expert entry [4, 1]") == 0);
    CHECK(error_of([&] { read(header + "\n{oops"); }).find("t.jsonl:2:") == 0);
    CHECK(error_of([&] { read(R"({"format":"other"})"); }) ==
          "t.jsonl:1: missing moeplan-trace header");
    CHECK(error_of([&] { read(""); }) == "t.jsonl: empty trace file");
  }

  TEST_CASE("format_double gives shortest round-trip text") {
    CHECK(format_double(0.5) == "0.5");
    CHECK(format_double(1e-9) == "1e-09");
    CHECK(format_double(0.1 + 0.2) == "0.30000000000000004");
    CHECK(std::stod(format_double(1.0 / 3.0)) == 1.0 / 3.0);
  }
}
