// SPDX-License-Identifier: Apache-2.0
//
// End-to-end runs of the command line, in process. Golden files live in
// tests/golden; set MOEPLAN_UPDATE_GOLDEN=1 to rewrite them.

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "moeplan/cli.hpp"
#include "moeplan/io.hpp"

namespace fs = std::filesystem;
using moeplan::json;

namespace {

struct Outcome {
  int code = 0;
  std::string out, err;
  json report;
};

Outcome call(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  auto r = moeplan::cli::run(args, out, err);
  return {r.exit_code, out.str(), err.str(), std::move(r.report)};
}

std::string config(const std::string& rel) {
  return (fs::path(MOEPLAN_SOURCE_DIR) / "configs" / rel).string();
}

const std::vector<std::string> kMixtral = {
    "--system", config("system/rtx6000ada.json"), "--model", config("model/mixtral-8x7b.json"),
    "--batch",  config("batch/b128-512.json")};

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("moeplan_cli_" + std::to_string(::getpid()) + "_" +
                                         std::to_string(counter_++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
  static inline int counter_ = 0;
};

void check_golden(const std::string& name, const std::string& actual) {
  const fs::path path = fs::path(MOEPLAN_GOLDEN_DIR) / name;
  const char* update = std::getenv("MOEPLAN_UPDATE_GOLDEN");
  if (update && *update && std::string(update) != "0") {
    moeplan::write_file(path, actual);
    MESSAGE("rewrote " << path.string());
    return;
  }
  REQUIRE_MESSAGE(fs::exists(path), "missing golden file " << path.string());
  CHECK(moeplan::read_file(path) == actual);
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

json without_timestamp(json report) {
  report["manifest"].erase("timestamp");
  return report;
}

std::string make_trace(const TempDir& dir) {
  const std::string path = dir / "trace.jsonl";
  const auto r = call({"tracegen", "--out", path, "--samples", "400", "--embedding-dim", "8",
                       "--layers", "2", "--experts", "16", "--top-k", "2", "--topics", "4",
                       "--seed", "5"});
  REQUIRE(r.code == 0);
  return path;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("plan prints tables and returns a report") {
    const auto r = call(with({"plan"}, kMixtral));
    REQUIRE(r.code == moeplan::cli::kOk);
    CHECK(r.out.find("placement x0/x1/x2") != std::string::npos);
    CHECK(r.out.find("VRAM budget") != std::string::npos);
    const json& m = r.report.at("manifest");
    CHECK(m.at("command") == "plan");
    CHECK(m.at("inputs").size() == 3);
    const json& p = r.report.at("result").at("plan");
    CHECK(p.at("predicted").at("total_s").get<double>() > 0.0);
    CHECK(p.at("search").at("feasible_count").get<int>() > 0);
  }

  TEST_CASE("exit codes") {
    CHECK(call(with({"plan"}, with(kMixtral, {"--set", "gpu.vram_bytes=1", "--force", "x0=gpu"})))
              .code == moeplan::cli::kNoFeasiblePlan);

    const auto bad = call(with({"plan"}, with(kMixtral, {"--set", "gpu.bw_bytes_per_s=-1"})));
    CHECK(bad.code == moeplan::cli::kConfigError);
    CHECK(bad.err.find("key 'gpu.bw_bytes_per_s'") != std::string::npos);
    CHECK(bad.err.find("rtx6000ada.json") != std::string::npos);

    CHECK(call(with({"plan"}, with(kMixtral, {"--set", "colour=red"}))).code ==
          moeplan::cli::kConfigError);
    CHECK(call({"plan", "--system", "/nonexistent.json", "--model", "x", "--batch", "y"}).code ==
          moeplan::cli::kConfigError);
    CHECK(call({"frobnicate"}).code == moeplan::cli::kConfigError);
    CHECK(call(with({"plan"}, with(kMixtral, {"--force", "x7=gpu"}))).code ==
          moeplan::cli::kConfigError);

    TempDir dir;
    const std::string broken = dir / "broken.json";
    moeplan::write_file(broken, "{\n  \"result\": {\n    \"plan\": [1, 2,\n}\n");
    const auto sim = call({"simulate", "--plan", broken});
    CHECK(sim.code == moeplan::cli::kParseError);
    CHECK(sim.err.find("broken.json") != std::string::npos);
    CHECK(sim.err.find("line 4") != std::string::npos);
  }

  TEST_CASE("a forced placement never beats the free plan") {
    const double free_total = call(with({"plan"}, kMixtral))
                                  .report["result"]["plan"]["predicted"]["total_s"]
                                  .get<double>();
    for (const char* force : {"x0=gpu", "x0=cpu", "x1=gpu", "x1=cpu", "x2=gpu", "x2=cpu"}) {
      const auto r = call(with({"plan"}, with(kMixtral, {"--force", force})));
      if (r.code == moeplan::cli::kNoFeasiblePlan) continue;
      REQUIRE(r.code == 0);
      CHECK(r.report["result"]["plan"]["predicted"]["total_s"].get<double>() >= free_total);
    }
  }

  TEST_CASE("sweep CSV layout and trends") {
    const auto co = call(with({"sweep"}, with(kMixtral, {"--m", "8,16,32,64,128"})));
    REQUIRE(co.code == 0);
    const auto rows = parse_csv(co.out);
    REQUIRE(rows.size() == 6);
    CHECK(rows[0] == std::vector<std::string>{"m", "expert_s", "nonexpert_s", "total_s"});
    for (std::size_t i = 1; i < rows.size(); ++i) {
      REQUIRE(rows[i].size() == 4);
      CHECK(std::stod(rows[i][1]) == doctest::Approx(std::stod(rows[1][1])).epsilon(1e-12));
    }

    const auto mb = call(with({"sweep"}, with(kMixtral, {"--mode", "microbatched", "--phase",
                                                          "decode", "--m", "8,16,32,64,128"})));
    REQUIRE(mb.code == 0);
    const auto mrows = parse_csv(mb.out);
    for (std::size_t i = 2; i < mrows.size(); ++i) {
      const double ratio = std::stod(mrows[i - 1][1]) / std::stod(mrows[i][1]);
      CHECK(ratio >= 1.8);
      CHECK(ratio <= 2.0 + 1e-12);
    }
    check_golden("sweep_mixtral_decode_microbatched.csv", mb.out);
  }

  TEST_CASE("sweep writes CSV and report files") {
    TempDir dir;
    const std::string csv = dir / "s.csv";
    const auto r = call(with({"sweep"}, with(kMixtral, {"--out", csv})));
    REQUIRE(r.code == 0);
    CHECK(fs::exists(csv));
    CHECK(fs::exists(csv + ".report.json"));
    const json rep = moeplan::load_json_file(csv + ".report.json");
    CHECK(rep.at("result").at("rows").size() == parse_csv(moeplan::read_file(csv)).size() - 1);
  }

  TEST_CASE("stratify with every sample probed recovers the exact map") {
    TempDir dir;
    const std::string trace = make_trace(dir);
    const auto r = call({"stratify", "--trace", trace, "--ratio", "1", "--capacity", "4",
                         "--clusters", "4", "--residency-out", dir / "res.json"});
    REQUIRE(r.code == 0);
    CHECK(r.report["result"]["map_gap"].get<double>() == 0.0);
    const auto& hit = r.report["result"]["hit_ratio"];
    CHECK(hit["stratified"].get<double>() == hit["oracle"].get<double>());
    const auto res = moeplan::residency_from_json(moeplan::load_json_file(dir / "res.json"), "r");
    CHECK(res.capacity_per_layer == 4);
  }

  TEST_CASE("hitratio curves are monotone in capacity") {
    TempDir dir;
    const std::string trace = make_trace(dir);
    const auto r = call({"hitratio", "--trace", trace, "--clusters", "4", "--ratio", "0.1",
                         "--random-seeds", "10"});
    REQUIRE(r.code == 0);
    const auto rows = parse_csv(r.out);
    REQUIRE(rows.size() >= 3);
    CHECK(rows[0] == std::vector<std::string>{"capacity", "eas", "random", "oracle"});
    for (std::size_t i = 2; i < rows.size(); ++i)
      for (std::size_t c = 1; c < 4; ++c) CHECK(std::stod(rows[i][c]) >= std::stod(rows[i - 1][c]));
    for (std::size_t i = 1; i < rows.size(); ++i)
      CHECK(std::stod(rows[i][3]) >= std::stod(rows[i][1]));
    CHECK(std::stod(rows.back()[1]) == 1.0);
    check_golden("hitratio_small.csv", r.out);
  }

  TEST_CASE("tracegen output is reproducible") {
    TempDir dir;
    const std::string a = dir / "a.jsonl";
    const std::string b = dir / "b.jsonl";
    const std::vector<std::string> common = {"--samples", "50", "--layers", "2", "--experts", "8",
                                             "--top-k", "2", "--seed", "9"};
    REQUIRE(call(with({"tracegen", "--out", a}, common)).code == 0);
    REQUIRE(call(with({"tracegen", "--out", b}, common)).code == 0);
    CHECK(moeplan::read_file(a) == moeplan::read_file(b));
    CHECK(call({"tracegen", "--out", dir / "c.jsonl", "--top-k", "99"}).code ==
          moeplan::cli::kConfigError);
  }

  TEST_CASE("property: reports are deterministic apart from the timestamp") {
    TempDir dir;
    const std::string trace = make_trace(dir);
    const std::vector<std::vector<std::string>> commands = {
        with({"plan"}, kMixtral),
        with({"sweep", "--mode", "microbatched"}, kMixtral),
        with({"simulate"}, kMixtral),
        {"stratify", "--trace", trace, "--clusters", "3"},
        {"hitratio", "--trace", trace, "--random-seeds", "3"},
    };
    for (const auto& args : commands) {
      const auto a = call(args);
      const auto b = call(args);
      REQUIRE(a.code == 0);
      CHECK(a.out == b.out);
      CHECK(without_timestamp(a.report) == without_timestamp(b.report));
    }
  }

  TEST_CASE("simulate from a saved plan matches simulating from configs") {
    TempDir dir;
    const std::string plan = dir / "plan.json";
    REQUIRE(call(with({"plan", "--out", plan}, kMixtral)).code == 0);
    const auto from_file = call({"simulate", "--plan", plan, "--timeline", dir / "tl.json"});
    REQUIRE(from_file.code == 0);
    const auto direct = call(with({"simulate"}, kMixtral));
    REQUIRE(direct.code == 0);
    CHECK(from_file.report["result"]["total"] == direct.report["result"]["total"]);
    CHECK(from_file.report["result"]["timeline_valid"] == true);
    const double ratio = from_file.report["result"]["total"]["ratio"].get<double>();
    CHECK(ratio <= 1.0 + 1e-9);
    const json tl = moeplan::load_json_file(dir / "tl.json");
    CHECK(tl.at("traceEvents").size() > 0);
    check_golden("plan_result_mixtral.json",
                 moeplan::load_json_file(plan).at("result").dump(2) + "\n");
  }

  TEST_CASE("report --verify reproduces and detects changed inputs") {
    TempDir dir;
    const std::string model = dir / "model.json";
    moeplan::write_file(model, moeplan::read_file(config("model/mixtral-8x7b.json")));
    const std::string out = dir / "plan.json";
    const std::vector<std::string> args = {"plan",  "--system", config("system/rtx6000ada.json"),
                                           "--model", model,    "--batch",
                                           config("batch/b128-512.json"), "--out", out};
    REQUIRE(call(args).code == 0);

    const auto ok = call({"report", "--in", out, "--verify"});
    CHECK(ok.code == 0);
    CHECK(ok.out.find("verify: reproduced") != std::string::npos);
    CHECK(ok.out.find("predicted total") != std::string::npos);

    moeplan::write_file(model, moeplan::read_file(config("model/mixtral-8x7b.json")) +
                                   "\n// edited\n");
    const auto changed = call({"report", "--in", out, "--verify"});
    CHECK(changed.code == moeplan::cli::kFailure);
    CHECK(changed.out.find("changed") != std::string::npos);

    CHECK(call({"report", "--in", dir / "missing.json"}).code == moeplan::cli::kConfigError);
  }
}
