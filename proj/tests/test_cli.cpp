#include <catch2/catch_amalgamated.hpp>

#include "kitrec/simworld.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

#ifndef KITREC_CLI_PATH
#error "KITREC_CLI_PATH must be defined"
#endif

const std::string kCli = KITREC_CLI_PATH;

int run_cli(const std::string& args) {
  const std::string cmd = kCli + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path work_dir() {
  const fs::path dir = fs::temp_directory_path() / "kitrec_cli_test";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("unknown commands and flags exit nonzero") {
  CHECK(run_cli("definitely-not-a-command") != 0);
  CHECK(run_cli("simulate --no-such-flag x") != 0);
  CHECK(run_cli("") != 0);  // a subcommand is required
}

TEST_CASE("train-dmp writes one model record per skill") {
  const fs::path out = work_dir() / "dmps";
  fs::remove_all(out);
  REQUIRE(run_cli("train-dmp --out " + out.string()) == 0);
  for (const std::string node : {"n1", "n2a", "n2b", "n3", "n4"})
    CHECK(fs::exists(out / ("dmp_" + node + ".txt")));
  // The records reload.
  const auto skill = kitrec::dmp::load_skill((out / "dmp_n3.txt").string());
  CHECK(skill.id == "n3");
  CHECK(skill.dims.size() == 6);
}

TEST_CASE("train-hmm then calibrate produce per-node threshold records") {
  const fs::path out = work_dir() / "lib_small";
  fs::remove_all(out);
  // A tiny configuration keeps this smoke test quick.
  const fs::path cfg = work_dir() / "small.json";
  std::ofstream(cfg) << R"({"n_nominal": 4, "n_calibration": 6, "k_trunc": 4, "max_iter": 60})";
  REQUIRE(run_cli("train-hmm --seed 5 --config " + cfg.string() + " --out " + out.string()) == 0);
  CHECK(fs::exists(out / "hmm_n1.txt"));
  CHECK(fs::exists(out / "scaling_n1.txt"));
  REQUIRE(run_cli("calibrate --seed 5 --config " + cfg.string() + " --out " + out.string()) == 0);
  CHECK(fs::exists(out / "idmodel_n1.txt"));
  CHECK(fs::exists(out / "idmodel_n4.txt"));
}

TEST_CASE("simulate produces a run directory with byte-identical reruns") {
  const fs::path dir = work_dir();
  const fs::path scenario = dir / "hc3.cfg";
  kitrec::sim::Scenario sc;
  sc.seed = 11;
  sc.name = "hc3";
  sc.injectors = {{"HC", "n3", 1.0, 0.0, 25.0, false, 1}};
  kitrec::sim::save_scenario(sc, scenario.string());

  const fs::path out_a = dir / "run_a";
  const fs::path out_b = dir / "run_b";
  fs::remove_all(out_a);
  fs::remove_all(out_b);
  REQUIRE(run_cli("simulate --scenario " + scenario.string() + " --seed 11 --out " + out_a.string() +
                  " --run-name 0001") == 0);
  REQUIRE(run_cli("simulate --scenario " + scenario.string() + " --seed 11 --out " + out_b.string() +
                  " --run-name 0001") == 0);

  const fs::path run_a = out_a / "experiment_at_0001";
  const fs::path run_b = out_b / "experiment_at_0001";
  for (const std::string file :
       {"record.csv", "anomaly_labels.txt", "anomaly_signal.txt", "trace.csv", "summary.json",
        "final_graph.txt"}) {
    REQUIRE(fs::exists(run_a / file));
    CHECK(slurp(run_a / file) == slurp(run_b / file));
  }
  CHECK(slurp(run_a / "anomaly_labels.txt") == "HC\n");
}

TEST_CASE("report aggregates run directories") {
  const fs::path dir = work_dir();
  const fs::path runs = dir / "run_a";  // produced by the simulate test
  if (!fs::exists(runs / "experiment_at_0001")) {
    SUCCEED("simulate smoke did not run first; nothing to aggregate");
    return;
  }
  const fs::path out = dir / "report";
  fs::remove_all(out);
  REQUIRE(run_cli("report --runs " + runs.string() + " --out " + out.string()) == 0);
  const std::string body = slurp(out / "report.json");
  CHECK(body.find("\"episodes\": 1") != std::string::npos);
  CHECK(body.find("\"successes\": 1") != std::string::npos);
}
