#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "gloria/cli.hpp"
#include "gloria/interp.hpp"
#include "gloria/kvfile.hpp"
#include "gloria/train.hpp"

using namespace gloria;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "gloria");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

int exec_binary(const std::string& args) {
  const std::string cmd = std::string("\"") + GLORIA_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch(const char* name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const std::vector<std::string> kSmallWorld{"--dim", "8", "--sites", "2", "--n", "300"};

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("binary exit codes") {
  CHECK(exec_binary("--help") == 0);
  CHECK(exec_binary("grad-check --seed 3 --dims 8 --rank 4") == 0);
  CHECK(exec_binary("grad-check --bogus") == 2);
  CHECK(exec_binary("") == 2);
  CHECK(exec_binary("eval --model /nonexistent/gloria --data /nonexistent/gloria") == 1);
}

TEST_CASE("help documents flags and defaults") {
  const Result r = cli({"train", "--help"});
  CHECK(r.code == 0);
  for (const char* s : {"--lambda-sp", "--lambda-orth", "--rank", "--mode", "--warmup-steps", "--config"})
    CHECK(r.out.find(s) != std::string::npos);
  CHECK(r.out.find("1500") != std::string::npos);
  const Result top = cli({"--help"});
  for (const char* s : {"gen-data", "train", "eval", "extract-gates", "nmf", "elbow", "aggregate", "map",
                        "heatmap", "grad-check", "demo"})
    CHECK(top.out.find(s) != std::string::npos);
}

TEST_CASE("usage errors exit 2") {
  CHECK(cli({"nope"}).code == 2);
  CHECK(cli({"grad-check", "--dims", "eight"}).code == 2);
  CHECK(cli({"gen-data"}).code == 2);  // missing --out
  const fs::path dir = scratch("gloria_cli_usage");
  std::ofstream(dir / "bad.cfg") << "not_a_flag = 1\n";
  CHECK(cli({"grad-check", "--config", (dir / "bad.cfg").string()}).code == 2);
  fs::remove_all(dir);
}

TEST_CASE("grad-check reports every tensor kind") {
  const Result r = cli({"grad-check", "--seed", "3", "--dims", "8", "--rank", "4"});
  CHECK(r.code == 0);
  CHECK(r.out.find("max relative error") != std::string::npos);
  CHECK(cli({"grad-check", "--seed", "3", "--tol", "1e-30"}).code == 1);
}

TEST_CASE("config files and GLORIA_SEED with flag precedence") {
  const fs::path dir = scratch("gloria_cli_cfg");
  std::ofstream(dir / "gen.cfg") << "dim = 5\nsites = 2\nn = 120\nseed = 9\n";
  REQUIRE(cli({"gen-data", "--config", (dir / "gen.cfg").string(), "--out", (dir / "a").string()}).code == 0);
  DatasetBundle a = load_dataset(dir / "a");
  CHECK(a.spec.dim == 5);
  CHECK(a.world_seed == 9);
  CHECK(a.data.size() == 120);

  REQUIRE(cli({"gen-data", "--config", (dir / "gen.cfg").string(), "--n", "130", "--out", (dir / "b").string()})
              .code == 0);
  CHECK(load_dataset(dir / "b").data.size() == 130);

  setenv("GLORIA_SEED", "21", 1);
  REQUIRE(cli({"gen-data", "--dim", "5", "--n", "50", "--out", (dir / "c").string()}).code == 0);
  CHECK(load_dataset(dir / "c").world_seed == 21);
  REQUIRE(cli({"gen-data", "--dim", "5", "--n", "50", "--seed", "4", "--out", (dir / "d").string()}).code == 0);
  CHECK(load_dataset(dir / "d").world_seed == 4);
  unsetenv("GLORIA_SEED");
  fs::remove_all(dir);
}

TEST_CASE("outputs are not overwritten without --force") {
  const fs::path dir = scratch("gloria_cli_force");
  const auto gen = cat({"gen-data", "--out", (dir / "data").string()}, kSmallWorld);
  REQUIRE(cli(gen).code == 0);
  const Result again = cli(gen);
  CHECK(again.code == 1);
  CHECK(again.err.find("--force") != std::string::npos);
  CHECK(cli(cat(gen, {"--force"})).code == 0);
  fs::remove_all(dir);
}

TEST_CASE("pipeline through the command line") {
  const fs::path dir = scratch("gloria_cli_pipeline");
  const std::string data = (dir / "data").string();
  REQUIRE(cli(cat({"gen-data", "--out", data, "--seed", "2"}, kSmallWorld)).code == 0);
  const Result tr = cli({"train", "--data", data, "--out", (dir / "run").string(), "--mode", "gloria", "--rank",
                         "8", "--lambda-sp", "5.0", "--lambda-orth", "0.8", "--epochs", "2", "--hidden", "8"});
  REQUIRE(tr.code == 0);
  const RunLog log = read_runlog(dir / "run" / "runlog.csv");
  CHECK(log.size() == 2);
  const KeyValues tkv = read_kv(dir / "run" / "train.txt");
  CHECK(tkv.at("lambda_sp") == "5");
  CHECK(tkv.at("rank") == "8");

  REQUIRE(cli({"eval", "--model", (dir / "run").string(), "--data", data, "--out", (dir / "ev.txt").string()}).code ==
          0);
  const KeyValues ev = read_kv(dir / "ev.txt");
  CHECK(ev.at("mode") == "gloria");
  CHECK(ev.at("count") == "30");
  REQUIRE(cli({"eval", "--model", (dir / "run").string(), "--data", data, "--mode", "frozen", "--out",
               (dir / "fr.txt").string()})
              .code == 0);
  CHECK(read_kv(dir / "fr.txt").at("mode") == "frozen");
  CHECK(cli({"eval", "--model", (dir / "run").string(), "--data", data, "--split", "bogus"}).code == 2);

  const std::string gates = (dir / "gates").string();
  REQUIRE(cli({"extract-gates", "--model", (dir / "run").string(), "--data", data, "--out", gates,
               "--max-locations", "50"})
              .code == 0);
  const GateMatrix gm = load_gate_matrix(gates);
  CHECK(gm.g.rows() == 16);
  CHECK(gm.g.cols() == 50);

  const Result el = cli({"elbow", "--gates", gates, "--k-max", "4", "--iters", "50", "--out",
                         (dir / "elbow.csv").string()});
  REQUIRE(el.code == 0);
  CHECK(el.out.find("elbow: k* = ") != std::string::npos);
  CHECK(read_elbow_csv(dir / "elbow.csv").size() == 4);

  REQUIRE(cli({"nmf", "--gates", gates, "--k", "3", "--iters", "40", "--out", (dir / "nmf").string()}).code == 0);
  NmfSummary sum;
  const NmfFactors f = load_nmf(dir / "nmf", &sum);
  CHECK(sum.k == 3);
  CHECK(f.l.cols() == 50);

  REQUIRE(cli({"aggregate", "--gates", gates, "--nmf", (dir / "nmf").string(), "--data", data, "--out",
               (dir / "agg").string()})
              .code == 0);
  CHECK(fs::exists(dir / "agg" / "aggregate.txt"));
  REQUIRE(cli({"map", "--gates", gates, "--nmf", (dir / "nmf").string(), "--out", (dir / "maps").string()}).code == 0);
  for (int c = 0; c < 3; ++c) {
    CHECK(fs::exists(dir / "maps" / ("component_" + std::to_string(c) + ".csv")));
    CHECK(fs::exists(dir / "maps" / ("component_" + std::to_string(c) + ".svg")));
  }
  REQUIRE(cli({"heatmap", "--aggregate", (dir / "agg").string(), "--out", (dir / "heat.svg").string()}).code == 0);
  CHECK(fs::file_size(dir / "heat.svg") > 0);
  fs::remove_all(dir);
}
