#include "cli.hpp"
#include "doctest.h"
#include "lpsa/io.hpp"
#include "oracles.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

using namespace lpsa;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path scratch() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / ("lpsa_cli_test_" + std::to_string(getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

struct Toy {
  MatrixXd x;
  VectorXd y;
  std::vector<int> s;
};

// Three-level toy panel written as CSV with columns id,y,s,x1..xT.
Toy make_toy(Index n, Index periods, std::uint64_t seed, const fs::path& path) {
  Toy t{oracle::gaussian_matrix(periods, n, seed), oracle::gaussian_matrix(n, 1, seed + 1).col(0), {}};
  std::vector<std::string> header{"id", "y", "s"};
  for (Index r = 0; r < periods; ++r) header.push_back("x" + std::to_string(r + 1));
  CsvWriter w(header);
  for (Index i = 0; i < n; ++i) {
    t.s.push_back(static_cast<int>(i % 3));
    std::vector<std::string> row{"u" + std::to_string(i), format_double(t.y(i)), std::to_string(t.s.back())};
    for (Index r = 0; r < periods; ++r) row.push_back(format_double(t.x(r, i)));
    w.add_row(row);
  }
  w.write(path);
  return t;
}

json base_config(const std::string& data) {
  return json{{"data", {{"path", data}, {"id_column", "id"}, {"measurement_prefix", "x"}}},
              {"k", 8},
              {"d_lambda", 1},
              {"propensity", {{"backend", "local_ls"}}},
              {"estimands", json::array({json{{"level", 0}, {"group", 1}}})}};
}

fs::path write_config(const std::string& name, const json& cfg) {
  const fs::path p = scratch() / name;
  write_file(p, cfg.dump(2));
  return p;
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "lpsa");
  return cli::run(args);
}

}  // namespace

TEST_CASE("estimate matches the scripted pipeline") {
  const Toy toy = make_toy(12, 6, 31, scratch() / "toy12.csv");
  const auto cfg = write_config("est.json", base_config("toy12.csv"));
  const fs::path out = scratch() / "est_out";
  REQUIRE(run_cli({"estimate", "--config", cfg.string(), "--out", out.string()}) == cli::kExitOk);
  const json res = json::parse(slurp(out / "results.json"));
  const auto ref = oracle::scripted_pipeline(toy.x, toy.y, toy.s, 3, 8, 1, 0, 1);
  const double theta = res["estimates"][0]["theta"].get<double>();
  CHECK(std::abs(theta - ref.theta) < 1e-10);
  CHECK(res["estimates"][0]["sigma"].get<double>() == doctest::Approx(std::sqrt(ref.variance)).epsilon(1e-9));
  CHECK(res["n"] == 12);
  CHECK(res["k"] == 8);
  CHECK(fs::exists(out / "estimates.csv"));
}

TEST_CASE("reruns are byte identical and thread independent") {
  make_toy(30, 8, 5, scratch() / "toy30.csv");
  json c = base_config("toy30.csv");
  c["k"] = 20;
  c["effects"] = json::array({json{{"level_a", 1}, {"level_b", 0}, {"group", 2}}});
  c["cdf"] = {{"estimands", json::array({json{{"level", 1}, {"group", 1}}})}, {"points", 5}};
  c["bootstrap"] = {{"draws", 50}, {"seed", 3}};
  const auto cfg = write_config("rerun.json", c);
  const fs::path a = scratch() / "rerun_a", b = scratch() / "rerun_b";
  REQUIRE(run_cli({"estimate", "--config", cfg.string(), "--out", a.string(), "--threads", "1"}) == 0);
  REQUIRE(run_cli({"estimate", "--config", cfg.string(), "--out", b.string(), "--threads", "3"}) == 0);
  for (const auto& entry : fs::directory_iterator(a)) {
    CHECK(slurp(entry.path()) == slurp(b / entry.path().filename()));
  }
  CHECK(fs::exists(a / "cdf_1_1.csv"));
}

TEST_CASE("unknown treatment level exits with a data error") {
  make_toy(12, 6, 31, scratch() / "toy12b.csv");
  json c = base_config("toy12b.csv");
  c["estimands"] = json::array({json{{"level", 5}, {"group", 1}}});
  const auto cfg = write_config("bad_level.json", c);
  const fs::path out = scratch() / "bad_out";
  CHECK(run_cli({"estimate", "--config", cfg.string(), "--out", out.string()}) == cli::kExitDataError);
  CHECK_FALSE(fs::exists(out));
  json missing = base_config("nope.csv");
  CHECK(run_cli({"estimate", "--config", write_config("missing.json", missing).string(), "--out", out.string()}) ==
        cli::kExitDataError);
  CHECK(run_cli({"frobnicate"}) == cli::kExitDataError);
}

TEST_CASE("tune and diagnose write their reports") {
  make_toy(40, 10, 8, scratch() / "toy40.csv");
  json c = base_config("toy40.csv");
  c["k"] = {{"rule", "cv"}, {"candidates", {15, 22, 30}}, {"folds", 4}, {"seed", 1}};
  const auto cfg = write_config("tune.json", c);
  const fs::path out = scratch() / "tune_out";
  REQUIRE(run_cli({"tune", "--config", cfg.string(), "--out", out.string()}) == 0);
  const json t = json::parse(slurp(out / "tuning.json"));
  const Index k = t["tuning"]["k_selected"].get<Index>();
  CHECK((k == 15 || k == 22 || k == 30));
  CHECK(fs::exists(out / "criterion_curve.csv"));

  json d = base_config("toy40.csv");
  d["k"] = 20;
  d["diagnose"] = {{"q", 4}};
  const fs::path dout = scratch() / "diag_out";
  REQUIRE(run_cli({"diagnose", "--config", write_config("diag.json", d).string(), "--out", dout.string()}) == 0);
  const json diag = json::parse(slurp(dout / "diagnostics.json"));
  CHECK(diag["q"] == 4);
  CHECK(diag["mean_spectrum"].size() == 4);
  CHECK(fs::exists(dout / "matching_table.csv"));
  CHECK(fs::exists(dout / "scree.csv"));
}

TEST_CASE("simulate keeps run order and honours the seed override") {
  json c{{"simulate",
          {{"runs", json::array({json{{"model", "model2"}, {"backend", "oracle"}, {"n", 40}, {"reps", 3}, {"seed", 1}},
                                 json{{"model", "model1"}, {"backend", "local_constant"}, {"n", 40}, {"reps", 3},
                                      {"seed", 2}}})}}}};
  const auto cfg = write_config("sim.json", c);
  const fs::path a = scratch() / "sim_a", b = scratch() / "sim_b", o = scratch() / "sim_o";
  REQUIRE(run_cli({"simulate", "--config", cfg.string(), "--out", a.string()}) == 0);
  const std::string table = slurp(a / "mc_table.csv");
  std::istringstream lines(table);
  std::string header, first, second;
  std::getline(lines, header);
  std::getline(lines, first);
  std::getline(lines, second);
  CHECK(first.rfind("model2,oracle", 0) == 0);
  CHECK(second.rfind("model1,local_constant", 0) == 0);

  REQUIRE(run_cli({"simulate", "--config", cfg.string(), "--out", b.string(), "--seed-override", "1"}) == 0);
  REQUIRE(run_cli({"simulate", "--config", cfg.string(), "--out", o.string(), "--seed-override", "1"}) == 0);
  CHECK(slurp(b / "mc_table.csv") == slurp(o / "mc_table.csv"));
  const json sim = json::parse(slurp(b / "simulation.json"));
  CHECK(sim["runs"][0]["seed"] == 1);
  CHECK(sim["runs"][1]["seed"] == 1);
  CHECK(slurp(a / "mc_table.csv") != slurp(b / "mc_table.csv"));
}

TEST_CASE("thread count from the environment") {
  make_toy(12, 6, 31, scratch() / "toy12c.csv");
  const auto cfg = write_config("env.json", base_config("toy12c.csv"));
  ::setenv("LPSA_THREADS", "2", 1);
  CHECK(run_cli({"estimate", "--config", cfg.string(), "--out", (scratch() / "env_ok").string()}) == 0);
  ::setenv("LPSA_THREADS", "0", 1);
  CHECK(run_cli({"estimate", "--config", cfg.string(), "--out", (scratch() / "env_bad").string()}) ==
        cli::kExitDataError);
  ::unsetenv("LPSA_THREADS");
}

TEST_CASE("three-unit toy file") {
  const fs::path data = fs::path(LPSA_TEST_DATA) / "toy3.csv";
  json c = base_config(data.string());
  c["k"] = 3;
  const auto cfg = write_config("toy3.json", c);
  const fs::path out = scratch() / "toy3_out";
  REQUIRE(run_cli({"estimate", "--config", cfg.string(), "--out", out.string()}) == 0);
  MatrixXd x(4, 3);
  x << 0.2, 0.4, 1.1, 1.0, -0.5, 0.3, -0.3, 1.2, 0.6, 0.8, 0.1, -0.9;
  VectorXd y(3);
  y << 1.5, 2.0, 0.7;
  const auto ref = oracle::scripted_pipeline(x, y, {0, 1, 0}, 2, 3, 1, 0, 1);
  const json res = json::parse(slurp(out / "results.json"));
  CHECK(std::abs(res["estimates"][0]["theta"].get<double>() - ref.theta) < 1e-10);
  const fs::path again = scratch() / "toy3_again";
  REQUIRE(run_cli({"estimate", "--config", cfg.string(), "--out", again.string()}) == 0);
  CHECK(slurp(out / "results.json") == slurp(again / "results.json"));
}
