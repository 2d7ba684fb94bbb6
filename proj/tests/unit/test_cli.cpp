#include "cli.hpp"
#include "io.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <sstream>

namespace fs = std::filesystem;
using namespace avem;
using namespace avem::cli;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "avem");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("avem_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string write_config(const fs::path& dir, const json& j) {
  const fs::path p = dir / "config.json";
  write_text(p, j.dump(2));
  return p.string();
}

std::size_t data_lines(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') ++n;
  return n;
}

}  // namespace

TEST(Io, ShortestDoubleRoundTrips) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(-2.0), "-2");
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int i = 0; i < 1000; ++i) {
    const double x = std::exp(u(rng)) * (i % 2 ? -1 : 1);
    EXPECT_EQ(std::stod(format_double(x)), x);
  }
}

TEST(Io, FnvHash) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
  EXPECT_EQ(provenance_line("00ff", 9), "# config_hash=00ff master_seed=9");
}

TEST(Io, DatasetCsvRoundTripIsExact) {
  const fs::path dir = scratch("csv");
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  LabeledDataset ds;
  ds.subject_ids = {"a", "b", "c"};
  for (int i = 0; i < 3; ++i) {
    MatrixXd s(4 + i, 2);
    for (Index r = 0; r < s.rows(); ++r)
      for (Index c = 0; c < 2; ++c) s(r, c) = nd(rng) * 1e3;
    ds.data.sequences.push_back(s);
  }
  write_dataset_csv(dir / "d.csv", ds, "# test");
  const auto back = read_dataset_csv(dir / "d.csv");
  EXPECT_EQ(back.subject_ids, ds.subject_ids);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(back.data[i], ds.data[i]);
}

TEST(Io, MalformedCsvIsRejected) {
  const fs::path dir = scratch("badcsv");
  write_text(dir / "gap.csv", "subject_id,t,d1\n0,0,1.0\n0,2,1.0\n");
  EXPECT_THROW(read_dataset_csv(dir / "gap.csv"), std::exception);
  write_text(dir / "num.csv", "subject_id,t,d1\n0,0,abc\n");
  EXPECT_THROW(read_dataset_csv(dir / "num.csv"), std::exception);
  EXPECT_THROW(read_dataset_csv(dir / "missing.csv"), IoError);
}

TEST(Settings, JsonRoundTripIsExact) {
  Settings s;
  s.seed = 99;
  s.scenario.tau2 = 0.25;
  s.scenario.n = 17;
  s.model = "bernoulli";
  s.tol = 1e-9;
  s.methods = {"avem", "qem_J9"};
  s.grid_tau2 = {0.25, 2.0};
  const json j = s.to_json();
  const Settings back = settings_from_json(j);
  EXPECT_EQ(back.to_json(), j);
  EXPECT_EQ(back.hash(), s.hash());
  Settings t = s;
  t.threads = 8;
  EXPECT_EQ(t.hash(), s.hash());
  t.seed = 100;
  EXPECT_NE(t.hash(), s.hash());
}

TEST(Settings, UnknownKeysNameTheField) {
  json j = Settings{}.to_json();
  j["scenario"]["bogus"] = 1;
  try {
    settings_from_json(j);
    FAIL() << "accepted an unknown key";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "scenario.bogus");
  }
  json k = Settings{}.to_json();
  k.erase("schema_version");
  EXPECT_THROW(settings_from_json(k), ConfigError);
  json w = Settings{}.to_json();
  w["estimation"]["max_iter"] = "many";
  EXPECT_THROW(settings_from_json(w), ConfigError);
}

TEST(Cli, ExitCodesAndErrorObjects) {
  const fs::path dir = scratch("codes");
  json bad = Settings{}.to_json();
  bad["estimation"]["typo"] = true;
  auto r = run_cli({"simulate", "--config", write_config(dir, bad), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, 2);
  const json e = json::parse(r.err);
  EXPECT_EQ(e["error"], "config");
  EXPECT_EQ(e["field"], "estimation.typo");

  r = run_cli({"fit", "--data", (dir / "nope.csv").string(), "--out", (dir / "f").string()});
  EXPECT_EQ(r.code, 4);
  EXPECT_EQ(json::parse(r.err)["error"], "io");

  r = run_cli({"simulate", "--seed", "1", "--max-iter", "0", "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, 2);

  r = run_cli({"frobnicate"});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, SimulateAndFitAreByteReproducible) {
  const fs::path dir = scratch("repro");
  json cfg = Settings{}.to_json();
  cfg["scenario"]["n"] = 12;
  cfg["scenario"]["T"] = 30;
  const std::string c = write_config(dir, cfg);
  std::vector<std::string> files;
  for (const char* run : {"a", "b"}) {
    const fs::path out = dir / run;
    ASSERT_EQ(run_cli({"simulate", "--config", c, "--seed", "5", "--out", (out / "sim").string()}).code, 0);
    ASSERT_EQ(run_cli({"fit", "--config", c, "--seed", "5", "--data", (out / "sim" / "dataset.csv").string(),
                       "--out", (out / "fit").string(), "--threads", run[0] == 'a' ? "1" : "3"})
                  .code,
              0);
  }
  for (const char* f : {"sim/dataset.csv", "sim/truth.json", "sim/truth_states.csv", "sim/truth_effects.csv",
                        "fit/fit.json", "fit/elbo_trace.csv"})
    EXPECT_EQ(read_text(dir / "a" / f), read_text(dir / "b" / f)) << f;
  const json fit = json::parse(read_text(dir / "a" / "fit" / "fit.json"));
  EXPECT_EQ(fit["master_seed"], 5);
  EXPECT_TRUE(fit.contains("config_hash"));
  EXPECT_EQ(read_text(dir / "a" / "sim" / "dataset.csv").rfind("# config_hash=", 0), 0u);
}

TEST(Cli, ExperimentWritesOneRowPerCellReplicateMethod) {
  const fs::path dir = scratch("experiment");
  json cfg = Settings{}.to_json();
  cfg["experiment"]["methods"] = {"avem", "qem_J3"};
  cfg["experiment"]["n_reps"] = 2;
  cfg["experiment"]["grid"] = {{"n", {8, 12}}, {"T", {20, 25}}, {"tau2", {1.0}}};
  const std::string c = write_config(dir, cfg);
  const auto r = run_cli({"experiment", "--config", c, "--seed", "3", "--out", (dir / "x").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string res = read_text(dir / "x" / "results.csv");
  EXPECT_EQ(data_lines(res), 1u + 2 * 2 * 1 * 2 * 2);
  EXPECT_EQ(data_lines(read_text(dir / "x" / "summary.csv")), 1u + 2 * 2 * 2);
  const auto again = run_cli({"experiment", "--config", c, "--seed", "3", "--threads", "2", "--out",
                              (dir / "y").string()});
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(read_text(dir / "y" / "results.csv"), res);
  EXPECT_EQ(read_text(dir / "y" / "summary.csv"), read_text(dir / "x" / "summary.csv"));
}

TEST(Cli, ValidateReportsPassForEverySuite) {
  const fs::path dir = scratch("validate");
  const auto r = run_cli({"validate", "all", "--seed", "2", "--out", (dir / "v.json").string()});
  EXPECT_EQ(r.code, 0) << r.out;
  const json rep = json::parse(read_text(dir / "v.json"));
  EXPECT_EQ(rep["suites"].size(), 3u);
  for (const auto& s : rep["suites"]) EXPECT_TRUE(s["passed"].get<bool>());
}
