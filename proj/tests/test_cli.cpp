#include <gtest/gtest.h>

#include "so3flow/config.hpp"
#include "so3flow/training.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace so3flow;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string kSmall = R"({
  "seed": 5,
  "target": {"kind": "peak", "kappa": 10},
  "model": {"blocks": 2, "components": 4, "hidden": [16, 16]},
  "train": {"lr": 0.003, "steps": 40, "dataset_size": 2000},
  "eval": {"grid_size": 100000, "envelope_grid_size": 100000, "samples": 200}
})";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("so3flow_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Result {
  int code = -1;
  std::string err;
};

Result run(const std::string& args, const fs::path& dir) {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string(SO3FLOW_CLI) + " " + args + " >" + (dir / "stdout.txt").string() + " 2>" +
                          err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

std::vector<std::string> csv_without_wall_time(const fs::path& p) {
  std::vector<std::string> rows;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) rows.push_back(line.substr(0, line.rfind(',')));
  return rows;
}

double metric(const fs::path& report, const std::string& name) {
  for (const json& r : json::parse(slurp(report)))
    if (r["metric"] == name) return r["value"].get<double>();
  ADD_FAILURE() << name << " missing from " << report;
  return 0.0;
}

}  // namespace

TEST(Cli, ConfigErrorsExitTwo) {
  const fs::path d = scratch("errors");
  EXPECT_EQ(run("train --config " + (d / "missing.json").string(), d).code, 2);
  const Result bad = run("train --config " + write(d / "bad.json", "{\n\"seed\": 1,\n\"colour\": 2}").string(), d);
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("bad.json:3"), std::string::npos) << bad.err;
  EXPECT_EQ(run("train", d).code, 2);
}

TEST(Cli, TrainEvalSampleEntropyExport) {
  const fs::path d = scratch("run");
  const fs::path cfg = write(d / "cfg.json", kSmall);
  const fs::path a = d / "a", b = d / "b";
  ASSERT_EQ(run("train --config " + cfg.string() + " --out " + a.string(), d).code, 0);
  for (const char* f : {"checkpoint.bin", "metrics.csv", "config.json", "VERSION", "train_report.json"})
    EXPECT_TRUE(fs::exists(a / f)) << f;
  EXPECT_EQ(parse_run_config(slurp(a / "config.json")).seed, 5u);
  const auto rows = csv_without_wall_time(a / "metrics.csv");
  EXPECT_EQ(rows.size(), 41u);
  EXPECT_EQ(rows.front(), "step,nll,lr");

  setenv("SO3FLOW_OUT_DIR", b.c_str(), 1);
  const Result again = run("train --config " + cfg.string(), d);
  unsetenv("SO3FLOW_OUT_DIR");
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(csv_without_wall_time(b / "metrics.csv"), rows);

  const std::string ck = (a / "checkpoint.bin").string();
  ASSERT_EQ(run("eval --checkpoint " + ck, d).code, 0);
  const double ll = metric(a / "eval.json", "avg_log_likelihood");
  EXPECT_GT(ll, 0.0);
  EXPECT_NEAR(metric(a / "eval.json", "normalization"), 1.0, 0.05);
  EXPECT_EQ(parse_run_config(slurp(a / "config.json")).seed, 5u);

  ASSERT_EQ(run("sample --checkpoint " + ck + " --n 50", d).code, 0);
  std::ifstream samples(a / "samples.jsonl");
  int count = 0;
  for (std::string line; std::getline(samples, line); ++count) {
    const json r = json::parse(line);
    const auto q = r["quat"].get<std::vector<double>>();
    ASSERT_EQ(q.size(), 4u);
    const auto first = std::find_if(q.begin(), q.end(), [](double v) { return v != 0.0; });
    EXPECT_GT(*first, 0.0);
    EXPECT_TRUE(r["log_prob"].is_number());
  }
  EXPECT_EQ(count, 50);
  EXPECT_EQ(run("sample --checkpoint " + ck + " --n 0", d).code, 2);

  ASSERT_EQ(run("entropy --checkpoint " + ck + " --n 500", d).code, 0);
  const json e = json::parse(slurp(a / "entropy.json")).at(0);
  EXPECT_EQ(e["metric"], "mc_entropy");
  const double quad = metric(a / "eval.json", "quadrature_entropy");
  EXPECT_LT(std::abs(e["value"].get<double>() - quad), 3.0 * e["stderr"].get<double>());

  ASSERT_EQ(run("export-viz --checkpoint " + ck + " --n 20", d).code, 0);
  std::ifstream viz(a / "viz.jsonl");
  count = 0;
  for (std::string line; std::getline(viz, line); ++count) {
    const json r = json::parse(line);
    EXPECT_NEAR(Vec3(r["dir"][0], r["dir"][1], r["dir"][2]).norm(), 1.0, 1e-12);
    EXPECT_DOUBLE_EQ(r["weight"].get<double>(), 1.0 / 20);
  }
  EXPECT_EQ(count, 20);
}

TEST(Cli, IdentityCheckpointHasZeroLikelihood) {
  const fs::path d = scratch("identity");
  const fs::path cfg = write(d / "cfg.json", kSmall);
  const RunConfig rc = load_run_config(cfg);
  save_checkpoint(d / "checkpoint.bin", FlowModel(rc.model, 1), AdamState{}, 0);
  ASSERT_EQ(run("eval --config " + cfg.string() + " --checkpoint " + (d / "checkpoint.bin").string() + " --out " +
                    d.string(),
                d)
                .code,
            0);
  EXPECT_EQ(metric(d / "eval.json", "avg_log_likelihood"), 0.0);
}

TEST(Cli, ArchitectureMismatchExitsTwo) {
  const fs::path d = scratch("mismatch");
  const fs::path cfg = write(d / "cfg.json", kSmall);
  FlowArchitecture other = load_run_config(cfg).model;
  other.components = 5;
  save_checkpoint(d / "checkpoint.bin", FlowModel(other, 1), AdamState{}, 0);
  const Result r = run("eval --config " + cfg.string() + " --checkpoint " + (d / "checkpoint.bin").string() +
                           " --out " + d.string(),
                       d);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("does not match"), std::string::npos) << r.err;
}

TEST(Cli, ExportVizFromTarget) {
  const fs::path d = scratch("viz");
  const fs::path cfg = write(d / "cfg.json", R"({"target": {"kind": "cube24", "kappa": 40}})");
  ASSERT_EQ(run("export-viz --config " + cfg.string() + " --out " + d.string(), d).code, 0);
  std::ifstream viz(d / "viz.jsonl");
  double mass = 0.0;
  int count = 0;
  for (std::string line; std::getline(viz, line); ++count) mass += json::parse(line)["weight"].get<double>();
  EXPECT_GT(count, 40000);
  EXPECT_NEAR(mass / count, 1.0, 0.05);
}

TEST(Cli, ShippedConfigsParse) {
  int n = 0;
  for (const auto& entry : fs::directory_iterator(fs::path(SO3FLOW_SOURCE_DIR) / "configs")) {
    if (entry.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_run_config(entry.path())) << entry.path();
    ++n;
  }
  EXPECT_GE(n, 4);
}
