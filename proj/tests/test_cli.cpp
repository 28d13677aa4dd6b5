#include <doctest.h>

#include <fstream>
#include <sstream>

#include "cardioseg/training.hpp"
#include "cli.hpp"
#include "test_util.hpp"

using namespace cardioseg;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path write_config(const fs::path& dir) {
  const fs::path file = dir / "c.json";
  std::ofstream(file) << R"({"seed": 3, "model": {"depth": 1, "base_channels": 2},
    "train": {"epochs": 1, "runs": 1, "batch_size": 4, "arms": ["nts+ctd", "mts+itd"]},
    "synth": {"train_cases_per_disease": 1, "test_cases_per_disease": 1},
    "data": {"train_manifest": "data/train/manifest.json", "test_manifest": "data/test/manifest.json"}})";
  return file;
}

}  // namespace

TEST_CASE("usage errors exit 1 with help text") {
  auto r = cli({});
  CHECK(r.code == kExitUsage);
  CHECK(r.out.find("Subcommands:") != std::string::npos);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  CHECK(cli({"train", "--bogus-flag", "1", "--out", "x"}).code == kExitUsage);
  CHECK(cli({"train"}).code == kExitUsage);  // --out is required
  CHECK(cli({"synth", "--config", "/no/such/file.json", "--out", "x"}).code == kExitUsage);
  r = cli({"--help"});
  CHECK(r.code == kExitOk);
  r = cli({"train", "--help"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("--batch-size") != std::string::npos);
}

TEST_CASE("invalid values are usage errors; runtime failures exit 2") {
  test::TempDir tmp;
  const auto cfg = write_config(tmp.path()).string();
  CHECK(cli({"synth", "--config", cfg, "--out", (tmp.path() / "data").string()}).code == kExitOk);
  const std::string rs = (tmp.path() / "rs").string();
  auto r = cli({"train", "--config", cfg, "--lambda", "1.5", "--arm", "mts+itd", "--out", rs});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("lambda") != std::string::npos);
  CHECK(cli({"train", "--config", cfg, "--arm", "bad", "--out", rs}).code == kExitUsage);
  CHECK(cli({"train", "--config", cfg, "--train-manifest", "/no/such/manifest.json", "--out", rs}).code ==
        kExitFailure);
  CHECK(cli({"probe", "--runset", (tmp.path() / "none").string(), "--out", (tmp.path() / "p").string()}).code ==
        kExitFailure);
  CHECK_FALSE(fs::exists(tmp.path() / "p"));
}

TEST_CASE("pipeline through the CLI; flags override the config; seeds are deterministic") {
  test::TempDir tmp;
  const auto cfg = write_config(tmp.path()).string();
  const std::string data = (tmp.path() / "data").string();
  REQUIRE(cli({"synth", "--config", cfg, "--out", data}).code == kExitOk);
  CHECK(fs::exists(tmp.path() / "data" / "train" / "manifest.json"));

  const std::string rs1 = (tmp.path() / "rs1").string(), rs2 = (tmp.path() / "rs2").string();
  for (const auto& rs : {rs1, rs2}) {
    const auto r = cli({"train", "--config", cfg, "--seed", "1", "--epochs", "2", "--runs", "2", "--out", rs});
    REQUIRE(r.code == kExitOk);
  }
  CHECK(slurp(fs::path(rs1) / "index.json") == slurp(fs::path(rs2) / "index.json"));
  const auto index = read_runset_index(rs1);
  CHECK(index.runs.size() == 4);  // two arms from the config, two runs from the flag
  CHECK(index.runs[0].seed == 1);
  CHECK(read_history(fs::path(rs1) / index.runs[0].history).epochs.size() == 2);

  REQUIRE(cli({"eval", "--config", cfg, "--runset", rs1}).code == kExitOk);
  CHECK(fs::exists(fs::path(rs1) / "eval" / "metrics.csv"));
  CHECK(fs::exists(fs::path(rs1) / "eval" / "cases.csv"));
  CHECK(fs::exists(fs::path(rs1) / "eval" / "aggregate.csv"));

  const std::string cv = (tmp.path() / "cv").string();
  CHECK(cli({"crossval", "--runset", rs1, "--out", cv}).code == kExitUsage);  // needs --test-manifest
  CHECK(cli({"crossval", "--runset", rs1, "--test-manifest", data + "/test/manifest.json", "--out", cv}).code ==
        kExitOk);
  CHECK(slurp(fs::path(cv) / "metrics.csv") == slurp(fs::path(rs1) / "eval" / "metrics.csv"));

  CHECK(cli({"probe", "--runset", rs1, "--out", (tmp.path() / "probe").string()}).code == kExitOk);
  CHECK(fs::exists(tmp.path() / "probe" / "l1_curves.csv"));

  const std::string sweep = (tmp.path() / "sweep").string();
  CHECK(cli({"sweep", "--config", cfg, "--lambdas", "0.2", "0.3", "--runs", "1", "--out", sweep}).code == kExitOk);
  CHECK(fs::exists(fs::path(sweep) / "sweep.csv"));
  CHECK(cli({"sweep", "--config", cfg, "--lambdas", "0.3", "1.0", "--out", sweep}).code == kExitUsage);

  const std::string rep = (tmp.path() / "report").string();
  const auto r = cli({"report", "--runset", rs1, "--sweep", sweep + "/sweep.csv", "--out", rep});
  CHECK(r.code == kExitOk);
  CHECK(fs::exists(fs::path(rep) / "sweep.csv"));
  CHECK(fs::exists(fs::path(rep) / "manifest.json"));
  // Only two arms were trained, so the ablations are incomplete.
  CHECK(r.out.find("(partial)") != std::string::npos);

  // Retraining into an existing run set with other settings is refused.
  CHECK(cli({"train", "--config", cfg, "--seed", "1", "--epochs", "3", "--runs", "2", "--out", rs1}).code ==
        kExitUsage);
}
