#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cardioseg/analysis.hpp"
#include "cardioseg/config.hpp"
#include "cardioseg/synth.hpp"
#include "test_util.hpp"

using namespace cardioseg;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

TrainConfig tiny_train(int epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 4;
  cfg.seed = 30;
  cfg.model.depth = 1;
  cfg.model.base_channels = 2;
  return cfg;
}

struct Fixture {
  test::TempDir dir;
  SynthOutput synth;
  DiseaseDatasets train;
  Fixture() {
    SynthConfig sc;
    sc.dataset_name = "synA";
    sc.diseases = {default_disease_profiles()[0], default_disease_profiles()[4]};
    for (auto& p : sc.diseases) {
      p.train_cases = 1;
      p.test_cases = 1;
    }
    synth = synth_generate(sc, 8, dir.path() / "data");
    train = build_disease_datasets(synth.train, 32, 32);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::vector<std::string>> csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

// Full four-arm run set with two runs, evaluated into <runset>/eval.
const fs::path& evaluated_runset() {
  static test::TempDir dir;
  static bool built = false;
  const fs::path rs = dir.path() / "rs";
  static const fs::path path = rs;
  if (!built) {
    built = true;
    run_matrix(fixture().train, "synA", tiny_train(2), all_arms(), 2, rs);
    const auto cv = cross_validate(rs, fixture().synth.test, true);
    write_metrics_csv(cv.table.rows, rs / "eval" / "metrics.csv");
  }
  return path;
}

}  // namespace

TEST_CASE("sweep spec validation") {
  SweepSpec s;
  CHECK_NOTHROW(s.validate());
  s.lambdas = {0.2, 1.0};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.lambdas = {0.3, 0.2};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.lambdas = {0.2, 0.2};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.lambdas = {};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SweepSpec{};
  s.arm = Arm{Strategy::MTS, false};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SweepSpec{};
  s.kind = MaskKind::None;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("sweep trains runs per lambda and averages class means") {
  test::TempDir tmp;
  SweepSpec spec;
  spec.lambdas = {0.15, 0.25, 0.4};
  spec.runs = 2;
  const auto rows = sweep_lambda(spec, tiny_train(1), fixture().train, "synA", fixture().synth.test, tmp.path());
  REQUIRE(rows.size() == 3);
  int models = 0;
  for (const auto& r : rows) {
    CHECK(r.n_failed == 0);
    models += r.n_models;
    const fs::path dir = tmp.path() / ("lambda_" + format_number(r.lambda));
    CHECK(read_runset_index(dir).runs.size() == 2);
    // Recompute from the raw eval CSV: class means over ALL rows, then the mean.
    const auto raw = read_metrics_csv(dir / "eval.csv");
    double dsum = 0, hsum = 0;
    for (int cls = 1; cls <= 3; ++cls) {
      double d = 0, h = 0;
      int n = 0;
      for (const auto& m : raw)
        if (m.disease == "ALL" && m.cls == cls) d += m.dice, h += m.hd, ++n;
      CHECK(n == 2 * 2);  // runs x phases
      dsum += d / n;
      hsum += h / n;
    }
    CHECK(std::abs(r.dice_avg - dsum / 3) < 1e-8);
    CHECK(std::abs(r.hd_avg - hsum / 3) < 1e-6);
  }
  CHECK(models == 6);
  const auto table = csv(tmp.path() / "sweep.csv");
  REQUIRE(table.size() == 4);
  CHECK(table[0] == std::vector<std::string>{"mask_kind", "lambda", "mean_dice_avg", "mean_hd_avg", "n_models",
                                             "n_failed"});
  CHECK(table[2][0] == "ideal");
  CHECK(table[2][1] == "0.25");
}

TEST_CASE("L1 probe rows and summary") {
  test::TempDir tmp;
  const fs::path rs = tmp.path() / "rs";
  run_matrix(fixture().train, "synA", tiny_train(8), {Arm{Strategy::MTS, false}, Arm{Strategy::MTS, true}}, 2, rs);
  const auto probe = probe_l1(rs);
  CHECK(probe.curves.size() == 32);
  CHECK(probe.warnings.empty());
  REQUIRE(probe.summary.size() == 1);
  const auto& s = probe.summary[0];
  CHECK(s.strategy == Strategy::MTS);
  CHECK(s.n_pairs == 2);
  int last = 0;
  for (const auto& r : probe.curves) last = std::max(last, r.epoch);
  double itd = 0, ctd = 0;
  for (const auto& r : probe.curves)
    if (r.epoch == last) (r.arm == "mts+itd" ? itd : ctd) += r.l1_norm / 2;
  CHECK(s.itd_final_mean == doctest::Approx(itd).epsilon(1e-12));
  CHECK(s.ctd_final_mean == doctest::Approx(ctd).epsilon(1e-12));

  // A missing history is skipped with a warning.
  const auto index = read_runset_index(rs);
  fs::remove(rs / index.runs[0].history);
  const auto partial = probe_l1(rs);
  CHECK(partial.curves.size() == 24);
  CHECK(partial.warnings.size() == 1);
  CHECK(partial.summary[0].n_pairs == 1);
}

TEST_CASE("L1 probe on an empty run set fails") {
  test::TempDir tmp;
  RunSetIndex empty;
  empty.dataset_name = "x";
  write_runset_index(empty, tmp.path());
  CHECK_THROWS_AS(probe_l1(tmp.path()), Error);
  CHECK_THROWS(probe_l1(tmp.path() / "missing"));
}

TEST_CASE("report tables, labels and determinism") {
  const fs::path& rs = evaluated_runset();
  std::map<fs::path, std::uint64_t> before;
  for (const auto& e : fs::recursive_directory_iterator(rs))
    if (e.is_regular_file()) before[e.path()] = file_hash(e.path());

  test::TempDir out;
  const auto result = report({{rs, {}}}, out.path() / "a");
  report({{rs, {}}}, out.path() / "b");
  CHECK_FALSE(result.partial);
  CHECK(result.notes.empty());

  std::vector<std::string> labels;
  int diagonal = 0, ablation = 0;
  const json manifest = json::parse(slurp(out.path() / "a" / "manifest.json"));
  for (const auto& a : manifest.at("artifacts")) {
    const std::string kind = a.at("kind");
    if (kind == "diagonal") {
      ++diagonal;
      CHECK(a.at("label") == "NTS+CTD vs MTS+ITD");
    }
    if (kind == "ablation") {
      ++ablation;
      labels.push_back(a.at("label"));
    }
    const fs::path file = out.path() / "a" / a.at("file").get<std::string>();
    CHECK(fs::exists(file));
    CHECK(slurp(file) == slurp(out.path() / "b" / a.at("file").get<std::string>()));
  }
  CHECK(slurp(out.path() / "a" / "manifest.json") == slurp(out.path() / "b" / "manifest.json"));
  CHECK(diagonal == 1);
  CHECK(ablation == 4);
  CHECK(labels == std::vector<std::string>{"NTS+CTD vs MTS+CTD", "NTS+ITD vs MTS+ITD", "NTS+CTD vs NTS+ITD",
                                           "MTS+CTD vs MTS+ITD"});
  CHECK(manifest.at("runsets")[0].at("completed_runs_per_arm").at("mts+itd") == 2);

  // Read-only on the run set.
  for (const auto& [path, hash] : before) CHECK(file_hash(path) == hash);

  // Every diagonal number is a mean/std over runs of the raw eval CSV.
  const auto raw = read_metrics_csv(rs / "eval" / "metrics.csv");
  const auto diag = csv(out.path() / "a" / "diagonal.csv");
  REQUIRE(diag.size() == 1 + 2 * 2 * 3 + 2 * 3);
  for (std::size_t i = 1; i < diag.size(); ++i) {
    const auto& row = diag[i];
    CHECK(row[0] == "NTS+CTD vs MTS+ITD");
    for (const auto& [arm_col, mean_col, std_col] :
         {std::tuple{6, 7, 8}, std::tuple{12, 13, 14}}) {
      std::vector<double> vals;
      for (const auto& m : raw)
        if (m.arm == row[arm_col] && m.disease == row[3] && phase_name(m.phase) == row[4] &&
            class_name(m.cls) == row[5])
          vals.push_back(m.dice);
      REQUIRE(vals.size() == 2);
      CHECK(std::stod(row[mean_col]) == doctest::Approx(mean_of(vals)).epsilon(1e-8));
      CHECK(std::abs(std::stod(row[std_col]) - sample_std(vals)) < 1e-8);
    }
  }
  // Box-plot data: one raw value per run and row.
  CHECK(csv(out.path() / "a" / "boxplot_dice.csv").size() == 1 + raw.size());
  CHECK(csv(out.path() / "a" / "l1_curves.csv").size() == 1 + 4 * 2 * 2);
}

TEST_CASE("report marks incomplete inputs as partial") {
  const fs::path& rs = evaluated_runset();
  test::TempDir tmp;
  const fs::path copy = tmp.path() / "rs";
  fs::copy(rs, copy, fs::copy_options::recursive);
  auto index = read_runset_index(copy);
  index.complete = false;
  index.runs[1].status = RunStatus::Failed;
  index.runs[1].error = "boom";
  write_runset_index(index, copy);
  const auto result = report({{copy, {}}}, tmp.path() / "out");
  CHECK(result.partial);
  CHECK(json::parse(slurp(tmp.path() / "out" / "manifest.json")).at("partial") == true);

  const fs::path bare = tmp.path() / "bare";
  fs::copy(rs, bare, fs::copy_options::recursive);
  fs::remove_all(bare / "eval");
  const auto r2 = report({{bare, {}}}, tmp.path() / "out2");
  CHECK(r2.partial);
  CHECK(csv(tmp.path() / "out2" / "diagonal.csv").size() == 1);
  CHECK_THROWS_AS(report({}, tmp.path() / "out3"), ConfigError);
}

TEST_CASE("app config sections, overrides and validation") {
  const json j = json::parse(R"({
    "seed": 12,
    "data": {"train_manifest": "d/train/manifest.json"},
    "model": {"depth": 2, "base_channels": 4, "input_size": [48, 40]},
    "train": {"epochs": 3, "batch_size": 2, "runs": 4, "arms": ["mts+itd", "nts+ctd"], "jobs": 2},
    "mask": {"kind": "gaussian", "lambda": 0.4},
    "optim": {"lr": 0.01, "betas": [0.8, 0.99]},
    "eval": {"normalize": false},
    "sweep": {"lambdas": [0.2, 0.3], "runs": 3},
    "synth": {"train_cases_per_disease": 2}
  })");
  const AppConfig c = app_config_from_json(j);
  CHECK(c.train.seed == 12);
  CHECK(c.train.model.depth == 2);
  CHECK(c.train.model.input_height == 48);
  CHECK(c.train.model.input_width == 40);
  CHECK(c.train.epochs == 3);
  CHECK(c.train.runs == 4);
  CHECK(c.jobs == 2);
  CHECK(c.arms == std::vector<Arm>{{Strategy::MTS, true}, {Strategy::NTS, false}});
  CHECK(c.train.mask.kind == MaskKind::Gaussian);
  CHECK(c.train.optim.lr == 0.01);
  CHECK(c.train.optim.beta1 == 0.8);
  CHECK_FALSE(c.eval_normalize);
  CHECK(c.train.normalize);
  CHECK(c.sweep.lambdas == std::vector<double>{0.2, 0.3});
  CHECK(c.synth.diseases.size() == 5);
  CHECK(c.synth.diseases[0].train_cases == 2);

  const AppConfig back = app_config_from_json(app_config_to_json(c));
  CHECK(app_config_to_json(back) == app_config_to_json(c));

  CHECK_THROWS_AS(app_config_from_json(json::parse(R"({"trian": {}})")), ConfigError);
  CHECK_THROWS_AS(app_config_from_json(json::parse(R"({"train": {"epoch": 3}})")), ConfigError);
  CHECK_THROWS_AS(app_config_from_json(json::parse(R"({"train": {"arms": ["xts+ctd"]}})")), ConfigError);
  CHECK_THROWS_AS(app_config_from_json(json::parse(R"({"train": {"epochs": "x"}})")), ConfigError);

  test::TempDir tmp;
  fs::create_directories(tmp.path() / "cfg");
  std::ofstream(tmp.path() / "cfg" / "c.json") << j.dump();
  const AppConfig loaded = load_app_config(tmp.path() / "cfg" / "c.json");
  CHECK(fs::path(loaded.data.train_manifest) == (tmp.path() / "cfg" / "d/train/manifest.json").lexically_normal());
  std::ofstream(tmp.path() / "bad.json") << "{ nope";
  CHECK_THROWS_AS(load_app_config(tmp.path() / "bad.json"), ConfigError);
}
