#include "cli.hpp"

#include <algorithm>
#include <fstream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cardioseg/analysis.hpp"
#include "cardioseg/config.hpp"
#include "cardioseg/metrics.hpp"
#include "cardioseg/synth.hpp"
#include "cardioseg/training.hpp"

namespace cardioseg {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<int> runs;
  std::vector<std::string> arms;
  std::optional<std::string> mask;
  std::optional<double> lambda;
  bool literal_range = false;
  std::string train_manifest;
  std::string test_manifest;
  std::string out;
  std::vector<std::string> runsets;
  std::vector<std::string> evals;
  std::vector<std::string> sweeps;
  std::vector<double> lambdas;
  std::optional<int> jobs;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

AppConfig resolve_config(const Options& o) {
  AppConfig c = o.config.empty() ? app_config_from_json(nlohmann::json::object()) : load_app_config(o.config);
  if (o.seed) c.train.seed = *o.seed;
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.batch_size) c.train.batch_size = *o.batch_size;
  if (o.runs) {
    c.train.runs = *o.runs;
    c.sweep.runs = *o.runs;
  }
  if (!o.arms.empty()) {
    c.arms.clear();
    for (const auto& a : o.arms) c.arms.push_back(parse_arm(a));
  }
  if (o.mask) {
    c.train.mask.kind = parse_mask_kind(*o.mask);
    c.sweep.kind = c.train.mask.kind;
  }
  if (o.lambda) c.train.mask.lambda = *o.lambda;
  if (o.literal_range) c.train.mask.paper_literal_center_range = true;
  if (!o.lambdas.empty()) c.sweep.lambdas = o.lambdas;
  if (!o.train_manifest.empty()) c.data.train_manifest = o.train_manifest;
  if (!o.test_manifest.empty()) c.data.test_manifest = o.test_manifest;
  if (o.jobs) c.jobs = *o.jobs;
  return c;
}

const std::string& need(const std::string& value, const char* what) {
  if (value.empty()) throw UsageError(std::string("missing ") + what);
  return value;
}

bool runset_normalize(const fs::path& runset) {
  std::ifstream in(runset / "config.json");
  if (!in) throw LoadError("run set " + runset.string() + " has no config.json");
  try {
    return train_config_from_json(nlohmann::json::parse(in)).normalize;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed config.json in " + runset.string() + ": " + e.what());
  }
}

int cmd_synth(const Options& o, std::ostream& out) {
  const AppConfig c = resolve_config(o);
  const auto result = synth_generate(c.synth, c.train.seed, need(o.out, "--out"));
  out << "wrote " << result.train.cases.size() << " train and " << result.test.cases.size() << " test cases\n"
      << "train manifest: " << result.train_manifest_path.string() << '\n'
      << "test manifest: " << result.test_manifest_path.string() << '\n';
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  const AppConfig c = resolve_config(o);
  const Manifest train = read_manifest(need(c.data.train_manifest, "--train-manifest"));
  const auto datasets = build_disease_datasets(train, c.train.model.input_height, c.train.model.input_width);
  MatrixOptions mo;
  mo.jobs = c.jobs;
  const auto index = run_matrix(datasets, train.dataset_name, c.train, c.arms, c.train.runs, need(o.out, "--out"), mo);
  int failed = 0;
  for (const auto& e : index.runs)
    if (e.status == RunStatus::Failed) {
      ++failed;
      err << "run failed: " << e.arm << " run " << e.run << ": " << e.error << '\n';
    }
  out << "trained " << index.runs.size() - failed << " of " << index.runs.size() << " runs into " << o.out << '\n';
  return failed ? kExitFailure : kExitOk;
}

int evaluate_into(const fs::path& runset, const Manifest& test, const fs::path& out_dir, std::ostream& out,
                  std::ostream& err) {
  const auto cv = cross_validate(runset, test, runset_normalize(runset));
  write_metrics_csv(cv.table.rows, out_dir / "metrics.csv");
  write_case_metrics_csv(cv.table.cases, out_dir / "cases.csv");
  write_aggregate_csv(cv.aggregate, out_dir / "aggregate.csv");
  for (const auto& f : cv.failures) err << "evaluation failed: " << f.arm << " run " << f.run << ": " << f.error << '\n';
  out << "evaluated on " << test.dataset_name << "; results in " << out_dir.string() << '\n';
  return cv.failures.empty() ? kExitOk : kExitFailure;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  const AppConfig c = resolve_config(o);
  if (o.runsets.size() != 1) throw UsageError("eval takes exactly one --runset");
  const fs::path runset = o.runsets.front();
  const Manifest test = read_manifest(need(c.data.test_manifest, "--test-manifest"));
  return evaluate_into(runset, test, o.out.empty() ? runset / "eval" : fs::path(o.out), out, err);
}

int cmd_crossval(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.runsets.size() != 1) throw UsageError("crossval takes exactly one --runset");
  const Manifest test = read_manifest(need(o.test_manifest, "--test-manifest"));
  const auto index = read_runset_index(o.runsets.front());
  if (index.dataset_name == test.dataset_name)
    err << "note: run set was trained on '" << index.dataset_name << "', the dataset being evaluated\n";
  return evaluate_into(o.runsets.front(), test, need(o.out, "--out"), out, err);
}

int cmd_sweep(const Options& o, std::ostream& out) {
  const AppConfig c = resolve_config(o);
  c.sweep.validate();
  const Manifest train = read_manifest(need(c.data.train_manifest, "--train-manifest"));
  const Manifest test = read_manifest(need(c.data.test_manifest, "--test-manifest"));
  const auto datasets = build_disease_datasets(train, c.train.model.input_height, c.train.model.input_width);
  MatrixOptions mo;
  mo.jobs = c.jobs;
  const auto rows = sweep_lambda(c.sweep, c.train, datasets, train.dataset_name, test, need(o.out, "--out"), mo);
  for (const auto& r : rows)
    out << mask_kind_name(r.kind) << " lambda=" << format_number(r.lambda) << " dice=" << format_number(r.dice_avg)
        << " hd=" << format_number(r.hd_avg) << '\n';
  for (const auto& r : rows)
    if (r.n_failed) return kExitFailure;
  return kExitOk;
}

int cmd_probe(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.runsets.size() != 1) throw UsageError("probe takes exactly one --runset");
  const fs::path runset = o.runsets.front();
  const auto probe = probe_l1(runset);
  const fs::path dir = need(o.out, "--out");
  const std::string tag = runset.lexically_normal().filename().string();
  write_l1_curves_csv(probe.curves, tag, dir / "l1_curves.csv");
  write_l1_summary_csv(probe.summary, tag, dir / "l1_summary.csv");
  for (const auto& w : probe.warnings) err << "warning: " << w << '\n';
  for (const auto& s : probe.summary)
    out << strategy_name(s.strategy) << ": final l1 itd=" << format_number(s.itd_final_mean)
        << " ctd=" << format_number(s.ctd_final_mean) << " (itd greater in " << s.itd_greater << " of " << s.n_pairs
        << " pairs)\n";
  return kExitOk;
}

int cmd_report(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.runsets.empty()) throw UsageError("report needs at least one --runset");
  if (!o.evals.empty() && o.evals.size() != o.runsets.size())
    throw UsageError("--eval must be given once per --runset or not at all");
  std::vector<ReportInput> inputs;
  for (std::size_t i = 0; i < o.runsets.size(); ++i)
    inputs.push_back({o.runsets[i], o.evals.empty() ? fs::path{} : fs::path(o.evals[i])});
  std::vector<fs::path> sweeps(o.sweeps.begin(), o.sweeps.end());
  const auto result = report(inputs, need(o.out, "--out"), sweeps);
  for (const auto& n : result.notes) err << "partial: " << n << '\n';
  out << "wrote " << result.artifacts.size() << " artifacts to " << o.out << (result.partial ? " (partial)" : "")
      << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cardiac MRI segmentation experiments on multi-disease data"};
  app.name("cardioseg");
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Base seed for all randomness");
  };
  auto training = [&](CLI::App* sub) {
    sub->add_option("--epochs", o.epochs, "Training epochs");
    sub->add_option("--batch-size", o.batch_size, "Batch size b");
    sub->add_option("--runs", o.runs, "Runs per arm (or per lambda)");
    sub->add_option("--mask", o.mask, "Mask kind: ideal, gaussian, none");
    sub->add_option("--lambda", o.lambda, "Mask size ratio");
    sub->add_flag("--paper-literal-center-range", o.literal_range, "Use the literal center range formula");
    sub->add_option("--train-manifest", o.train_manifest, "Training manifest");
    sub->add_option("--jobs", o.jobs, "Runs trained concurrently");
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic phantom dataset");
  common(synth);
  synth->add_option("--out", o.out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train the arm matrix into a run set");
  common(train);
  training(train);
  train->add_option("--arm", o.arms, "Arm to train (repeatable): nts+ctd, nts+itd, mts+ctd, mts+itd");
  train->add_option("--out", o.out, "Run-set directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate every run of a run set");
  common(eval);
  eval->add_option("--runset", o.runsets, "Run-set directory")->required();
  eval->add_option("--test-manifest", o.test_manifest, "Test manifest");
  eval->add_option("--out", o.out, "Output directory (default: <runset>/eval)");

  auto* crossval = app.add_subcommand("crossval", "Evaluate a run set on another dataset");
  common(crossval);
  crossval->add_option("--runset", o.runsets, "Run-set directory")->required();
  crossval->add_option("--test-manifest", o.test_manifest, "Test manifest of the other dataset")->required();
  crossval->add_option("--out", o.out, "Output directory")->required();

  auto* sweep = app.add_subcommand("sweep", "Sweep the mask size ratio");
  common(sweep);
  training(sweep);
  sweep->add_option("--lambdas", o.lambdas, "Lambda grid (overrides sweep.lambdas)");
  sweep->add_option("--test-manifest", o.test_manifest, "Test manifest");
  sweep->add_option("--out", o.out, "Output directory")->required();

  auto* probe = app.add_subcommand("probe", "Extract weight L1-norm curves from a run set");
  probe->add_option("--runset", o.runsets, "Run-set directory")->required();
  probe->add_option("--out", o.out, "Output directory")->required();

  auto* rep = app.add_subcommand("report", "Emit comparison tables and plot data");
  rep->add_option("--runset", o.runsets, "Run-set directory (repeatable)")->required();
  rep->add_option("--eval", o.evals, "Metrics CSV per run set (default: <runset>/eval/metrics.csv)");
  rep->add_option("--sweep", o.sweeps, "Sweep CSV to include (repeatable)");
  rep->add_option("--out", o.out, "Report directory")->required();

  if (args.empty()) {
    out << app.help();
    return kExitUsage;
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(o, out);
    if (train->parsed()) return cmd_train(o, out, err);
    if (eval->parsed()) return cmd_eval(o, out, err);
    if (crossval->parsed()) return cmd_crossval(o, out, err);
    if (sweep->parsed()) return cmd_sweep(o, out);
    if (probe->parsed()) return cmd_probe(o, out, err);
    if (rep->parsed()) return cmd_report(o, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace cardioseg
