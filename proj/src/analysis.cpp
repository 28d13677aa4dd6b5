#include "cardioseg/analysis.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <tuple>

#include <nlohmann/json.hpp>

namespace cardioseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::ofstream open_out(const fs::path& file, bool append) {
  if (!file.parent_path().empty()) fs::create_directories(file.parent_path());
  std::ofstream out(file, append ? std::ios::app : std::ios::trunc);
  if (!out) throw LoadError("cannot write " + file.string());
  return out;
}

}  // namespace

// --- λ sweep ---

std::pair<double, double> class_averaged(const std::vector<MetricRow>& rows) {
  std::vector<double> dice_means, hd_means;
  for (int cls = 1; cls < kNumClasses; ++cls) {
    std::vector<double> d, h;
    for (const auto& r : rows) {
      if (r.disease != "ALL" || r.cls != cls) continue;
      d.push_back(r.dice);
      if (!std::isnan(r.hd)) h.push_back(r.hd);
    }
    dice_means.push_back(mean_of(d));
    hd_means.push_back(mean_of(h));
  }
  return {mean_of(dice_means), mean_of(hd_means)};
}

std::vector<SweepRow> sweep_lambda(const SweepSpec& spec, const TrainConfig& base, const DiseaseDatasets& train_data,
                                   const std::string& dataset_name, const Manifest& test, const fs::path& out_dir,
                                   const MatrixOptions& options) {
  spec.validate();
  std::vector<SweepRow> rows;
  for (double lambda : spec.lambdas) {
    TrainConfig cfg = base;
    cfg.strategy = spec.arm.strategy;
    cfg.key = spec.arm.key;
    cfg.mask.kind = spec.kind;
    cfg.mask.lambda = lambda;
    const fs::path dir = out_dir / ("lambda_" + format_number(lambda));
    const auto index = run_matrix(train_data, dataset_name, cfg, {spec.arm}, spec.runs, dir, options);
    const auto cv = cross_validate(dir, test, cfg.normalize);
    write_metrics_csv(cv.table.rows, dir / "eval.csv");

    SweepRow row;
    row.kind = spec.kind;
    row.lambda = lambda;
    std::set<int> evaluated;
    for (const auto& r : cv.table.rows) evaluated.insert(r.run);
    row.n_models = static_cast<int>(evaluated.size());
    row.n_failed = static_cast<int>(index.runs.size()) - row.n_models;
    std::tie(row.dice_avg, row.hd_avg) = class_averaged(cv.table.rows);
    rows.push_back(row);
  }
  write_sweep_csv(rows, out_dir / "sweep.csv");
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const fs::path& file) {
  auto out = open_out(file, false);
  out << "mask_kind,lambda,mean_dice_avg,mean_hd_avg,n_models,n_failed\n";
  for (const auto& r : rows)
    out << mask_kind_name(r.kind) << ',' << format_number(r.lambda) << ',' << format_number(r.dice_avg) << ','
        << format_number(r.hd_avg) << ',' << r.n_models << ',' << r.n_failed << '\n';
}

// --- L1 probe ---

L1Probe probe_l1(const fs::path& runset_dir) {
  const RunSetIndex index = read_runset_index(runset_dir);
  if (index.runs.empty()) throw Error("run set " + runset_dir.string() + " has no runs");
  L1Probe probe;
  std::map<std::string, std::map<std::uint64_t, double>> final_l1;  // arm -> seed -> value
  for (const auto& e : index.runs) {
    if (e.status != RunStatus::Complete) {
      probe.warnings.push_back(e.arm + " run " + std::to_string(e.run) + " did not complete");
      continue;
    }
    RunHistory h;
    try {
      h = read_history(runset_dir / e.history);
    } catch (const Error& err) {
      probe.warnings.push_back(e.arm + " run " + std::to_string(e.run) + ": " + err.what());
      continue;
    }
    if (h.epochs.empty()) {
      probe.warnings.push_back(e.arm + " run " + std::to_string(e.run) + ": empty history");
      continue;
    }
    for (const auto& ep : h.epochs) probe.curves.push_back({e.arm, e.run, e.seed, ep.epoch, ep.l1_norm});
    final_l1[e.arm][e.seed] = h.epochs.back().l1_norm;
  }
  if (probe.curves.empty()) throw Error("no usable training history in " + runset_dir.string());

  for (Strategy s : {Strategy::NTS, Strategy::MTS}) {
    const auto itd = final_l1.find(Arm{s, true}.name());
    const auto ctd = final_l1.find(Arm{s, false}.name());
    if (itd == final_l1.end() || ctd == final_l1.end()) continue;
    L1Summary sum;
    sum.strategy = s;
    std::vector<double> a, b;
    for (const auto& [seed, v] : itd->second) {
      const auto m = ctd->second.find(seed);
      if (m == ctd->second.end()) continue;
      a.push_back(v);
      b.push_back(m->second);
      if (v > m->second) ++sum.itd_greater;
    }
    if (a.empty()) continue;
    sum.n_pairs = static_cast<int>(a.size());
    sum.itd_final_mean = mean_of(a);
    sum.ctd_final_mean = mean_of(b);
    probe.summary.push_back(sum);
  }
  return probe;
}

void write_l1_curves_csv(const std::vector<L1CurveRow>& rows, const std::string& runset, const fs::path& file,
                         bool append) {
  auto out = open_out(file, append);
  if (!append) out << "runset,arm,run,seed,epoch,l1_norm\n";
  for (const auto& r : rows)
    out << runset << ',' << r.arm << ',' << r.run << ',' << r.seed << ',' << r.epoch << ','
        << format_number(r.l1_norm) << '\n';
}

void write_l1_summary_csv(const std::vector<L1Summary>& rows, const std::string& runset, const fs::path& file,
                          bool append) {
  auto out = open_out(file, append);
  if (!append) out << "runset,strategy,itd_final_mean,ctd_final_mean,n_pairs,itd_greater\n";
  for (const auto& r : rows)
    out << runset << ',' << strategy_name(r.strategy) << ',' << format_number(r.itd_final_mean) << ','
        << format_number(r.ctd_final_mean) << ',' << r.n_pairs << ',' << r.itd_greater << '\n';
}

// --- report ---

const std::vector<Comparison>& report_comparisons() {
  static const std::vector<Comparison> list{
      {"NTS+CTD vs MTS+ITD", "diagonal.csv", {Strategy::NTS, false}, {Strategy::MTS, true}},
      {"NTS+CTD vs MTS+CTD", "ablation_nts-ctd_vs_mts-ctd.csv", {Strategy::NTS, false}, {Strategy::MTS, false}},
      {"NTS+ITD vs MTS+ITD", "ablation_nts-itd_vs_mts-itd.csv", {Strategy::NTS, true}, {Strategy::MTS, true}},
      {"NTS+CTD vs NTS+ITD", "ablation_nts-ctd_vs_nts-itd.csv", {Strategy::NTS, false}, {Strategy::NTS, true}},
      {"MTS+CTD vs MTS+ITD", "ablation_mts-ctd_vs_mts-itd.csv", {Strategy::MTS, false}, {Strategy::MTS, true}},
  };
  return list;
}

namespace {

struct LoadedRunset {
  std::string tag;
  RunSetIndex index;
  std::vector<MetricRow> rows;  // only rows of completed index entries
  std::vector<AggregateRow> aggregate;
  bool has_metrics = false;
};

std::string runset_tag(const fs::path& dir, std::set<std::string>& used) {
  fs::path p = dir.lexically_normal();
  if (p.filename().empty()) p = p.parent_path();
  std::string tag = p.filename().string();
  if (tag.empty()) tag = "runset";
  std::string unique = tag;
  for (int i = 2; used.count(unique); ++i) unique = tag + "_" + std::to_string(i);
  used.insert(unique);
  return unique;
}

using AggKey = std::tuple<std::string, std::string, int, int>;

AggKey key_of(const AggregateRow& r) { return {r.dataset, r.disease, static_cast<int>(r.phase), r.cls}; }

}  // namespace

ReportResult report(const std::vector<ReportInput>& inputs, const fs::path& out_dir,
                    const std::vector<fs::path>& sweep_csvs) {
  if (inputs.empty()) throw ConfigError("report needs at least one run set");
  ReportResult result;
  auto note = [&](std::string text) {
    result.partial = true;
    result.notes.push_back(std::move(text));
  };

  std::vector<LoadedRunset> sets;
  std::set<std::string> used;
  for (const auto& in : inputs) {
    LoadedRunset s;
    s.tag = runset_tag(in.runset, used);
    s.index = read_runset_index(in.runset);
    if (!s.index.complete) note(s.tag + ": run set is incomplete");
    std::set<std::pair<std::string, int>> complete;
    for (const auto& e : s.index.runs) {
      if (e.status == RunStatus::Complete)
        complete.insert({e.arm, e.run});
      else
        note(s.tag + ": " + e.arm + " run " + std::to_string(e.run) + " failed");
    }
    const fs::path metrics = in.metrics_csv.empty() ? in.runset / "eval" / "metrics.csv" : in.metrics_csv;
    if (fs::exists(metrics)) {
      s.has_metrics = true;
      for (auto& r : read_metrics_csv(metrics)) {
        if (complete.count({r.arm, r.run}))
          s.rows.push_back(std::move(r));
        else
          note(s.tag + ": metrics for " + r.arm + " run " + std::to_string(r.run) + " have no completed index entry");
      }
      s.aggregate = aggregate_runs(s.rows);
    } else {
      note(s.tag + ": no evaluation results at " + metrics.filename().string());
    }
    sets.push_back(std::move(s));
  }
  // The same note can come from every row of a run; keep the first of each.
  {
    std::vector<std::string> unique;
    std::set<std::string> seen;
    for (auto& n : result.notes)
      if (seen.insert(n).second) unique.push_back(std::move(n));
    result.notes = std::move(unique);
  }

  fs::create_directories(out_dir);
  json artifacts = json::array();
  auto add_artifact = [&](const std::string& file, const std::string& kind, const std::string& label = {}) {
    result.artifacts.push_back(file);
    json a{{"file", file}, {"kind", kind}};
    if (!label.empty()) a["label"] = label;
    artifacts.push_back(a);
  };

  for (const auto& cmp : report_comparisons()) {
    auto out = open_out(out_dir / cmp.file, false);
    out << "comparison,runset,dataset,disease,phase,class,arm_a,dice_a_mean,dice_a_std,hd_a_mean,hd_a_std,n_runs_a,"
           "arm_b,dice_b_mean,dice_b_std,hd_b_mean,hd_b_std,n_runs_b\n";
    for (const auto& s : sets) {
      if (!s.has_metrics) continue;
      const std::string an = cmp.a.name(), bn = cmp.b.name();
      std::map<AggKey, const AggregateRow*> b_rows;
      for (const auto& r : s.aggregate)
        if (r.arm == bn) b_rows[key_of(r)] = &r;
      bool any_a = false;
      for (const auto& a : s.aggregate) {
        if (a.arm != an) continue;
        any_a = true;
        const auto it = b_rows.find(key_of(a));
        if (it == b_rows.end()) continue;
        const auto& b = *it->second;
        out << cmp.label << ',' << s.tag << ',' << a.dataset << ',' << a.disease << ',' << phase_name(a.phase) << ','
            << class_name(a.cls) << ',' << an << ',' << format_number(a.dice_mean) << ','
            << format_number(a.dice_std) << ',' << format_number(a.hd_mean) << ',' << format_number(a.hd_std) << ','
            << a.n_runs << ',' << bn << ',' << format_number(b.dice_mean) << ',' << format_number(b.dice_std) << ','
            << format_number(b.hd_mean) << ',' << format_number(b.hd_std) << ',' << b.n_runs << '\n';
      }
      if (!any_a || b_rows.empty()) note(s.tag + ": '" + cmp.label + "' lacks evaluated runs of one arm");
    }
    add_artifact(cmp.file, cmp.file == "diagonal.csv" ? "diagonal" : "ablation", cmp.label);
  }

  for (const char* metric : {"dice", "hd"}) {
    const std::string file = std::string("boxplot_") + metric + ".csv";
    auto out = open_out(out_dir / file, false);
    out << "runset,dataset,arm,run,disease,phase,class,value\n";
    for (const auto& s : sets)
      for (const auto& r : s.rows)
        out << s.tag << ',' << r.dataset << ',' << r.arm << ',' << r.run << ',' << r.disease << ','
            << phase_name(r.phase) << ',' << class_name(r.cls) << ','
            << format_number(std::string(metric) == "dice" ? r.dice : r.hd) << '\n';
    add_artifact(file, "boxplot", metric);
  }

  bool first = true;
  for (const auto& s : sets) {
    const fs::path dir = inputs[static_cast<std::size_t>(&s - sets.data())].runset;
    L1Probe probe;
    try {
      probe = probe_l1(dir);
    } catch (const Error& e) {
      note(s.tag + ": " + e.what());
    }
    for (const auto& w : probe.warnings) note(s.tag + ": " + w);
    write_l1_curves_csv(probe.curves, s.tag, out_dir / "l1_curves.csv", !first);
    write_l1_summary_csv(probe.summary, s.tag, out_dir / "l1_summary.csv", !first);
    first = false;
  }
  add_artifact("l1_curves.csv", "l1_curves");
  add_artifact("l1_summary.csv", "l1_summary");

  if (!sweep_csvs.empty()) {
    auto out = open_out(out_dir / "sweep.csv", false);
    std::string header;
    for (const auto& file : sweep_csvs) {
      std::ifstream in(file);
      if (!in) throw LoadError("cannot open sweep CSV " + file.string());
      std::string line;
      std::getline(in, line);
      if (line.rfind("mask_kind,lambda,", 0) != 0) throw FormatError(file.string() + " is not a sweep CSV");
      if (header.empty()) {
        header = line;
        out << header << '\n';
      } else if (line != header) {
        throw FormatError("sweep CSV headers differ: " + file.string());
      }
      while (std::getline(in, line))
        if (!line.empty()) out << line << '\n';
    }
    add_artifact("sweep.csv", "sweep");
  }

  json runsets = json::array();
  for (const auto& s : sets) {
    std::map<std::string, int> per_arm;
    for (const auto& e : s.index.runs)
      if (e.status == RunStatus::Complete) ++per_arm[e.arm];
    runsets.push_back({{"tag", s.tag},
                       {"dataset", s.index.dataset_name},
                       {"complete", s.index.complete},
                       {"completed_runs_per_arm", per_arm},
                       {"evaluated", s.has_metrics}});
  }
  const json manifest{{"format", "cardioseg-report"}, {"format_version", 1}, {"partial", result.partial},
                      {"notes", result.notes},          {"runsets", runsets},  {"artifacts", artifacts}};
  auto out = open_out(out_dir / "manifest.json", false);
  out << manifest.dump(2) << '\n';
  return result;
}

}  // namespace cardioseg
