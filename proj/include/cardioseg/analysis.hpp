#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cardioseg/config.hpp"
#include "cardioseg/metrics.hpp"
#include "cardioseg/training.hpp"

namespace cardioseg {

// --- λ sweep ---

/// One row per λ. Dice and HD are the mean over LV, RV and MYO of the
/// per-class means; each per-class mean pools the "ALL" rows of every run and
/// both phases.
struct SweepRow {
  MaskKind kind = MaskKind::Ideal;
  double lambda = 0.0;
  double dice_avg = 0.0;
  double hd_avg = 0.0;
  int n_models = 0;
  int n_failed = 0;
};

/// Averages the class means of the pooled ("ALL") rows as described above.
std::pair<double, double> class_averaged(const std::vector<MetricRow>& rows);

/// Trains spec.runs models of spec.arm per λ into `out_dir/lambda_<λ>/`,
/// evaluates them on `test`, and writes `eval.csv` per λ plus `sweep.csv`.
std::vector<SweepRow> sweep_lambda(const SweepSpec& spec, const TrainConfig& base, const DiseaseDatasets& train_data,
                                   const std::string& dataset_name, const Manifest& test,
                                   const std::filesystem::path& out_dir, const MatrixOptions& options = {});

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& file);

// --- L1 probe ---

struct L1CurveRow {
  std::string arm;
  int run = 0;
  std::uint64_t seed = 0;
  int epoch = 0;
  double l1_norm = 0.0;
};

/// Final-epoch comparison of ITD against CTD under one strategy. Pairs match
/// runs with equal seeds.
struct L1Summary {
  Strategy strategy = Strategy::NTS;
  double itd_final_mean = 0.0;
  double ctd_final_mean = 0.0;
  int n_pairs = 0;
  int itd_greater = 0;  // pairs with ITD final l1 > CTD final l1
};

struct L1Probe {
  std::vector<L1CurveRow> curves;
  std::vector<L1Summary> summary;  // strategies with both arms present
  std::vector<std::string> warnings;
};

/// Reads every completed run's history. Missing histories are skipped with a
/// warning; a run set without any usable history is an error.
L1Probe probe_l1(const std::filesystem::path& runset_dir);

void write_l1_curves_csv(const std::vector<L1CurveRow>& rows, const std::string& runset,
                         const std::filesystem::path& file, bool append = false);
void write_l1_summary_csv(const std::vector<L1Summary>& rows, const std::string& runset,
                          const std::filesystem::path& file, bool append = false);

// --- report ---

struct ReportInput {
  std::filesystem::path runset;
  std::filesystem::path metrics_csv;  // defaults to runset/eval/metrics.csv
};

struct ReportResult {
  bool partial = false;
  std::vector<std::string> notes;  // reasons for partial
  std::vector<std::string> artifacts;
};

/// The diagonal pairing and the four ablation pairings.
struct Comparison {
  std::string label;
  std::string file;
  Arm a;
  Arm b;
};
const std::vector<Comparison>& report_comparisons();

/// Writes comparison tables, box-plot source data, L1 curves and a
/// manifest.json into `out_dir`. Read-only on the run sets.
ReportResult report(const std::vector<ReportInput>& inputs, const std::filesystem::path& out_dir,
                    const std::vector<std::filesystem::path>& sweep_csvs = {});

}  // namespace cardioseg
