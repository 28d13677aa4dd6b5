#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cardioseg/data.hpp"
#include "cardioseg/segmenter.hpp"

namespace cardioseg {

/// Foreground indicator (0/1) for one class of a label map.
using BinaryMask = Grid<std::uint8_t>;

BinaryMask binarize(const LabelGrid& label, int cls);

/// 2|A∩B| / (|A|+|B|); 1 when both masks are empty.
double dice(const BinaryMask& a, const BinaryMask& b);

struct ContourPoint {
  int row = 0;
  int col = 0;
  bool operator==(const ContourPoint&) const = default;
};
using ContourSet = std::vector<ContourPoint>;

/// Foreground pixels with a background 4-neighbour; pixels outside the image
/// count as background. Row-major order.
ContourSet extract_contour(const BinaryMask& mask);

/// Symmetric Hausdorff distance in spacing units. One empty contour yields
/// the image diagonal of a rows×cols grid; two empty contours yield 0.
double hausdorff(const ContourSet& a, const ContourSet& b, PixelSpacing spacing, int rows, int cols);

/// Maps the original-frame images of one case (ED slices, then ES slices) to
/// original-frame label predictions.
using SlicePredictor = std::function<std::vector<LabelGrid>(const std::vector<ImageGrid>&)>;

/// Resizes inputs to the model size, standardizes them when `normalize`,
/// takes the per-pixel argmax, and restores each prediction to its source
/// shape.
SlicePredictor model_predictor(const Segmenter& model, bool normalize);

/// Per-case metrics for one (phase, class).
struct CaseMetric {
  std::string case_id;
  std::string disease;
  Phase phase = Phase::ED;
  int cls = 0;
  double dice = 0.0;
  double hd = 0.0;       // mean over slices where either mask is nonempty
  bool hd_defined = false;
  int n_slices = 0;
  std::string arm;
  int run = 0;
};

/// Case-level means aggregated per (disease, phase, class); disease "ALL"
/// pools every case.
struct MetricRow {
  std::string arm;
  int run = 0;
  std::string dataset;
  std::string disease;
  Phase phase = Phase::ED;
  int cls = 0;
  double dice = 0.0;
  double hd = 0.0;
  int n_slices = 0;
  double dice_std = 0.0;  // across cases
  double hd_std = 0.0;
  int n_cases = 0;
};

struct MetricsTable {
  std::vector<MetricRow> rows;
  std::vector<CaseMetric> cases;
};

/// Sample standard deviation (n−1); 0 for fewer than two values.
double sample_std(const std::vector<double>& values);
double mean_of(const std::vector<double>& values);

MetricsTable evaluate(const SlicePredictor& predict, const std::vector<Case4D>& cases, const std::string& arm, int run,
                      const std::string& dataset);
MetricsTable evaluate(const Segmenter& model, bool normalize, const Manifest& test_manifest, const std::string& arm,
                      int run);

/// Mean and sample std across runs of the per-run rows, keyed by
/// (arm, dataset, disease, phase, class).
struct AggregateRow {
  std::string arm;
  std::string dataset;
  std::string disease;
  Phase phase = Phase::ED;
  int cls = 0;
  double dice_mean = 0.0;
  double dice_std = 0.0;
  double hd_mean = 0.0;
  double hd_std = 0.0;
  int n_runs = 0;
};

std::vector<AggregateRow> aggregate_runs(const std::vector<MetricRow>& rows);

struct RunFailure {
  std::string arm;
  int run = 0;
  std::string error;
};

struct CrossValidation {
  MetricsTable table;  // all runs
  std::vector<AggregateRow> aggregate;
  std::vector<RunFailure> failures;
};

/// Evaluates every completed run of a run set on another dataset without any
/// parameter update; each checkpoint's hash is compared before and after.
CrossValidation cross_validate(const std::filesystem::path& runset_dir, const Manifest& test_manifest,
                               bool normalize);

/// FNV-1a over the file bytes.
std::uint64_t file_hash(const std::filesystem::path& file);

void write_metrics_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& file);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& file);
void write_case_metrics_csv(const std::vector<CaseMetric>& cases, const std::filesystem::path& file);
void write_aggregate_csv(const std::vector<AggregateRow>& rows, const std::filesystem::path& file);

/// Fixed-precision CSV number formatting ("%.9g"; "nan" for NaN).
std::string format_number(double v);

}  // namespace cardioseg
