#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cardioseg/data.hpp"
#include "cardioseg/masks.hpp"
#include "cardioseg/sampler.hpp"
#include "cardioseg/segmenter.hpp"

namespace cardioseg {

/// One cell of the strategy × data-condition matrix. key=true is ITD
/// (occluded training images), key=false is CTD.
struct Arm {
  Strategy strategy = Strategy::NTS;
  bool key = false;

  std::string name() const;  // e.g. "mts+itd"
  auto operator<=>(const Arm&) const = default;
};

Arm parse_arm(const std::string& text);
std::vector<Arm> all_arms();  // nts+ctd, nts+itd, mts+ctd, mts+itd

struct TrainConfig {
  Strategy strategy = Strategy::NTS;
  bool key = false;
  int epochs = 8;
  int batch_size = 8;
  MaskSpec mask;
  ModelConfig model;
  AdamSettings optim;
  std::uint64_t seed = 0;
  int runs = 5;
  bool normalize = true;  // per-slice standardization of model inputs

  Arm arm() const { return {strategy, key}; }
  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  std::map<std::string, double> disease_loss;  // MTS only
  double l1_norm = 0.0;
};

struct RunHistory {
  std::string arm;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::string checkpoint;
  double wall_seconds = 0.0;
};

nlohmann::json history_to_json(const RunHistory& h);
RunHistory history_from_json(const nlohmann::json& j);
RunHistory read_history(const std::filesystem::path& file);

/// Instrumentation hooks; all optional.
struct StepRecord {
  int epoch = 0;
  int step = 0;
  double loss = 0.0;                                      // loss used for the optimizer step
  std::vector<std::pair<std::string, double>> sub_losses;  // per disease under MTS
};

struct TrainObserver {
  std::function<void(const Tensor<float>& inputs)> on_forward_input;
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const MaskRealization&)> on_mask;
};

struct TrainResult {
  Segmenter model;
  RunHistory history;
};

/// Concatenates the disease datasets in map order (the NTS pool D).
std::vector<SliceSample> pool_datasets(const DiseaseDatasets& datasets);

/// Multi-disease-aware training: every step holds one sub-batch per disease
/// and takes a single optimizer step on the summed sub-batch losses.
TrainResult train_mts(const DiseaseDatasets& datasets, const TrainConfig& cfg, const TrainObserver& observer = {});

/// Normal training on the pooled dataset.
TrainResult train_nts(const std::vector<SliceSample>& pooled, const TrainConfig& cfg,
                      const TrainObserver& observer = {});

/// Dispatches on cfg.strategy.
TrainResult train(const DiseaseDatasets& datasets, const TrainConfig& cfg, const TrainObserver& observer = {});

// --- run sets ---

enum class RunStatus { Complete, Failed };

struct RunEntry {
  std::string arm;
  int run = 0;
  std::uint64_t seed = 0;
  std::string checkpoint;  // relative to the run-set directory
  std::string history;
  RunStatus status = RunStatus::Complete;
  std::string error;
};

struct RunSetIndex {
  std::string dataset_name;
  bool complete = true;
  std::vector<RunEntry> runs;

  const RunEntry* find(const std::string& arm, std::uint64_t seed) const;
};

inline constexpr int kRunSetFormatVersion = 1;

nlohmann::json runset_index_to_json(const RunSetIndex& index);
/// Validates the schema; throws FormatError on violations.
RunSetIndex runset_index_from_json(const nlohmann::json& j);
RunSetIndex read_runset_index(const std::filesystem::path& runset_dir);
/// Atomic write (temporary file plus rename).
void write_runset_index(const RunSetIndex& index, const std::filesystem::path& runset_dir);

/// Training settings snapshot stored with each run set (`config.json`).
nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct MatrixOptions {
  int jobs = 1;  // runs trained concurrently (threads)
  bool verbose = false;
};

/// Trains `n_runs` models per arm with seeds base.seed + 0..n_runs-1 and
/// persists checkpoints, histories, and the index under `out_dir`. Completed
/// runs already recorded in an existing index are skipped. A failed run is
/// recorded and the remaining runs continue.
RunSetIndex run_matrix(const DiseaseDatasets& datasets, const std::string& dataset_name, const TrainConfig& base,
                       const std::vector<Arm>& arms, int n_runs, const std::filesystem::path& out_dir,
                       const MatrixOptions& options = {});

}  // namespace cardioseg
