#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cardioseg/data.hpp"
#include "cardioseg/rng.hpp"

namespace cardioseg {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Shape-parameter distribution of one synthetic disease. Lengths are
/// fractions of min(H, W) measured on the basal slice at end-diastole.
struct DiseaseProfile {
  std::string name;
  Range lv_radius{0.13, 0.16};
  Range myo_thickness{0.05, 0.065};
  Range rv_width{0.10, 0.13};    // semi-axis along columns
  Range rv_height{0.22, 0.27};   // semi-axis along rows
  Range contraction{0.62, 0.72};  // ES/ED LV radius ratio
  int train_cases = 8;
  int test_cases = 2;
};

struct SynthConfig {
  std::string dataset_name = "synthetic";
  int height = 32;
  int width = 32;
  int slices = 3;
  int phases = 4;
  double apex_scale = 0.65;      // structure scale of slice 0 relative to the base slice
  double center_jitter = 0.03;   // fraction of min(H, W)
  // Class-dependent intensity means: background, RV, MYO, LV.
  std::array<double, 4> intensity{0.15, 0.80, 0.35, 0.90};
  double noise_sigma = 0.05;     // fraction of the intensity range
  int distractors = 2;           // bright background blobs (other organs)
  Range distractor_radius{0.06, 0.10};
  double distractor_intensity = 0.75;
  std::array<double, 2> pixel_spacing_mm{1.0, 1.0};
  std::vector<DiseaseProfile> diseases;

  /// Throws ConfigError when the grid cannot hold the structures.
  void validate() const;
};

SynthConfig synth_config_from_json(const nlohmann::json& j);
nlohmann::json synth_config_to_json(const SynthConfig& config);

/// A ready-to-use five-disease profile set loosely modelled on the ACDC groups.
std::vector<DiseaseProfile> default_disease_profiles();

/// Generates one phantom case in memory.
Case4D synth_case(const SynthConfig& config, const DiseaseProfile& profile, const std::string& case_id, Rng& rng);

struct SynthOutput {
  Manifest train;
  Manifest test;
  std::filesystem::path train_manifest_path;
  std::filesystem::path test_manifest_path;
};

/// Writes `out_dir/{train,test}/manifest.json` plus one case directory per
/// case. Deterministic in (config, seed).
SynthOutput synth_generate(const SynthConfig& config, std::uint64_t seed, const std::filesystem::path& out_dir);

}  // namespace cardioseg
