#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cardioseg/masks.hpp"
#include "cardioseg/synth.hpp"
#include "cardioseg/training.hpp"

namespace cardioseg {

/// λ grid for one mask kind. Every λ value trains `runs` models of `arm`.
struct SweepSpec {
  MaskKind kind = MaskKind::Ideal;
  std::vector<double> lambdas{0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5};
  Arm arm{Strategy::MTS, true};
  int runs = 2;

  void validate() const;
};

struct DataSettings {
  std::string train_manifest;
  std::string test_manifest;
};

/// The single JSON config shared by every subcommand. Sections: data, model,
/// train, mask, optim, eval, sweep, synth. Absent keys keep their defaults.
struct AppConfig {
  DataSettings data;
  TrainConfig train;
  std::vector<Arm> arms = all_arms();
  int jobs = 1;
  bool eval_normalize = true;
  SweepSpec sweep;
  SynthConfig synth;
};

AppConfig app_config_from_json(const nlohmann::json& j);
nlohmann::json app_config_to_json(const AppConfig& c);
/// Relative manifest paths are resolved against the config file's directory.
AppConfig load_app_config(const std::filesystem::path& file);

}  // namespace cardioseg
