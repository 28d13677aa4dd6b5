#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "cardioseg/data.hpp"
#include "cardioseg/rng.hpp"

namespace cardioseg {

enum class Strategy { NTS, MTS };

const char* strategy_name(Strategy s);  // "nts" / "mts"
Strategy parse_strategy(const std::string& text);

/// b sample indices drawn from one disease dataset, or from the pooled set
/// when `disease` is empty.
struct SubBatch {
  std::optional<DiseaseKey> disease;
  std::vector<std::size_t> sample_refs;
};

/// One epoch's optimizer steps. Under MTS every step holds one SubBatch per
/// disease, in dataset-map order; under NTS every step holds one pooled
/// SubBatch.
struct BatchPlan {
  Strategy strategy = Strategy::NTS;
  std::vector<std::vector<SubBatch>> steps;
};

/// Disease-balanced epoch: max_k ⌈n_k/b⌉ steps. Each disease is drawn from its
/// own shuffled permutation, reshuffled whenever it runs out.
BatchPlan mts_epoch_schedule(const DiseaseDatasets& datasets, std::size_t batch_size, Rng& rng);

/// Size-only overload, with diseases given in schedule order.
BatchPlan mts_epoch_schedule(const std::vector<std::pair<DiseaseKey, std::size_t>>& sizes, std::size_t batch_size,
                             Rng& rng);

/// Pooled epoch: one shuffle, ⌊L/b⌋ full batches, remainder dropped.
BatchPlan nts_epoch_schedule(std::size_t pooled_size, std::size_t batch_size, Rng& rng);

}  // namespace cardioseg
