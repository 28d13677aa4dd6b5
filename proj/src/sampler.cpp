#include "cardioseg/sampler.hpp"

#include <algorithm>

namespace cardioseg {

const char* strategy_name(Strategy s) { return s == Strategy::MTS ? "mts" : "nts"; }

Strategy parse_strategy(const std::string& text) {
  std::string t = text;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (t == "mts") return Strategy::MTS;
  if (t == "nts") return Strategy::NTS;
  throw ConfigError("train.strategy must be nts or mts (got '" + text + "')");
}

namespace {

// Endless stream of indices 0..n-1: a fresh permutation each time the
// previous one is exhausted.
class Cycler {
 public:
  Cycler(std::size_t n, Rng& rng) : n_(n), rng_(rng) { refill(); }

  std::size_t next() {
    if (pos_ == order_.size()) refill();
    return order_[pos_++];
  }

 private:
  void refill() {
    order_ = rng_.permutation(n_);
    pos_ = 0;
  }

  std::size_t n_;
  Rng& rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace

BatchPlan mts_epoch_schedule(const std::vector<std::pair<DiseaseKey, std::size_t>>& sizes, std::size_t batch_size,
                             Rng& rng) {
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (sizes.empty()) throw ConfigError("MTS schedule needs at least one disease");
  std::size_t steps = 0;
  for (const auto& [key, n] : sizes) {
    if (n == 0) throw ConfigError("disease '" + key.name() + "' has an empty dataset");
    steps = std::max(steps, (n + batch_size - 1) / batch_size);
  }
  // Permutations are drawn disease by disease, so a single disease consumes the
  // generator exactly like the pooled NTS shuffle.
  std::vector<Cycler> cyclers;
  cyclers.reserve(sizes.size());
  for (const auto& entry : sizes) cyclers.emplace_back(entry.second, rng);

  BatchPlan plan;
  plan.strategy = Strategy::MTS;
  plan.steps.resize(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      SubBatch sub;
      sub.disease = sizes[k].first;
      sub.sample_refs.reserve(batch_size);
      for (std::size_t i = 0; i < batch_size; ++i) sub.sample_refs.push_back(cyclers[k].next());
      plan.steps[s].push_back(std::move(sub));
    }
  }
  return plan;
}

BatchPlan mts_epoch_schedule(const DiseaseDatasets& datasets, std::size_t batch_size, Rng& rng) {
  std::vector<std::pair<DiseaseKey, std::size_t>> sizes;
  for (const auto& [key, ds] : datasets) sizes.emplace_back(key, ds.samples.size());
  return mts_epoch_schedule(sizes, batch_size, rng);
}

BatchPlan nts_epoch_schedule(std::size_t pooled_size, std::size_t batch_size, Rng& rng) {
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (pooled_size == 0) throw ConfigError("NTS schedule needs a nonempty pooled dataset");
  const auto order = rng.permutation(pooled_size);
  BatchPlan plan;
  plan.strategy = Strategy::NTS;
  const std::size_t steps = pooled_size / batch_size;
  plan.steps.resize(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    SubBatch sub;
    sub.sample_refs.assign(order.begin() + static_cast<std::ptrdiff_t>(s * batch_size),
                           order.begin() + static_cast<std::ptrdiff_t>((s + 1) * batch_size));
    plan.steps[s].push_back(std::move(sub));
  }
  return plan;
}

}  // namespace cardioseg
