#include "cardioseg/training.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

namespace cardioseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Independent random streams of one training run.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kScheduleStream = 2;
constexpr std::uint64_t kMaskStream = 3;

// Model inputs: standardized once, then masked per visit.
class InputBuilder {
 public:
  InputBuilder(const std::vector<const SliceSample*>& samples, const TrainConfig& cfg)
      : cfg_(cfg), mask_rng_(derive_seed(cfg.seed, {kMaskStream})) {
    images_.reserve(samples.size());
    for (const auto* s : samples) {
      if (s->image.rows != cfg.model.input_height || s->image.cols != cfg.model.input_width)
        throw ShapeError("sample " + s->case_id + " is " + std::to_string(s->image.rows) + "x" +
                         std::to_string(s->image.cols) + ", model expects " + std::to_string(cfg.model.input_height) +
                         "x" + std::to_string(cfg.model.input_width));
      images_.push_back(cfg.normalize ? standardize(s->image) : s->image);
      labels_.push_back(&s->label);
    }
  }

  void build(const std::vector<std::size_t>& refs, Tensor<float>& images, std::vector<LabelGrid>& labels,
             const TrainObserver& observer) {
    const int h = cfg_.model.input_height;
    const int w = cfg_.model.input_width;
    images = Tensor<float>(static_cast<int>(refs.size()), 1, h, w);
    labels.clear();
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const ImageGrid* src = &images_.at(refs[i]);
      ImageGrid masked;
      if (cfg_.key) {
        const auto mask = realize_mask(cfg_.mask, h, w, mask_rng_);
        if (observer.on_mask) observer.on_mask(mask);
        masked = apply_mask(*src, mask.grid);
        src = &masked;
      }
      std::copy(src->values.begin(), src->values.end(), images.image(static_cast<int>(i)));
      labels.push_back(*labels_.at(refs[i]));
    }
  }

 private:
  const TrainConfig& cfg_;
  Rng mask_rng_;
  std::vector<ImageGrid> images_;
  std::vector<const LabelGrid*> labels_;
};

void check_finite(double loss, int epoch, int step) {
  if (!std::isfinite(loss))
    throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

std::string Arm::name() const { return std::string(strategy_name(strategy)) + (key ? "+itd" : "+ctd"); }

Arm parse_arm(const std::string& text) {
  const auto plus = text.find('+');
  if (plus == std::string::npos) throw ConfigError("arm must look like mts+itd (got '" + text + "')");
  Arm arm;
  arm.strategy = parse_strategy(text.substr(0, plus));
  std::string data = text.substr(plus + 1);
  for (auto& c : data) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (data == "itd") arm.key = true;
  else if (data == "ctd") arm.key = false;
  else throw ConfigError("arm data condition must be ctd or itd (got '" + text + "')");
  return arm;
}

std::vector<Arm> all_arms() {
  return {{Strategy::NTS, false}, {Strategy::NTS, true}, {Strategy::MTS, false}, {Strategy::MTS, true}};
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be at least 1");
  if (runs < 1) throw ConfigError("train.runs must be at least 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (key && mask.kind == MaskKind::None) throw ConfigError("ITD training (KEY=true) requires mask.kind ideal or gaussian");
  if (key) {
    mask.validate();
    if (mask.kind == MaskKind::Ideal) (void)mask.box_side(model.input_height, model.input_width);
  }
  if (!(optim.lr >= 0.0)) throw ConfigError("optim.lr must be non-negative");
  model.validate();
}

std::vector<SliceSample> pool_datasets(const DiseaseDatasets& datasets) {
  std::vector<SliceSample> pooled;
  for (const auto& [key, ds] : datasets) pooled.insert(pooled.end(), ds.samples.begin(), ds.samples.end());
  return pooled;
}

TrainResult train_mts(const DiseaseDatasets& datasets, const TrainConfig& cfg, const TrainObserver& observer) {
  cfg.validate();
  if (cfg.strategy != Strategy::MTS) throw ConfigError("train_mts requires strategy mts");
  if (datasets.empty()) throw ConfigError("MTS training needs at least one disease dataset");
  const auto start = std::chrono::steady_clock::now();

  // One flat sample table; per-disease offsets map schedule refs into it.
  std::vector<const SliceSample*> table;
  std::vector<std::size_t> offsets;
  std::vector<std::string> names;
  for (const auto& [key, ds] : datasets) {
    offsets.push_back(table.size());
    names.push_back(key.name());
    for (const auto& s : ds.samples) table.push_back(&s);
  }
  InputBuilder inputs(table, cfg);

  TrainResult result{Segmenter(cfg.model, derive_seed(cfg.seed, {kInitStream})), {}};
  auto& model = result.model;
  AdamState<float> adam;
  const auto b = static_cast<std::size_t>(cfg.batch_size);
  const std::vector<double> weights(b * datasets.size(), 1.0 / static_cast<double>(b));

  Tensor<float> images;
  std::vector<LabelGrid> labels;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng sched(derive_seed(cfg.seed, {kScheduleStream, static_cast<std::uint64_t>(epoch)}));
    const BatchPlan plan = mts_epoch_schedule(datasets, b, sched);
    EpochRecord record;
    record.epoch = epoch;
    std::vector<double> disease_sum(datasets.size(), 0.0);
    for (std::size_t s = 0; s < plan.steps.size(); ++s) {
      std::vector<std::size_t> refs;
      for (std::size_t k = 0; k < plan.steps[s].size(); ++k)
        for (auto idx : plan.steps[s][k].sample_refs) refs.push_back(offsets[k] + idx);
      inputs.build(refs, images, labels, observer);
      if (observer.on_forward_input) observer.on_forward_input(images);

      model.zero_grad();
      const auto per_image = model.accumulate_gradients(images, labels, weights);
      StepRecord step{epoch, static_cast<int>(s), 0.0, {}};
      for (std::size_t k = 0; k < datasets.size(); ++k) {
        double sub = 0.0;
        for (std::size_t i = 0; i < b; ++i) sub += per_image[k * b + i];
        sub /= static_cast<double>(b);
        step.sub_losses.emplace_back(names[k], sub);
        step.loss += sub;
        disease_sum[k] += sub;
      }
      check_finite(step.loss, epoch, static_cast<int>(s));
      model.adam_step(adam, cfg.optim);
      record.mean_loss += step.loss;
      if (observer.on_step) observer.on_step(step);
    }
    const auto steps = static_cast<double>(plan.steps.size());
    record.mean_loss /= steps;
    for (std::size_t k = 0; k < names.size(); ++k) record.disease_loss[names[k]] = disease_sum[k] / steps;
    record.l1_norm = l1_norm(model);
    result.history.epochs.push_back(std::move(record));
  }
  result.history.arm = cfg.arm().name();
  result.history.seed = cfg.seed;
  result.history.wall_seconds = seconds_since(start);
  return result;
}

TrainResult train_nts(const std::vector<SliceSample>& pooled, const TrainConfig& cfg, const TrainObserver& observer) {
  cfg.validate();
  if (cfg.strategy != Strategy::NTS) throw ConfigError("train_nts requires strategy nts");
  if (pooled.empty()) throw ConfigError("NTS training needs a nonempty pooled dataset");
  const auto start = std::chrono::steady_clock::now();

  std::vector<const SliceSample*> table;
  for (const auto& s : pooled) table.push_back(&s);
  InputBuilder inputs(table, cfg);

  TrainResult result{Segmenter(cfg.model, derive_seed(cfg.seed, {kInitStream})), {}};
  auto& model = result.model;
  AdamState<float> adam;
  const auto b = static_cast<std::size_t>(cfg.batch_size);
  const std::vector<double> weights(b, 1.0 / static_cast<double>(b));

  Tensor<float> images;
  std::vector<LabelGrid> labels;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng sched(derive_seed(cfg.seed, {kScheduleStream, static_cast<std::uint64_t>(epoch)}));
    const BatchPlan plan = nts_epoch_schedule(pooled.size(), b, sched);
    if (plan.steps.empty())
      throw ConfigError("pooled dataset of " + std::to_string(pooled.size()) + " samples is smaller than one batch");
    EpochRecord record;
    record.epoch = epoch;
    for (std::size_t s = 0; s < plan.steps.size(); ++s) {
      inputs.build(plan.steps[s][0].sample_refs, images, labels, observer);
      if (observer.on_forward_input) observer.on_forward_input(images);
      model.zero_grad();
      const auto per_image = model.accumulate_gradients(images, labels, weights);
      StepRecord step{epoch, static_cast<int>(s), 0.0, {}};
      for (double v : per_image) step.loss += v;
      step.loss /= static_cast<double>(b);
      check_finite(step.loss, epoch, static_cast<int>(s));
      model.adam_step(adam, cfg.optim);
      record.mean_loss += step.loss;
      if (observer.on_step) observer.on_step(step);
    }
    record.mean_loss /= static_cast<double>(plan.steps.size());
    record.l1_norm = l1_norm(model);
    result.history.epochs.push_back(std::move(record));
  }
  result.history.arm = cfg.arm().name();
  result.history.seed = cfg.seed;
  result.history.wall_seconds = seconds_since(start);
  return result;
}

TrainResult train(const DiseaseDatasets& datasets, const TrainConfig& cfg, const TrainObserver& observer) {
  if (cfg.strategy == Strategy::MTS) return train_mts(datasets, cfg, observer);
  return train_nts(pool_datasets(datasets), cfg, observer);
}

// --- serialization ---

json history_to_json(const RunHistory& h) {
  json epochs = json::array();
  for (const auto& e : h.epochs) {
    json rec{{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"l1_norm", e.l1_norm}};
    if (!e.disease_loss.empty()) rec["disease_loss"] = e.disease_loss;
    epochs.push_back(std::move(rec));
  }
  return {{"arm", h.arm},
          {"seed", h.seed},
          {"checkpoint", h.checkpoint},
          {"wall_seconds", h.wall_seconds},
          {"epochs", epochs}};
}

RunHistory history_from_json(const json& j) {
  RunHistory h;
  try {
    h.arm = j.at("arm").get<std::string>();
    h.seed = j.at("seed").get<std::uint64_t>();
    h.checkpoint = j.value("checkpoint", "");
    h.wall_seconds = j.value("wall_seconds", 0.0);
    for (const auto& e : j.at("epochs")) {
      EpochRecord r;
      r.epoch = e.at("epoch").get<int>();
      r.mean_loss = e.at("mean_loss").get<double>();
      r.l1_norm = e.at("l1_norm").get<double>();
      if (e.contains("disease_loss")) r.disease_loss = e.at("disease_loss").get<std::map<std::string, double>>();
      h.epochs.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid history: ") + e.what());
  }
  return h;
}

json train_config_to_json(const TrainConfig& c) {
  return {{"strategy", strategy_name(c.strategy)},
          {"key", c.key},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"runs", c.runs},
          {"normalize", c.normalize},
          {"mask",
           {{"kind", mask_kind_name(c.mask.kind)},
            {"lambda", c.mask.lambda},
            {"paper_literal_center_range", c.mask.paper_literal_center_range}}},
          {"model", model_config_to_json(c.model)},
          {"optim", {{"lr", c.optim.lr}, {"betas", {c.optim.beta1, c.optim.beta2}}, {"eps", c.optim.eps}}}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.strategy = parse_strategy(j.value("strategy", std::string("nts")));
    c.key = j.value("key", false);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.runs = j.value("runs", c.runs);
    c.normalize = j.value("normalize", c.normalize);
    if (j.contains("mask")) {
      const auto& m = j.at("mask");
      c.mask.kind = parse_mask_kind(m.value("kind", std::string("ideal")));
      c.mask.lambda = m.value("lambda", c.mask.lambda);
      c.mask.paper_literal_center_range = m.value("paper_literal_center_range", false);
    }
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("optim")) {
      const auto& o = j.at("optim");
      c.optim.lr = o.value("lr", c.optim.lr);
      if (o.contains("betas")) {
        c.optim.beta1 = o.at("betas").at(0).get<double>();
        c.optim.beta2 = o.at("betas").at(1).get<double>();
      }
      c.optim.eps = o.value("eps", c.optim.eps);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  return c;
}

namespace {

json read_json_file(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw LoadError("cannot open " + file.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in " + file.string() + ": " + e.what());
  }
}

void write_json_atomic(const json& j, const fs::path& file) {
  if (!file.parent_path().empty()) fs::create_directories(file.parent_path());
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw LoadError("cannot write " + tmp.string());
    out << j.dump(2) << '\n';
    if (!out) throw LoadError("short write on " + tmp.string());
  }
  fs::rename(tmp, file);
}

const char* status_name(RunStatus s) { return s == RunStatus::Complete ? "complete" : "failed"; }

}  // namespace

RunHistory read_history(const fs::path& file) { return history_from_json(read_json_file(file)); }

const RunEntry* RunSetIndex::find(const std::string& arm, std::uint64_t seed) const {
  for (const auto& r : runs)
    if (r.arm == arm && r.seed == seed) return &r;
  return nullptr;
}

json runset_index_to_json(const RunSetIndex& index) {
  json runs = json::array();
  for (const auto& r : index.runs) {
    json e{{"arm", r.arm},       {"run", r.run},         {"seed", r.seed},
           {"checkpoint", r.checkpoint}, {"history", r.history}, {"status", status_name(r.status)}};
    if (!r.error.empty()) e["error"] = r.error;
    runs.push_back(std::move(e));
  }
  return {{"format", "cardioseg-runset"},
          {"format_version", kRunSetFormatVersion},
          {"dataset", index.dataset_name},
          {"complete", index.complete},
          {"runs", runs}};
}

RunSetIndex runset_index_from_json(const json& j) {
  if (!j.is_object() || j.value("format", "") != "cardioseg-runset")
    throw FormatError("not a run-set index (missing format tag)");
  if (!j.contains("format_version") || !j.at("format_version").is_number_integer())
    throw FormatError("run-set index lacks an integer format_version");
  if (j.at("format_version").get<int>() != kRunSetFormatVersion)
    throw FormatError("unsupported run-set index version " + std::to_string(j.at("format_version").get<int>()));
  RunSetIndex index;
  try {
    index.dataset_name = j.at("dataset").get<std::string>();
    index.complete = j.at("complete").get<bool>();
    for (const auto& e : j.at("runs")) {
      RunEntry r;
      r.arm = e.at("arm").get<std::string>();
      (void)parse_arm(r.arm);
      r.run = e.at("run").get<int>();
      r.seed = e.at("seed").get<std::uint64_t>();
      r.checkpoint = e.at("checkpoint").get<std::string>();
      r.history = e.at("history").get<std::string>();
      const auto status = e.at("status").get<std::string>();
      if (status == "complete") r.status = RunStatus::Complete;
      else if (status == "failed") r.status = RunStatus::Failed;
      else throw FormatError("unknown run status '" + status + "'");
      r.error = e.value("error", "");
      index.runs.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid run-set index: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid run-set index: ") + e.what());
  }
  return index;
}

RunSetIndex read_runset_index(const fs::path& runset_dir) {
  return runset_index_from_json(read_json_file(runset_dir / "index.json"));
}

void write_runset_index(const RunSetIndex& index, const fs::path& runset_dir) {
  write_json_atomic(runset_index_to_json(index), runset_dir / "index.json");
}

RunSetIndex run_matrix(const DiseaseDatasets& datasets, const std::string& dataset_name, const TrainConfig& base,
                       const std::vector<Arm>& arms, int n_runs, const fs::path& out_dir,
                       const MatrixOptions& options) {
  if (n_runs < 1) throw ConfigError("run count must be at least 1");
  if (arms.empty()) throw ConfigError("no arms selected");
  if (options.jobs < 1) throw ConfigError("jobs must be at least 1");
  for (const auto& arm : arms) {
    TrainConfig cfg = base;
    cfg.strategy = arm.strategy;
    cfg.key = arm.key;
    cfg.validate();
  }

  fs::create_directories(out_dir);
  json snapshot = train_config_to_json(base);
  snapshot.erase("strategy");
  snapshot.erase("key");
  snapshot.erase("runs");
  snapshot.erase("seed");
  const fs::path config_file = out_dir / "config.json";
  if (fs::exists(config_file)) {
    if (read_json_file(config_file) != snapshot)
      throw ConfigError("run set " + out_dir.string() + " was created with a different training configuration");
  } else {
    write_json_atomic(snapshot, config_file);
  }

  std::optional<RunSetIndex> previous;
  if (fs::exists(out_dir / "index.json")) {
    previous = read_runset_index(out_dir);
    if (previous->dataset_name != dataset_name)
      throw ConfigError("run set " + out_dir.string() + " belongs to dataset '" + previous->dataset_name + "'");
  }

  RunSetIndex index;
  index.dataset_name = dataset_name;
  index.complete = false;
  std::vector<std::size_t> pending;
  for (const auto& arm : arms)
    for (int r = 0; r < n_runs; ++r) {
      RunEntry entry;
      entry.arm = arm.name();
      entry.run = r;
      entry.seed = base.seed + static_cast<std::uint64_t>(r);
      const fs::path rel = fs::path(entry.arm) / ("seed_" + std::to_string(entry.seed));
      entry.checkpoint = (rel / "model.ckpt").generic_string();
      entry.history = (rel / "history.json").generic_string();
      const RunEntry* old = previous ? previous->find(entry.arm, entry.seed) : nullptr;
      const bool done = old && old->status == RunStatus::Complete && fs::exists(out_dir / old->checkpoint) &&
                        fs::exists(out_dir / old->history);
      if (!done) pending.push_back(index.runs.size());
      index.runs.push_back(std::move(entry));
    }

  std::mutex mutex;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t slot = next.fetch_add(1);
      if (slot >= pending.size()) return;
      RunEntry entry;
      {
        std::lock_guard lock(mutex);
        entry = index.runs[pending[slot]];
      }
      TrainConfig cfg = base;
      const Arm arm = parse_arm(entry.arm);
      cfg.strategy = arm.strategy;
      cfg.key = arm.key;
      cfg.seed = entry.seed;
      try {
        auto result = train(datasets, cfg);
        result.history.checkpoint = entry.checkpoint;
        save_checkpoint(result.model, out_dir / entry.checkpoint);
        write_json_atomic(history_to_json(result.history), out_dir / entry.history);
        entry.status = RunStatus::Complete;
        entry.error.clear();
      } catch (const std::exception& e) {
        entry.status = RunStatus::Failed;
        entry.error = e.what();
      }
      std::lock_guard lock(mutex);
      index.runs[pending[slot]] = entry;
      if (options.verbose)
        std::cerr << entry.arm << " seed " << entry.seed << ": " << status_name(entry.status)
                  << (entry.error.empty() ? "" : " (" + entry.error + ")") << '\n';
      write_runset_index(index, out_dir);
    }
  };

  const int threads = std::min<int>(options.jobs, static_cast<int>(std::max<std::size_t>(pending.size(), 1)));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  index.complete = std::all_of(index.runs.begin(), index.runs.end(),
                               [](const RunEntry& r) { return r.status == RunStatus::Complete; });
  write_runset_index(index, out_dir);
  return index;
}

}  // namespace cardioseg
