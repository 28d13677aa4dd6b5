#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include <nlohmann/json.hpp>

#include "cardioseg/masks.hpp"
#include "cardioseg/training.hpp"
#include "test_util.hpp"

using namespace cardioseg;
namespace fs = std::filesystem;

namespace {

// Blob-on-background slices: the foreground class is readable from intensity.
DiseaseDatasets toy_datasets(std::initializer_list<std::pair<const char*, int>> spec, int size = 8,
                             std::uint64_t seed = 1) {
  DiseaseDatasets out;
  Rng rng(seed);
  for (const auto& [name, n] : spec) {
    DiseaseDataset ds;
    ds.disease = DiseaseKey(name);
    for (int i = 0; i < n; ++i) {
      SliceSample s;
      s.case_id = std::string(name) + std::to_string(i / 2);
      s.disease = ds.disease;
      s.phase = i % 2 ? Phase::ES : Phase::ED;
      s.image = ImageGrid(size, size);
      s.label = LabelGrid(size, size);
      const int cls = static_cast<int>(rng.uniform_int(1, 3));
      const int r0 = static_cast<int>(rng.uniform_int(0, size / 2));
      const int c0 = static_cast<int>(rng.uniform_int(0, size / 2));
      for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
          const bool in = r >= r0 && r < r0 + size / 2 && c >= c0 && c < c0 + size / 2;
          s.label.at(r, c) = in ? static_cast<std::uint8_t>(cls) : 0;
          s.image.at(r, c) = static_cast<float>((in ? 0.3 * cls : 0.0) + 0.05 * rng.normal());
        }
      ds.samples.push_back(std::move(s));
    }
    out.emplace(ds.disease, std::move(ds));
  }
  return out;
}

TrainConfig tiny_cfg(Strategy strategy, bool key) {
  TrainConfig c;
  c.strategy = strategy;
  c.key = key;
  c.epochs = 2;
  c.batch_size = 4;
  c.seed = 5;
  c.model.depth = 1;
  c.model.base_channels = 2;
  c.model.input_height = 8;
  c.model.input_width = 8;
  c.mask = MaskSpec{MaskKind::Ideal, 0.25, false};
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("arms") {
  CHECK(parse_arm("mts+itd") == Arm{Strategy::MTS, true});
  CHECK(parse_arm("NTS+CTD") == Arm{Strategy::NTS, false});
  CHECK(Arm{Strategy::MTS, false}.name() == "mts+ctd");
  CHECK_THROWS_AS(parse_arm("mts"), ConfigError);
  CHECK_THROWS_AS(parse_arm("mts+xtd"), ConfigError);
  const auto arms = all_arms();
  REQUIRE(arms.size() == 4);
  CHECK(arms.front().name() == "nts+ctd");
}

TEST_CASE("training config validation") {
  auto c = tiny_cfg(Strategy::NTS, false);
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_cfg(Strategy::NTS, true);
  c.mask.kind = MaskKind::None;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_cfg(Strategy::NTS, false);
  c.runs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_cfg(Strategy::NTS, false);
  c.mask.kind = MaskKind::None;  // CTD needs no mask
  CHECK_NOTHROW(c.validate());

  const auto ds = toy_datasets({{"A", 8}});
  CHECK_THROWS_AS(train_mts(ds, tiny_cfg(Strategy::NTS, false)), ConfigError);
  CHECK_THROWS_AS(train_nts(pool_datasets(ds), tiny_cfg(Strategy::MTS, false)), ConfigError);
}

TEST_CASE("config JSON round trip") {
  auto c = tiny_cfg(Strategy::MTS, true);
  c.mask = MaskSpec{MaskKind::Gaussian, 0.4, true};
  c.optim.lr = 0.002;
  c.normalize = false;
  const auto back = train_config_from_json(train_config_to_json(c));
  CHECK(back.strategy == c.strategy);
  CHECK(back.key == c.key);
  CHECK(back.mask.kind == MaskKind::Gaussian);
  CHECK(back.mask.paper_literal_center_range);
  CHECK(back.optim.lr == 0.002);
  CHECK(back.model == c.model);
  CHECK_FALSE(back.normalize);
  CHECK(train_config_to_json(back) == train_config_to_json(c));
}

TEST_CASE("MTS: one optimizer step per schedule step on the summed loss") {
  const auto ds = toy_datasets({{"A", 12}, {"B", 8}, {"C", 4}, {"D", 8}, {"E", 6}});
  auto cfg = tiny_cfg(Strategy::MTS, false);
  cfg.batch_size = 4;
  std::vector<StepRecord> steps;
  TrainObserver obs;
  obs.on_step = [&](const StepRecord& s) { steps.push_back(s); };
  const auto result = train_mts(ds, cfg, obs);

  REQUIRE(result.history.epochs.size() == 2);
  CHECK(steps.size() == 2 * 3);  // ceil(12/4) per epoch
  for (const auto& s : steps) {
    REQUIRE(s.sub_losses.size() == 5);
    double sum = 0.0;
    for (const auto& [name, v] : s.sub_losses) sum += v;
    CHECK(std::abs(sum - s.loss) <= 1e-6);
    CHECK(std::isfinite(s.loss));
  }
  for (const auto& e : result.history.epochs) {
    CHECK(e.disease_loss.size() == 5);
    CHECK(std::isfinite(e.l1_norm));
  }
  CHECK(result.history.arm == "mts+ctd");
}

TEST_CASE("ITD inputs carry exactly alpha^2 zeros") {
  // Constant probe images without standardization: only the mask makes zeros.
  auto ds = toy_datasets({{"A", 8}, {"B", 8}}, 16);
  for (auto& [k, d] : ds)
    for (auto& s : d.samples) std::fill(s.image.values.begin(), s.image.values.end(), 2.0f);
  for (auto strategy : {Strategy::MTS, Strategy::NTS}) {
    auto cfg = tiny_cfg(strategy, true);
    cfg.model.input_height = cfg.model.input_width = 16;
    cfg.normalize = false;
    const int alpha = cfg.mask.box_side(16, 16);
    int images = 0;
    TrainObserver obs;
    obs.on_forward_input = [&](const Tensor<float>& x) {
      for (int i = 0; i < x.n; ++i) {
        const float* p = x.image(i);
        REQUIRE(std::count(p, p + x.image_stride(), 0.0f) == alpha * alpha);
        ++images;
      }
    };
    (void)train(ds, cfg, obs);
    CHECK(images > 0);
  }
}

TEST_CASE("CTD inputs equal the standardized dataset images") {
  const auto ds = toy_datasets({{"A", 8}});
  const auto pooled = pool_datasets(ds);
  auto cfg = tiny_cfg(Strategy::NTS, false);
  cfg.epochs = 1;
  std::vector<ImageGrid> expected;
  for (const auto& s : pooled) expected.push_back(standardize(s.image));
  int matched = 0;
  TrainObserver obs;
  obs.on_forward_input = [&](const Tensor<float>& x) {
    for (int i = 0; i < x.n; ++i) {
      const std::vector<float> got(x.image(i), x.image(i) + x.image_stride());
      const bool found = std::any_of(expected.begin(), expected.end(), [&](const ImageGrid& e) { return e.values == got; });
      CHECK(found);
      matched += found;
    }
  };
  obs.on_mask = [](const MaskRealization&) { FAIL("CTD must not draw masks"); };
  (void)train_nts(pooled, cfg, obs);
  CHECK(matched == 8);
}

TEST_CASE("masked-visit bookkeeping: one fresh mask per image per visit") {
  const auto ds = toy_datasets({{"A", 100}});
  auto cfg = tiny_cfg(Strategy::NTS, true);
  cfg.epochs = 10;
  cfg.batch_size = 10;
  int masks = 0;
  std::set<std::pair<int, int>> centers;
  TrainObserver obs;
  obs.on_mask = [&](const MaskRealization& m) {
    ++masks;
    centers.insert({m.center.row, m.center.col});
  };
  (void)train_nts(pool_datasets(ds), cfg, obs);
  CHECK(masks == 10 * 100);
  CHECK(centers.size() > 1);
}

TEST_CASE("single disease: MTS and NTS follow identical trajectories") {
  const auto ds = toy_datasets({{"A", 16}});
  auto m = tiny_cfg(Strategy::MTS, false);
  auto n = tiny_cfg(Strategy::NTS, false);
  m.epochs = n.epochs = 3;
  std::vector<double> lm, ln;
  TrainObserver om, on;
  om.on_step = [&](const StepRecord& s) { lm.push_back(s.loss); };
  on.on_step = [&](const StepRecord& s) { ln.push_back(s.loss); };
  const auto rm = train_mts(ds, m, om);
  const auto rn = train_nts(pool_datasets(ds), n, on);
  REQUIRE(lm.size() == ln.size());
  for (std::size_t i = 0; i < lm.size(); ++i) CHECK(std::abs(lm[i] - ln[i]) <= 1e-6);
  CHECK(std::abs(rm.history.epochs.back().l1_norm - rn.history.epochs.back().l1_norm) <= 1e-6);
}

TEST_CASE("training is reproducible and the loss falls") {
  const auto ds = toy_datasets({{"A", 16}, {"B", 16}});
  auto cfg = tiny_cfg(Strategy::NTS, false);
  cfg.epochs = 6;
  cfg.optim.lr = 5e-3;
  const auto a = train(ds, cfg);
  const auto b = train(ds, cfg);
  REQUIRE(a.history.epochs.size() == 6);
  for (std::size_t e = 0; e < 6; ++e) {
    CHECK(a.history.epochs[e].mean_loss == b.history.epochs[e].mean_loss);
    CHECK(a.history.epochs[e].l1_norm == b.history.epochs[e].l1_norm);
  }
  CHECK(a.history.epochs.back().mean_loss < a.history.epochs.front().mean_loss);
}

TEST_CASE("input shape must match the model") {
  const auto ds = toy_datasets({{"A", 8}}, 12);
  CHECK_THROWS_AS(train(ds, tiny_cfg(Strategy::NTS, false)), ShapeError);
}

TEST_CASE("history JSON round trip") {
  RunHistory h;
  h.arm = "mts+itd";
  h.seed = 3;
  h.checkpoint = "mts+itd/seed_3/model.ckpt";
  h.wall_seconds = 1.5;
  h.epochs.push_back({1, 0.5, {{"A", 0.2}, {"B", 0.3}}, 12.0});
  h.epochs.push_back({2, 0.25, {}, 13.0});
  const auto back = history_from_json(history_to_json(h));
  CHECK(back.arm == h.arm);
  CHECK(back.epochs.size() == 2);
  CHECK(back.epochs[0].disease_loss.at("B") == 0.3);
  CHECK(back.epochs[1].l1_norm == 13.0);
  CHECK_THROWS_AS(history_from_json(nlohmann::json{{"arm", "x"}}), FormatError);
}

TEST_CASE("run-set index schema") {
  RunSetIndex idx;
  idx.dataset_name = "toy";
  idx.complete = false;
  idx.runs.push_back({"nts+ctd", 0, 10, "a/model.ckpt", "a/history.json", RunStatus::Complete, ""});
  idx.runs.push_back({"mts+itd", 1, 11, "b/model.ckpt", "b/history.json", RunStatus::Failed, "boom"});
  const auto j = runset_index_to_json(idx);
  const auto back = runset_index_from_json(j);
  CHECK(runset_index_to_json(back) == j);
  CHECK(back.find("mts+itd", 11)->error == "boom");
  CHECK(back.find("mts+itd", 12) == nullptr);

  auto bad = j;
  bad["format_version"] = 99;
  CHECK_THROWS_AS(runset_index_from_json(bad), FormatError);
  bad = j;
  bad["runs"][0]["status"] = "maybe";
  CHECK_THROWS_AS(runset_index_from_json(bad), FormatError);
  bad = j;
  bad["runs"][0]["arm"] = "sgd+ctd";
  CHECK_THROWS_AS(runset_index_from_json(bad), FormatError);
  bad = j;
  bad["runs"][0].erase("seed");
  CHECK_THROWS_AS(runset_index_from_json(bad), FormatError);
  CHECK_THROWS_AS(runset_index_from_json(nlohmann::json::array()), FormatError);
}

TEST_CASE("run matrix persists, resumes, and records failures") {
  test::TempDir tmp;
  const auto ds = toy_datasets({{"A", 8}, {"B", 8}});
  auto base = tiny_cfg(Strategy::NTS, false);
  base.epochs = 1;
  base.seed = 40;
  const fs::path out = tmp.path() / "rs";

  auto idx = run_matrix(ds, "toy", base, all_arms(), 2, out);
  CHECK(idx.complete);
  REQUIRE(idx.runs.size() == 8);
  int ckpts = 0, hists = 0;
  for (const auto& e : fs::recursive_directory_iterator(out)) {
    ckpts += e.path().filename() == "model.ckpt";
    hists += e.path().filename() == "history.json";
  }
  CHECK(ckpts == 8);
  CHECK(hists == 8);
  CHECK(fs::exists(out / "index.json"));
  const auto reread = read_runset_index(out);
  CHECK(runset_index_to_json(reread) == runset_index_to_json(idx));
  for (const auto& r : idx.runs) {
    const auto h = read_history(out / r.history);
    CHECK(h.arm == r.arm);
    CHECK(h.seed == r.seed);
    CHECK(h.epochs.size() == 1);
  }

  // Resume: completed runs are left untouched.
  const auto before = fs::last_write_time(out / idx.runs[0].checkpoint);
  const auto ckpt_bytes = slurp(out / idx.runs[0].checkpoint);
  const auto again = run_matrix(ds, "toy", base, all_arms(), 2, out);
  CHECK(fs::last_write_time(out / idx.runs[0].checkpoint) == before);
  CHECK(slurp(out / idx.runs[0].checkpoint) == ckpt_bytes);
  CHECK(runset_index_to_json(again) == runset_index_to_json(idx));

  // A different configuration cannot reuse the directory.
  auto other = base;
  other.epochs = 2;
  CHECK_THROWS_AS(run_matrix(ds, "toy", other, all_arms(), 2, out), ConfigError);

  // A failing run is recorded; the others still complete.
  const fs::path out2 = tmp.path() / "rs2";
  fs::create_directories(out2 / "mts+ctd" / "seed_41" / "model.ckpt" / "blocker");
  const auto partial = run_matrix(ds, "toy", base, all_arms(), 2, out2);
  CHECK_FALSE(partial.complete);
  int failed = 0;
  for (const auto& r : partial.runs) {
    if (r.status == RunStatus::Failed) {
      ++failed;
      CHECK(r.arm == "mts+ctd");
      CHECK(r.seed == 41);
      CHECK_FALSE(r.error.empty());
    }
  }
  CHECK(failed == 1);
  CHECK_FALSE(read_runset_index(out2).complete);
}

TEST_CASE("parallel run matrix equals sequential execution") {
  test::TempDir tmp;
  const auto ds = toy_datasets({{"A", 8}, {"B", 8}});
  auto base = tiny_cfg(Strategy::NTS, false);
  base.epochs = 1;
  const auto seq = run_matrix(ds, "toy", base, all_arms(), 2, tmp.path() / "seq");
  MatrixOptions opts;
  opts.jobs = 3;
  const auto par = run_matrix(ds, "toy", base, all_arms(), 2, tmp.path() / "par", opts);
  CHECK(runset_index_to_json(seq) == runset_index_to_json(par));
  for (const auto& r : seq.runs)
    CHECK(slurp(tmp.path() / "seq" / r.checkpoint) == slurp(tmp.path() / "par" / r.checkpoint));
}
