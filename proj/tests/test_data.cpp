#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "cardioseg/data.hpp"
#include "cardioseg/rng.hpp"
#include "cardioseg/synth.hpp"
#include "test_util.hpp"

using namespace cardioseg;
namespace fs = std::filesystem;

namespace {

Case4D make_case(int p, int h, int w, int z, std::uint64_t seed, const std::string& disease = "NOR") {
  Case4D c;
  c.case_id = "c" + std::to_string(seed);
  c.disease = DiseaseKey(disease);
  c.phases = p;
  c.height = h;
  c.width = w;
  c.slices = z;
  c.ed_index = 0;
  c.es_index = p / 2;
  Rng rng(seed);
  c.image.resize(c.voxel_count());
  c.label.resize(c.voxel_count());
  for (auto& v : c.image) v = static_cast<float>(rng.normal());
  for (auto& v : c.label) v = static_cast<std::uint8_t>(rng.uniform_int(0, 3));
  return c;
}

SliceSample make_sample(int h, int w, std::uint64_t seed) {
  SliceSample s;
  s.case_id = "s";
  s.disease = DiseaseKey("NOR");
  s.image = ImageGrid(h, w);
  s.label = LabelGrid(h, w);
  Rng rng(seed);
  for (auto& v : s.image.values) v = static_cast<float>(rng.uniform(1.0, 2.0));
  for (auto& v : s.label.values) v = static_cast<std::uint8_t>(rng.uniform_int(1, 3));
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("restructure_case yields 2*Z samples in phase/slice order") {
  const Case4D c = make_case(12, 128, 128, 9, 1);
  const auto samples = restructure_case(c);
  REQUIRE(samples.size() == 18);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    CHECK(s.phase == (i < 9 ? Phase::ED : Phase::ES));
    CHECK(s.slice_index == static_cast<int>(i % 9));
    CHECK(s.image.rows == 128);
    CHECK(s.image.cols == 128);
  }
  // Plane contents come straight from the (P,H,W,Z) volume.
  const auto& es4 = samples[9 + 4];
  for (int r : {0, 17, 127})
    for (int col : {0, 64, 127}) {
      CHECK(es4.image.at(r, col) == c.image[c.offset(c.es_index, r, col, 4)]);
      CHECK(es4.label.at(r, col) == c.label[c.offset(c.es_index, r, col, 4)]);
    }
}

TEST_CASE("restructure_case edge cases") {
  CHECK(restructure_case(make_case(2, 4, 4, 1, 2)).size() == 2);

  Case4D zero = make_case(3, 5, 5, 3, 3);
  std::fill(zero.label.begin(), zero.label.end(), 0);
  const auto samples = restructure_case(zero);
  CHECK(samples.size() == 6);
  for (const auto& s : samples)
    for (auto v : s.label.values) CHECK(v == 0);

  Case4D bad = make_case(3, 4, 4, 2, 4);
  bad.es_index = bad.ed_index;
  CHECK_THROWS_AS(restructure_case(bad), InvalidCaseError);
  bad = make_case(3, 4, 4, 2, 4);
  bad.label[5] = 4;
  CHECK_THROWS_AS(bad.validate(), InvalidCaseError);
  bad = make_case(3, 4, 4, 2, 4);
  bad.es_index = 3;
  CHECK_THROWS_AS(bad.validate(), InvalidCaseError);
}

TEST_CASE("resize_to pads symmetrically") {
  const SliceSample s = make_sample(128, 128, 5);
  const auto out = resize_to(s, 160, 160);
  REQUIRE(out.image.rows == 160);
  int r_min = 160, c_min = 160, r_max = -1, c_max = -1;
  for (int r = 0; r < 160; ++r)
    for (int c = 0; c < 160; ++c)
      if (out.image.at(r, c) != 0.0f) {
        r_min = std::min(r_min, r);
        c_min = std::min(c_min, c);
        r_max = std::max(r_max, r);
        c_max = std::max(c_max, c);
      }
  CHECK(r_min == 16);
  CHECK(c_min == 16);
  CHECK(r_max == 143);
  CHECK(c_max == 143);
  CHECK(out.label.at(0, 0) == 0);
  CHECK(out.label.at(16, 16) == s.label.at(0, 0));
}

TEST_CASE("resize_to crops around the center") {
  const SliceSample s = make_sample(200, 180, 6);
  const auto out = resize_to(s, 160, 160);
  for (int r = 0; r < 160; ++r)
    for (int c = 0; c < 160; ++c) {
      REQUIRE(out.image.at(r, c) == s.image.at(r + 20, c + 10));
      REQUIRE(out.label.at(r, c) == s.label.at(r + 20, c + 10));
    }
  const auto same = resize_to(s, 200, 180);
  CHECK(same.image == s.image);
  CHECK(same.label == s.label);
}

TEST_CASE("resize_to odd margins go bottom/right") {
  const SliceSample s = make_sample(3, 3, 7);
  const auto padded = resize_to(s, 6, 6);  // margin 3: 1 top/left, 2 bottom/right
  CHECK(padded.image.at(1, 1) == s.image.at(0, 0));
  CHECK(padded.image.at(3, 3) == s.image.at(2, 2));
  CHECK(padded.image.at(4, 4) == 0.0f);
  const SliceSample big = make_sample(6, 6, 8);
  const auto cropped = resize_to(big, 3, 3);  // drop 1 top/left, 2 bottom/right
  CHECK(cropped.image.at(0, 0) == big.image.at(1, 1));
}

TEST_CASE("resize_to properties: idempotence and foreground preservation") {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const int h = static_cast<int>(rng.uniform_int(1, 20));
    const int w = static_cast<int>(rng.uniform_int(1, 20));
    const int th = static_cast<int>(rng.uniform_int(1, 20));
    const int tw = static_cast<int>(rng.uniform_int(1, 20));
    SliceSample s = make_sample(h, w, 100 + trial);
    const auto once = resize_to(s, th, tw);
    const auto twice = resize_to(once, th, tw);
    REQUIRE(once.image == twice.image);
    REQUIRE(once.label == twice.label);

    // Foreground limited to a centered block that fits in the target.
    std::fill(s.label.values.begin(), s.label.values.end(), 0);
    const int bh = std::min(h, th), bw = std::min(w, tw);
    const int r0 = (h - bh) / 2, c0 = (w - bw) / 2;
    for (int r = r0; r < r0 + bh; ++r)
      for (int c = c0; c < c0 + bw; ++c) s.label.at(r, c) = 2;
    const auto out = resize_to(s, th, tw);
    const auto fg = std::count_if(out.label.values.begin(), out.label.values.end(), [](auto v) { return v != 0; });
    REQUIRE(fg == bh * bw);
  }
}

TEST_CASE("standardize gives zero mean and unit variance") {
  const auto s = make_sample(16, 16, 10);
  const auto z = standardize(s.image);
  double m = 0, v = 0;
  for (float x : z.values) m += x;
  m /= z.size();
  for (float x : z.values) v += (x - m) * (x - m);
  v /= z.size();
  CHECK(m == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(v == doctest::Approx(1.0).epsilon(1e-5));
  const ImageGrid flat(4, 4, 3.0f);
  for (float x : standardize(flat).values) CHECK(x == 0.0f);
}

TEST_CASE("case files round-trip bit-exactly") {
  test::TempDir tmp;
  Case4D c = make_case(4, 7, 5, 3, 11, "DCM");
  c.image[3] = -0.0f;
  c.image[4] = 1e-40f;  // subnormal survives
  c.spacing = PixelSpacing{1.25, 0.75};
  write_case(c, tmp.path() / "case");
  const Case4D back = read_case(tmp.path() / "case");
  CHECK(back == c);
  CHECK(std::signbit(back.image[3]));
}

TEST_CASE("case reader rejects corrupt payloads") {
  test::TempDir tmp;
  const Case4D c = make_case(2, 4, 4, 2, 12);
  const fs::path dir = tmp.path() / "case";
  write_case(c, dir);

  SUBCASE("truncated image") {
    const std::string bytes = slurp(dir / "image.raw");
    std::ofstream(dir / "image.raw", std::ios::binary | std::ios::trunc).write(bytes.data(), bytes.size() - 1);
    CHECK_THROWS_AS(read_case(dir), ShapeError);
  }
  SUBCASE("label out of range") {
    std::string bytes = slurp(dir / "label.raw");
    bytes[7] = 5;
    std::ofstream(dir / "label.raw", std::ios::binary | std::ios::trunc).write(bytes.data(), bytes.size());
    CHECK_THROWS_AS(read_case(dir), InvalidCaseError);
  }
  SUBCASE("unknown version") {
    auto meta = nlohmann::json::parse(slurp(dir / "meta.json"));
    meta["format_version"] = 2;
    std::ofstream(dir / "meta.json", std::ios::trunc) << meta.dump();
    CHECK_THROWS_AS(read_case(dir), FormatError);
  }
  SUBCASE("malformed header") {
    std::ofstream(dir / "meta.json", std::ios::trunc) << "{ not json";
    CHECK_THROWS_AS(read_case(dir), FormatError);
  }
}

TEST_CASE("build_disease_datasets groups and counts samples") {
  test::TempDir tmp;
  Manifest m;
  m.dataset_name = "mini";
  m.split = Split::Train;
  m.diseases = {DiseaseKey("A"), DiseaseKey("B")};
  for (int i = 0; i < 4; ++i) {
    const Case4D c = make_case(3, 8, 8, 3, 20 + i, i < 2 ? "A" : "B");
    write_case(c, tmp.path() / c.case_id);
    m.cases.push_back({c.case_id, c.disease, c.case_id, std::nullopt});
  }
  write_manifest(m, tmp.path() / "manifest.json");
  const Manifest loaded = read_manifest(tmp.path() / "manifest.json");
  const auto ds = build_disease_datasets(loaded, 10, 6);
  REQUIRE(ds.size() == 2);
  std::size_t total = 0;
  for (const auto& [key, d] : ds) {
    CHECK(d.samples.size() == 2 * 3 * 2);
    for (const auto& s : d.samples) {
      CHECK(s.disease == key);
      CHECK(s.image.rows == 10);
      CHECK(s.image.cols == 6);
    }
    total += d.samples.size();
  }
  CHECK(total == 2 * 3 * 4);

  m.cases[1].path = "missing_case";
  write_manifest(m, tmp.path() / "bad.json");
  try {
    (void)build_disease_datasets(read_manifest(tmp.path() / "bad.json"), 8, 8);
    FAIL("expected a load error");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find(m.cases[1].case_id) != std::string::npos);
  }
}

TEST_CASE("manifest validation") {
  Manifest m;
  m.dataset_name = "x";
  m.diseases = {DiseaseKey("A"), DiseaseKey("A")};
  CHECK_THROWS_AS(m.validate(), ConfigError);
  m.diseases = {DiseaseKey("A")};
  m.cases.push_back({"c", DiseaseKey("B"), "c", std::nullopt});
  CHECK_THROWS_AS(m.validate(), ConfigError);
  CHECK_THROWS(DiseaseKey(""));
}

TEST_CASE("synthetic generator is deterministic") {
  test::TempDir a, b;
  SynthConfig cfg;
  cfg.phases = 4;
  cfg.slices = 3;
  cfg.diseases = {default_disease_profiles()[0], default_disease_profiles()[4]};
  for (auto& p : cfg.diseases) {
    p.train_cases = 2;
    p.test_cases = 1;
  }
  synth_generate(cfg, 7, a.path());
  synth_generate(cfg, 7, b.path());
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a.path());
    REQUIRE(fs::exists(b.path() / rel));
    CHECK(slurp(entry.path()) == slurp(b.path() / rel));
    ++files;
  }
  CHECK(files == 2 + 3 * 6);  // two manifests, three files per case
}

TEST_CASE("synthetic phantoms contain every class on mid slices") {
  SynthConfig cfg;
  for (const auto& profile : default_disease_profiles()) {
    Rng rng(derive_seed(3, {static_cast<std::uint64_t>(profile.name.size())}));
    for (int i = 0; i < 5; ++i) {
      const Case4D c = synth_case(cfg, profile, "p", rng);
      c.validate();
      for (int phase : {c.ed_index, c.es_index}) {
        int counts[4] = {0, 0, 0, 0};
        for (int r = 0; r < c.height; ++r)
          for (int col = 0; col < c.width; ++col) ++counts[c.label[c.offset(phase, r, col, c.slices / 2)]];
        for (int k = 1; k < 4; ++k) CHECK_MESSAGE(counts[k] > 0, profile.name << " class " << k);
      }
    }
  }
}

TEST_CASE("enlarged-RV disease has more RV pixels than normal") {
  SynthConfig cfg;
  const auto profiles = default_disease_profiles();
  auto rv_pixels = [&](const DiseaseProfile& p) {
    Rng rng(derive_seed(99, {static_cast<std::uint64_t>(p.name.front())}));
    long total = 0;
    for (int i = 0; i < 20; ++i) {
      const Case4D c = synth_case(cfg, p, "x", rng);
      total += std::count(c.label.begin(), c.label.end(), std::uint8_t{1});
    }
    return total;
  };
  const auto nor = std::find_if(profiles.begin(), profiles.end(), [](auto& p) { return p.name == "NOR"; });
  const auto arv = std::find_if(profiles.begin(), profiles.end(), [](auto& p) { return p.name == "ARV"; });
  REQUIRE(nor != profiles.end());
  REQUIRE(arv != profiles.end());
  CHECK(rv_pixels(*arv) > rv_pixels(*nor));
}

TEST_CASE("synthetic config rejects grids too small for the structures") {
  SynthConfig cfg;
  cfg.height = 8;
  cfg.width = 8;
  cfg.diseases = default_disease_profiles();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.height = cfg.width = 32;
  CHECK_NOTHROW(cfg.validate());
  cfg.diseases.resize(1);
  CHECK_THROWS_AS(cfg.validate(), ConfigError);  // needs two diseases
}
