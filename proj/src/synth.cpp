#include "cardioseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include <nlohmann/json.hpp>

namespace cardioseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kRvOffset = 0.25;    // RV ellipse center sits this many semi-axes outside the MYO
constexpr double kMyoThickening = 0.35;
constexpr double kRvContraction = 0.25;

// Largest distance from the LV center reached by any structure, over ED (t=0)
// and ES (t=1) geometry on the basal slice.
double extent_fraction(const DiseaseProfile& d) {
  double extent = d.rv_height.hi;
  for (double t : {0.0, 1.0}) {
    const double outer = d.lv_radius.hi * (1.0 - t * (1.0 - d.contraction.hi)) +
                         d.myo_thickness.hi * (1.0 + kMyoThickening * t);
    extent = std::max(extent, outer + (1.0 + kRvOffset) * d.rv_width.hi * (1.0 - kRvContraction * t));
  }
  return extent;
}

void check_range(const Range& r, const std::string& what) {
  if (!(r.lo > 0.0) || r.hi < r.lo) throw ConfigError("synthetic profile range '" + what + "' must satisfy 0 < lo <= hi");
}

Range range_from(const json& j, const char* key, Range fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  return Range{v.at(0).get<double>(), v.at(1).get<double>()};
}

}  // namespace

void SynthConfig::validate() const {
  if (height < 1 || width < 1 || slices < 1 || phases < 2)
    throw ConfigError("synthetic grid needs H, W, Z >= 1 and P >= 2");
  if (diseases.size() < 2) throw ConfigError("synthetic config needs at least two diseases");
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
  if (apex_scale <= 0.0 || apex_scale > 1.0) throw ConfigError("apex_scale must lie in (0, 1]");
  const double min_side = std::min(height, width);
  const double margin = 0.5 - 1.0 / min_side;
  for (const auto& d : diseases) {
    if (d.name.empty()) throw ConfigError("synthetic disease needs a name");
    check_range(d.lv_radius, d.name + ".lv_radius");
    check_range(d.myo_thickness, d.name + ".myo_thickness");
    check_range(d.rv_width, d.name + ".rv_width");
    check_range(d.rv_height, d.name + ".rv_height");
    check_range(d.contraction, d.name + ".contraction");
    if (d.train_cases < 0 || d.test_cases < 0) throw ConfigError("case counts must be non-negative");
    if (extent_fraction(d) + center_jitter > margin)
      throw ConfigError("grid " + std::to_string(height) + "x" + std::to_string(width) +
                        " too small for the structures of disease '" + d.name + "'");
    // Smallest structures (apical slice at end-systole) must keep at least one pixel.
    const double lv_min = d.lv_radius.lo * d.contraction.lo * apex_scale * min_side;
    const double myo_min = d.myo_thickness.lo * apex_scale * min_side;
    const double rv_min = d.rv_width.lo * (1.0 - kRvContraction) * apex_scale * min_side;
    if (lv_min < 1.0 || myo_min < 1.0 || rv_min < 1.0)
      throw ConfigError("grid " + std::to_string(height) + "x" + std::to_string(width) +
                        " too small: structures of disease '" + d.name + "' vanish below one pixel");
  }
}

std::vector<DiseaseProfile> default_disease_profiles() {
  std::vector<DiseaseProfile> p(5);
  p[0].name = "NOR";
  p[1] = p[0];
  p[1].name = "MINF";
  p[1].lv_radius = {0.15, 0.18};
  p[1].myo_thickness = {0.05, 0.06};
  p[1].contraction = {0.78, 0.88};
  p[2] = p[0];
  p[2].name = "DCM";
  p[2].lv_radius = {0.18, 0.21};
  p[2].myo_thickness = {0.05, 0.055};
  p[2].rv_height = {0.24, 0.28};
  p[2].contraction = {0.85, 0.93};
  p[3] = p[0];
  p[3].name = "HCM";
  p[3].lv_radius = {0.10, 0.13};
  p[3].myo_thickness = {0.085, 0.11};
  p[3].rv_width = {0.09, 0.12};
  p[3].contraction = {0.50, 0.62};
  p[4] = p[0];
  p[4].name = "ARV";
  p[4].lv_radius = {0.12, 0.15};
  p[4].myo_thickness = {0.05, 0.06};
  p[4].rv_width = {0.15, 0.18};
  p[4].rv_height = {0.28, 0.33};
  return p;
}

SynthConfig synth_config_from_json(const json& j) {
  SynthConfig c;
  c.dataset_name = j.value("dataset_name", c.dataset_name);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.slices = j.value("slices", c.slices);
  c.phases = j.value("phases", c.phases);
  c.apex_scale = j.value("apex_scale", c.apex_scale);
  c.center_jitter = j.value("center_jitter", c.center_jitter);
  if (j.contains("intensity")) c.intensity = j.at("intensity").get<std::array<double, 4>>();
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.distractors = j.value("distractors", c.distractors);
  c.distractor_radius = range_from(j, "distractor_radius", c.distractor_radius);
  c.distractor_intensity = j.value("distractor_intensity", c.distractor_intensity);
  if (j.contains("pixel_spacing_mm")) c.pixel_spacing_mm = j.at("pixel_spacing_mm").get<std::array<double, 2>>();
  if (j.contains("diseases")) {
    for (const auto& d : j.at("diseases")) {
      DiseaseProfile p;
      p.name = d.at("name").get<std::string>();
      p.lv_radius = range_from(d, "lv_radius", p.lv_radius);
      p.myo_thickness = range_from(d, "myo_thickness", p.myo_thickness);
      p.rv_width = range_from(d, "rv_width", p.rv_width);
      p.rv_height = range_from(d, "rv_height", p.rv_height);
      p.contraction = range_from(d, "contraction", p.contraction);
      p.train_cases = d.value("train_cases", p.train_cases);
      p.test_cases = d.value("test_cases", p.test_cases);
      c.diseases.push_back(std::move(p));
    }
  } else {
    c.diseases = default_disease_profiles();
    const int train = j.value("train_cases_per_disease", 8);
    const int test = j.value("test_cases_per_disease", 2);
    for (auto& p : c.diseases) {
      p.train_cases = train;
      p.test_cases = test;
    }
  }
  c.validate();
  return c;
}

json synth_config_to_json(const SynthConfig& c) {
  auto range = [](const Range& r) { return json::array({r.lo, r.hi}); };
  json diseases = json::array();
  for (const auto& p : c.diseases)
    diseases.push_back({{"name", p.name},
                        {"lv_radius", range(p.lv_radius)},
                        {"myo_thickness", range(p.myo_thickness)},
                        {"rv_width", range(p.rv_width)},
                        {"rv_height", range(p.rv_height)},
                        {"contraction", range(p.contraction)},
                        {"train_cases", p.train_cases},
                        {"test_cases", p.test_cases}});
  return {{"dataset_name", c.dataset_name},
          {"height", c.height},
          {"width", c.width},
          {"slices", c.slices},
          {"phases", c.phases},
          {"apex_scale", c.apex_scale},
          {"center_jitter", c.center_jitter},
          {"intensity", c.intensity},
          {"noise_sigma", c.noise_sigma},
          {"distractors", c.distractors},
          {"distractor_radius", range(c.distractor_radius)},
          {"distractor_intensity", c.distractor_intensity},
          {"pixel_spacing_mm", c.pixel_spacing_mm},
          {"diseases", diseases}};
}

Case4D synth_case(const SynthConfig& config, const DiseaseProfile& profile, const std::string& case_id, Rng& rng) {
  const int H = config.height;
  const int W = config.width;
  const double side = std::min(H, W);

  // Case-level anatomy, drawn in a fixed order.
  const double lv = rng.uniform(profile.lv_radius.lo, profile.lv_radius.hi) * side;
  const double myo = rng.uniform(profile.myo_thickness.lo, profile.myo_thickness.hi) * side;
  const double rv_a = rng.uniform(profile.rv_width.lo, profile.rv_width.hi) * side;
  const double rv_b = rng.uniform(profile.rv_height.lo, profile.rv_height.hi) * side;
  const double contraction = rng.uniform(profile.contraction.lo, profile.contraction.hi);
  const double jitter = config.center_jitter * side;
  const double cy = (H - 1) / 2.0 + rng.uniform(-jitter, jitter);
  const double cx = (W - 1) / 2.0 + rng.uniform(-jitter, jitter);

  struct Blob {
    double y, x, r;
  };
  std::vector<Blob> blobs;
  const double heart_extent = lv + myo * (1.0 + kMyoThickening) + (1.0 + kRvOffset) * rv_a;
  for (int i = 0; i < config.distractors; ++i) {
    const double r = rng.uniform(config.distractor_radius.lo, config.distractor_radius.hi) * side;
    // Bounded rejection sampling keeps the draw count deterministic.
    for (int attempt = 0; attempt < 32; ++attempt) {
      const double y = rng.uniform(0.0, H - 1.0);
      const double x = rng.uniform(0.0, W - 1.0);
      if (std::hypot(y - cy, x - cx) > heart_extent + r + 1.0) {
        blobs.push_back({y, x, r});
        break;
      }
    }
  }

  Case4D c;
  c.case_id = case_id;
  c.disease = DiseaseKey(profile.name);
  c.phases = config.phases;
  c.height = H;
  c.width = W;
  c.slices = config.slices;
  c.ed_index = 0;
  c.es_index = config.phases / 2;
  c.spacing = PixelSpacing{config.pixel_spacing_mm[0], config.pixel_spacing_mm[1]};
  c.image.assign(c.voxel_count(), 0.0f);
  c.label.assign(c.voxel_count(), 0);

  const auto& mu = config.intensity;
  const double lo = std::min({mu[0], mu[1], mu[2], mu[3], config.distractor_intensity});
  const double hi = std::max({mu[0], mu[1], mu[2], mu[3], config.distractor_intensity});
  const double sigma = config.noise_sigma * (hi - lo);
  const double es_shape = 1.0 - std::cos(2.0 * std::numbers::pi * c.es_index / config.phases);

  for (int p = 0; p < c.phases; ++p) {
    const double t = std::clamp((1.0 - std::cos(2.0 * std::numbers::pi * (p - c.ed_index) / config.phases)) / es_shape, 0.0, 1.0);
    for (int z = 0; z < c.slices; ++z) {
      const double s = c.slices == 1 ? 1.0
                                     : config.apex_scale + (1.0 - config.apex_scale) * z / (c.slices - 1.0);
      const double r_lv = s * lv * (1.0 - t * (1.0 - contraction));
      const double r_out = r_lv + s * myo * (1.0 + kMyoThickening * t);
      const double a = s * rv_a * (1.0 - kRvContraction * t);
      const double b = s * rv_b * (1.0 - kRvContraction * t);
      const double rv_cx = cx - r_out - kRvOffset * a;
      for (int r = 0; r < H; ++r) {
        for (int col = 0; col < W; ++col) {
          const double d = std::hypot(r - cy, col - cx);
          std::uint8_t cls = 0;
          if (d <= r_lv) {
            cls = 3;
          } else if (d <= r_out) {
            cls = 2;
          } else {
            const double ex = (col - rv_cx) / a;
            const double ey = (r - cy) / b;
            if (ex * ex + ey * ey <= 1.0) cls = 1;
          }
          double value = mu[cls];
          if (cls == 0)
            for (const auto& blob : blobs)
              if (std::hypot(r - blob.y, col - blob.x) <= blob.r) value = config.distractor_intensity;
          value += sigma * rng.normal();
          const auto off = c.offset(p, r, col, z);
          c.label[off] = cls;
          c.image[off] = static_cast<float>(value);
        }
      }
    }
  }
  return c;
}

SynthOutput synth_generate(const SynthConfig& config, std::uint64_t seed, const fs::path& out_dir) {
  config.validate();
  SynthOutput out;
  for (Split split : {Split::Train, Split::Test}) {
    Manifest m;
    m.dataset_name = config.dataset_name;
    m.split = split;
    const fs::path split_dir = out_dir / split_name(split);
    m.base_dir = split_dir;
    for (std::size_t k = 0; k < config.diseases.size(); ++k) {
      const auto& profile = config.diseases[k];
      m.diseases.emplace_back(profile.name);
      const int count = split == Split::Train ? profile.train_cases : profile.test_cases;
      for (int i = 0; i < count; ++i) {
        char id[128];
        std::snprintf(id, sizeof id, "%s_%s_%03d", profile.name.c_str(), split_name(split), i);
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(split), k, static_cast<std::uint64_t>(i)}));
        const Case4D c = synth_case(config, profile, id, rng);
        const std::string rel = std::string("cases/") + id;
        write_case(c, split_dir / rel);
        m.cases.push_back(ManifestEntry{c.case_id, c.disease, rel, c.spacing});
      }
    }
    const fs::path manifest_path = split_dir / "manifest.json";
    write_manifest(m, manifest_path);
    if (split == Split::Train) {
      out.train = std::move(m);
      out.train_manifest_path = manifest_path;
    } else {
      out.test = std::move(m);
      out.test_manifest_path = manifest_path;
    }
  }
  return out;
}

}  // namespace cardioseg
