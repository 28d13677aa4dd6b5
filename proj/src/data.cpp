#include "cardioseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace cardioseg {

namespace fs = std::filesystem;
using nlohmann::json;

const char* class_name(int cls) {
  switch (cls) {
    case 0: return "BG";
    case 1: return "RV";
    case 2: return "MYO";
    case 3: return "LV";
    default: return "?";
  }
}

DiseaseKey::DiseaseKey(std::string name) : name_(std::move(name)) {
  if (name_.empty()) throw ConfigError("disease key must be nonempty");
}

const char* phase_name(Phase phase) { return phase == Phase::ED ? "ED" : "ES"; }

Phase parse_phase(const std::string& text) {
  if (text == "ED") return Phase::ED;
  if (text == "ES") return Phase::ES;
  throw FormatError("unknown phase '" + text + "'");
}

const char* split_name(Split split) { return split == Split::Train ? "train" : "test"; }

void Case4D::validate() const {
  const std::string where = "case '" + case_id + "': ";
  if (phases < 1 || height < 1 || width < 1 || slices < 1)
    throw InvalidCaseError(where + "all dimensions must be positive");
  if (ed_index < 0 || ed_index >= phases || es_index < 0 || es_index >= phases)
    throw InvalidCaseError(where + "ED/ES index out of range");
  if (ed_index == es_index) throw InvalidCaseError(where + "ED and ES indices coincide");
  if (image.size() != voxel_count() || label.size() != voxel_count())
    throw InvalidCaseError(where + "image/label size does not match shape");
  if (disease.empty()) throw InvalidCaseError(where + "missing disease key");
  for (auto v : label)
    if (v > kMaxLabel) throw InvalidCaseError(where + "label value " + std::to_string(v) + " out of range");
}

std::vector<SliceSample> restructure_case(const Case4D& c) {
  c.validate();
  std::vector<SliceSample> out;
  out.reserve(2 * static_cast<std::size_t>(c.slices));
  for (Phase phase : {Phase::ED, Phase::ES}) {
    const int p = phase == Phase::ED ? c.ed_index : c.es_index;
    for (int z = 0; z < c.slices; ++z) {
      SliceSample s;
      s.case_id = c.case_id;
      s.disease = c.disease;
      s.phase = phase;
      s.slice_index = z;
      s.image = ImageGrid(c.height, c.width);
      s.label = LabelGrid(c.height, c.width);
      s.spacing = c.spacing;
      for (int r = 0; r < c.height; ++r)
        for (int col = 0; col < c.width; ++col) {
          const auto off = c.offset(p, r, col, z);
          s.image.at(r, col) = c.image[off];
          s.label.at(r, col) = c.label[off];
        }
      out.push_back(std::move(s));
    }
  }
  return out;
}

namespace {

// Source index for destination index d along one axis; -1 means padding.
int source_index(int d, int src_len, int dst_len) {
  if (src_len >= dst_len) return d + (src_len - dst_len) / 2;
  const int before = (dst_len - src_len) / 2;
  const int s = d - before;
  return (s >= 0 && s < src_len) ? s : -1;
}

template <typename T>
Grid<T> crop_or_pad(const Grid<T>& src, int target_h, int target_w) {
  if (target_h < 1 || target_w < 1) throw ShapeError("resize target must be positive");
  Grid<T> out(target_h, target_w, T{});
  for (int r = 0; r < target_h; ++r) {
    const int sr = source_index(r, src.rows, target_h);
    if (sr < 0) continue;
    for (int c = 0; c < target_w; ++c) {
      const int sc = source_index(c, src.cols, target_w);
      if (sc >= 0) out.at(r, c) = src.at(sr, sc);
    }
  }
  return out;
}

}  // namespace

ImageGrid resize_image(const ImageGrid& image, int target_h, int target_w) {
  return crop_or_pad(image, target_h, target_w);
}

LabelGrid resize_label(const LabelGrid& label, int target_h, int target_w) {
  return crop_or_pad(label, target_h, target_w);
}

SliceSample resize_to(const SliceSample& sample, int target_h, int target_w) {
  SliceSample out;
  out.case_id = sample.case_id;
  out.disease = sample.disease;
  out.phase = sample.phase;
  out.slice_index = sample.slice_index;
  out.spacing = sample.spacing;
  out.image = resize_image(sample.image, target_h, target_w);
  out.label = resize_label(sample.label, target_h, target_w);
  return out;
}

ImageGrid standardize(const ImageGrid& image) {
  ImageGrid out = image;
  if (image.values.empty()) return out;
  double mean = 0.0;
  for (float v : image.values) mean += v;
  mean /= static_cast<double>(image.size());
  double var = 0.0;
  for (float v : image.values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(image.size());
  const double sd = std::sqrt(var);
  for (auto& v : out.values)
    v = sd > 1e-12 ? static_cast<float>((v - mean) / sd) : 0.0f;
  return out;
}

// --- manifest ---

fs::path Manifest::case_path(const ManifestEntry& entry) const {
  fs::path p(entry.path);
  return p.is_absolute() ? p : base_dir / p;
}

void Manifest::validate() const {
  std::set<DiseaseKey> seen;
  for (const auto& d : diseases)
    if (!seen.insert(d).second) throw ConfigError("duplicate disease '" + d.name() + "' in manifest");
  std::set<std::string> ids;
  for (const auto& c : cases) {
    if (!seen.contains(c.disease))
      throw ConfigError("case '" + c.case_id + "' has disease '" + c.disease.name() +
                        "' outside the manifest disease set");
    if (!ids.insert(c.case_id).second) throw ConfigError("duplicate case id '" + c.case_id + "'");
  }
}

Manifest read_manifest(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw LoadError("cannot open manifest " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest " + file.string() + ": " + e.what());
  }
  Manifest m;
  try {
    m.dataset_name = j.at("dataset_name").get<std::string>();
    const auto split = j.at("split").get<std::string>();
    if (split == "train") m.split = Split::Train;
    else if (split == "test") m.split = Split::Test;
    else throw FormatError("manifest split must be train or test, got '" + split + "'");
    for (const auto& d : j.at("diseases")) m.diseases.emplace_back(d.get<std::string>());
    for (const auto& c : j.at("cases")) {
      ManifestEntry e;
      e.case_id = c.at("case_id").get<std::string>();
      e.disease = DiseaseKey(c.at("disease").get<std::string>());
      e.path = c.at("path").get<std::string>();
      if (c.contains("pixel_spacing_mm")) {
        const auto& s = c.at("pixel_spacing_mm");
        e.spacing = PixelSpacing{s.at(0).get<double>(), s.at(1).get<double>()};
      }
      m.cases.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError("invalid manifest " + file.string() + ": " + e.what());
  }
  m.base_dir = file.parent_path();
  m.validate();
  return m;
}

void write_manifest(const Manifest& manifest, const fs::path& file) {
  manifest.validate();
  json j;
  j["dataset_name"] = manifest.dataset_name;
  j["split"] = split_name(manifest.split);
  j["diseases"] = json::array();
  for (const auto& d : manifest.diseases) j["diseases"].push_back(d.name());
  j["cases"] = json::array();
  for (const auto& c : manifest.cases) {
    json e{{"case_id", c.case_id}, {"disease", c.disease.name()}, {"path", c.path}};
    if (c.spacing) e["pixel_spacing_mm"] = {c.spacing->row_mm, c.spacing->col_mm};
    j["cases"].push_back(std::move(e));
  }
  if (!file.parent_path().empty()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw LoadError("cannot write manifest " + file.string());
  out << j.dump(2) << '\n';
}

std::vector<Case4D> load_cases(const Manifest& manifest) {
  std::vector<Case4D> cases;
  cases.reserve(manifest.cases.size());
  for (const auto& entry : manifest.cases) {
    Case4D c;
    try {
      c = read_case(manifest.case_path(entry));
    } catch (const Error& e) {
      throw LoadError("cannot load case '" + entry.case_id + "': " + e.what());
    }
    if (c.disease != entry.disease)
      throw LoadError("case '" + entry.case_id + "' disease mismatch between manifest and meta.json");
    if (entry.spacing) c.spacing = entry.spacing;
    cases.push_back(std::move(c));
  }
  return cases;
}

DiseaseDatasets build_disease_datasets(const Manifest& manifest, int target_h, int target_w) {
  manifest.validate();
  DiseaseDatasets out;
  for (const auto& d : manifest.diseases) out[d].disease = d;
  for (const auto& c : load_cases(manifest)) {
    auto& bucket = out.at(c.disease).samples;
    for (const auto& s : restructure_case(c)) bucket.push_back(resize_to(s, target_h, target_w));
  }
  for (const auto& [key, ds] : out)
    if (ds.samples.empty())
      throw ConfigError("disease '" + key.name() + "' has no cases in manifest " + manifest.dataset_name);
  return out;
}

}  // namespace cardioseg
