#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "cardioseg/data.hpp"

namespace cardioseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<char> read_bytes(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LoadError("cannot open " + file.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& file, const std::vector<char>& bytes) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write " + file.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<char> encode_f32le(const std::vector<float>& values) {
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
  return bytes;
}

std::vector<float> decode_f32le(const std::vector<char>& bytes) {
  std::vector<float> values(bytes.size() / 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
  return values;
}

}  // namespace

void write_case(const Case4D& c, const fs::path& dir) {
  c.validate();
  fs::create_directories(dir);
  json meta{{"format_version", kCaseFormatVersion},
            {"case_id", c.case_id},
            {"disease", c.disease.name()},
            {"shape", {c.phases, c.height, c.width, c.slices}},
            {"ed_index", c.ed_index},
            {"es_index", c.es_index},
            {"dtype_image", "f32le"},
            {"dtype_label", "u8"}};
  if (c.spacing) meta["pixel_spacing_mm"] = {c.spacing->row_mm, c.spacing->col_mm};
  {
    std::ofstream out(dir / "meta.json");
    if (!out) throw LoadError("cannot write " + (dir / "meta.json").string());
    out << meta.dump(2) << '\n';
  }
  write_bytes(dir / "image.raw", encode_f32le(c.image));
  write_bytes(dir / "label.raw", std::vector<char>(c.label.begin(), c.label.end()));
}

Case4D read_case(const fs::path& dir) {
  const auto meta_path = dir / "meta.json";
  if (!fs::exists(meta_path)) throw LoadError("missing " + meta_path.string());
  json meta;
  {
    std::ifstream in(meta_path);
    try {
      in >> meta;
    } catch (const json::exception& e) {
      throw FormatError("malformed header " + meta_path.string() + ": " + e.what());
    }
  }
  Case4D c;
  try {
    const int version = meta.at("format_version").get<int>();
    if (version != kCaseFormatVersion)
      throw FormatError("unknown case format version " + std::to_string(version));
    if (meta.at("dtype_image").get<std::string>() != "f32le" || meta.at("dtype_label").get<std::string>() != "u8")
      throw FormatError("unsupported dtype in " + meta_path.string());
    c.case_id = meta.at("case_id").get<std::string>();
    c.disease = DiseaseKey(meta.at("disease").get<std::string>());
    const auto& shape = meta.at("shape");
    if (!shape.is_array() || shape.size() != 4) throw FormatError("shape must have 4 entries");
    c.phases = shape[0].get<int>();
    c.height = shape[1].get<int>();
    c.width = shape[2].get<int>();
    c.slices = shape[3].get<int>();
    c.ed_index = meta.at("ed_index").get<int>();
    c.es_index = meta.at("es_index").get<int>();
    if (meta.contains("pixel_spacing_mm")) {
      const auto& s = meta.at("pixel_spacing_mm");
      c.spacing = PixelSpacing{s.at(0).get<double>(), s.at(1).get<double>()};
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed header " + meta_path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError("malformed header " + meta_path.string() + ": " + e.what());
  }
  if (c.phases < 1 || c.height < 1 || c.width < 1 || c.slices < 1)
    throw FormatError("non-positive shape in " + meta_path.string());

  const auto image_bytes = read_bytes(dir / "image.raw");
  const auto label_bytes = read_bytes(dir / "label.raw");
  if (image_bytes.size() != c.voxel_count() * 4)
    throw ShapeError("image.raw holds " + std::to_string(image_bytes.size()) + " bytes, header shape needs " +
                     std::to_string(c.voxel_count() * 4));
  if (label_bytes.size() != c.voxel_count())
    throw ShapeError("label.raw holds " + std::to_string(label_bytes.size()) + " bytes, header shape needs " +
                     std::to_string(c.voxel_count()));
  c.image = decode_f32le(image_bytes);
  c.label.assign(label_bytes.begin(), label_bytes.end());
  c.validate();
  return c;
}

}  // namespace cardioseg
