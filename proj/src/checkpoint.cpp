#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "cardioseg/segmenter.hpp"

namespace cardioseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'C', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
constexpr int kCheckpointVersion = 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  return v;
}

}  // namespace

void save_checkpoint(const Segmenter& model, const fs::path& file) {
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& p : model.parameters()) {
    manifest.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", offset}, {"count", p.value.size()}});
    offset += p.value.size();
  }
  const json header{{"format", "cardioseg-checkpoint"},
                    {"format_version", kCheckpointVersion},
                    {"dtype", "f32le"},
                    {"config", model_config_to_json(model.config())},
                    {"parameters", manifest},
                    {"payload_values", offset}};
  const std::string text = header.dump();

  std::string bytes(kMagic, sizeof kMagic);
  put_u64(bytes, text.size());
  bytes += text;
  bytes.reserve(bytes.size() + offset * 4);
  for (const auto& p : model.parameters())
    for (float v : p.value) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
    }

  if (!file.parent_path().empty()) fs::create_directories(file.parent_path());
  // Write-then-rename so readers never observe a partial checkpoint.
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw LoadError("short write on checkpoint " + tmp.string());
  }
  fs::rename(tmp, file);
}

Segmenter load_checkpoint(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + file.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw FormatError(file.string() + " is not a checkpoint file");
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw FormatError("checkpoint header length exceeds file size");
  json header;
  try {
    header = json::parse(bytes.substr(16, header_len));
  } catch (const json::exception& e) {
    throw FormatError("malformed checkpoint header: " + std::string(e.what()));
  }
  if (header.value("format_version", 0) != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version in " + file.string());

  const ModelConfig config = model_config_from_json(header.at("config"));
  Segmenter model(config, 0);
  const auto& manifest = header.at("parameters");
  auto& params = model.parameters();
  if (manifest.size() != params.size()) throw FormatError("checkpoint parameter count does not match its config");
  const std::size_t payload_start = 16 + header_len;
  const std::size_t payload_values = header.at("payload_values").get<std::size_t>();
  if (bytes.size() - payload_start != payload_values * 4)
    throw ShapeError("checkpoint payload size does not match header");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& entry = manifest[k];
    auto& p = params[k];
    if (entry.at("name").get<std::string>() != p.name || entry.at("shape").get<std::vector<int>>() != p.shape)
      throw FormatError("checkpoint parameter '" + entry.at("name").get<std::string>() + "' does not match model layout");
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    if (offset + p.value.size() > payload_values) throw ShapeError("parameter '" + p.name + "' exceeds payload");
    const char* src = bytes.data() + payload_start + offset * 4;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[i * 4 + b])) << (8 * b);
      p.value[i] = std::bit_cast<float>(bits);
    }
  }
  return model;
}

}  // namespace cardioseg
