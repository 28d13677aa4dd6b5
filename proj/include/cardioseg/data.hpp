#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cardioseg/error.hpp"

namespace cardioseg {

/// Segmentation classes. Fixed ACDC-style mapping.
enum class LabelClass : std::uint8_t { Background = 0, RV = 1, MYO = 2, LV = 3 };
inline constexpr int kNumClasses = 4;
inline constexpr std::uint8_t kMaxLabel = 3;

const char* class_name(int cls);

/// Identifier of one disease group (a training domain).
class DiseaseKey {
 public:
  DiseaseKey() = default;
  explicit DiseaseKey(std::string name);

  const std::string& name() const { return name_; }
  bool empty() const { return name_.empty(); }

  auto operator<=>(const DiseaseKey&) const = default;

 private:
  std::string name_;
};

enum class Phase : std::uint8_t { ED = 0, ES = 1 };
const char* phase_name(Phase phase);
Phase parse_phase(const std::string& text);

struct PixelSpacing {
  double row_mm = 1.0;
  double col_mm = 1.0;
  bool operator==(const PixelSpacing&) const = default;
};

/// Dense row-major 2D array.
template <typename T>
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(int r, int c, T fill = T{}) : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, fill) {}

  T& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
  const T& at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return values.size(); }
  bool same_shape(const auto& other) const { return rows == other.rows && cols == other.cols; }

  bool operator==(const Grid&) const = default;
};

using ImageGrid = Grid<float>;
using LabelGrid = Grid<std::uint8_t>;

/// One patient: image and label volumes in (P, H, W, Z) row-major order.
struct Case4D {
  std::string case_id;
  DiseaseKey disease;
  int phases = 0;
  int height = 0;
  int width = 0;
  int slices = 0;
  std::vector<float> image;
  std::vector<std::uint8_t> label;
  int ed_index = 0;
  int es_index = 1;
  std::optional<PixelSpacing> spacing;

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(phases) * height * width * slices;
  }
  std::size_t offset(int p, int r, int c, int z) const {
    return ((static_cast<std::size_t>(p) * height + r) * width + c) * slices + z;
  }

  /// Throws InvalidCaseError when any invariant fails.
  void validate() const;

  bool operator==(const Case4D&) const = default;
};

/// One 2D training/testing unit.
struct SliceSample {
  std::string case_id;
  DiseaseKey disease;
  Phase phase = Phase::ED;
  int slice_index = 0;
  ImageGrid image;
  LabelGrid label;
  std::optional<PixelSpacing> spacing;
};

struct DiseaseDataset {
  DiseaseKey disease;
  std::vector<SliceSample> samples;
};

using DiseaseDatasets = std::map<DiseaseKey, DiseaseDataset>;

enum class Split { Train, Test };
const char* split_name(Split split);

struct ManifestEntry {
  std::string case_id;
  DiseaseKey disease;
  std::string path;  // relative to the manifest directory unless absolute
  std::optional<PixelSpacing> spacing;
};

struct Manifest {
  std::string dataset_name;
  Split split = Split::Train;
  std::vector<DiseaseKey> diseases;
  std::vector<ManifestEntry> cases;
  std::filesystem::path base_dir;  // directory the manifest was loaded from

  std::filesystem::path case_path(const ManifestEntry& entry) const;
  void validate() const;
};

Manifest read_manifest(const std::filesystem::path& file);
void write_manifest(const Manifest& manifest, const std::filesystem::path& file);

/// Splits a case into its ED and ES slice stacks: 2·Z samples ordered by
/// (phase, slice_index). Other phases are never sampled.
std::vector<SliceSample> restructure_case(const Case4D& c);

/// Center crop / symmetric zero pad. Odd margins put the extra row/column at
/// the bottom/right.
SliceSample resize_to(const SliceSample& sample, int target_h, int target_w);
ImageGrid resize_image(const ImageGrid& image, int target_h, int target_w);
LabelGrid resize_label(const LabelGrid& label, int target_h, int target_w);

/// Per-slice standardization to zero mean and unit variance. Zero-variance
/// slices map to all zeros.
ImageGrid standardize(const ImageGrid& image);

DiseaseDatasets build_disease_datasets(const Manifest& manifest, int target_h, int target_w);

/// Loads every case of a manifest, in manifest order.
std::vector<Case4D> load_cases(const Manifest& manifest);

// --- on-disk case directory (meta.json + image.raw + label.raw) ---

inline constexpr int kCaseFormatVersion = 1;

void write_case(const Case4D& c, const std::filesystem::path& dir);
Case4D read_case(const std::filesystem::path& dir);

}  // namespace cardioseg
