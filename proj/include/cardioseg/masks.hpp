#pragma once

#include <string>
#include <utility>

#include "cardioseg/data.hpp"
#include "cardioseg/rng.hpp"

namespace cardioseg {

enum class MaskKind { None, Ideal, Gaussian };

const char* mask_kind_name(MaskKind kind);
MaskKind parse_mask_kind(const std::string& text);

inline constexpr double kDefaultIdealLambda = 0.25;
inline constexpr double kDefaultGaussianLambda = 0.4;

/// Occlusion settings. `lambda` scales the box side (ideal) or the Gaussian
/// radius relative to min(H, W).
struct MaskSpec {
  MaskKind kind = MaskKind::Ideal;
  double lambda = kDefaultIdealLambda;
  bool paper_literal_center_range = false;

  /// Side α = round(λ·min(H, W)); throws ConfigError when α < 1.
  int box_side(int h, int w) const;
  double gaussian_beta(int h, int w) const;
  void validate() const;
};

struct MaskCenter {
  int row = 0;
  int col = 0;
  bool operator==(const MaskCenter&) const = default;
};

struct MaskRealization {
  MaskSpec spec;
  MaskCenter center;
  Grid<float> grid;
};

/// Admissible inclusive center range along one axis of length `len` for a
/// box of side `alpha`.
std::pair<int, int> center_range(int len, int alpha, bool paper_literal);

MaskCenter sample_center(const MaskSpec& spec, int h, int w, Rng& rng);

/// 1 everywhere except an alpha×alpha zero box whose first row/column is
/// center − ⌊α/2⌋.
Grid<float> ideal_mask(int h, int w, MaskCenter center, int alpha);

/// 1 − exp(−d²/(2β²)) with d the Euclidean distance to the center.
Grid<float> gaussian_mask(int h, int w, MaskCenter center, double beta);

/// Draws a center and builds the grid for `spec`.
MaskRealization realize_mask(const MaskSpec& spec, int h, int w, Rng& rng);

/// Elementwise product; only ever applied to images, never to labels.
ImageGrid apply_mask(const ImageGrid& image, const Grid<float>& mask);

}  // namespace cardioseg
