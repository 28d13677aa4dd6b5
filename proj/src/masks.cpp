#include "cardioseg/masks.hpp"

#include <algorithm>
#include <cmath>

namespace cardioseg {

const char* mask_kind_name(MaskKind kind) {
  switch (kind) {
    case MaskKind::None: return "none";
    case MaskKind::Ideal: return "ideal";
    case MaskKind::Gaussian: return "gaussian";
  }
  return "none";
}

MaskKind parse_mask_kind(const std::string& text) {
  if (text == "none") return MaskKind::None;
  if (text == "ideal") return MaskKind::Ideal;
  if (text == "gaussian") return MaskKind::Gaussian;
  throw ConfigError("mask.kind must be one of ideal, gaussian, none (got '" + text + "')");
}

void MaskSpec::validate() const {
  if (kind == MaskKind::None) return;
  if (!(lambda > 0.0 && lambda < 1.0)) throw ConfigError("mask.lambda must lie in (0, 1)");
}

int MaskSpec::box_side(int h, int w) const {
  const int alpha = static_cast<int>(std::lround(lambda * std::min(h, w)));
  if (alpha < 1)
    throw ConfigError("mask side rounds to zero for lambda " + std::to_string(lambda) + " on a " +
                      std::to_string(h) + "x" + std::to_string(w) + " grid");
  return alpha;
}

double MaskSpec::gaussian_beta(int h, int w) const { return lambda * std::min(h, w); }

std::pair<int, int> center_range(int len, int alpha, bool paper_literal) {
  if (alpha > len) throw ConfigError("mask side " + std::to_string(alpha) + " exceeds grid extent " + std::to_string(len));
  if (paper_literal) {
    const int lo = alpha / 2;
    const int hi = (len - alpha) / 2;
    if (hi < lo)
      throw ConfigError("literal center range {" + std::to_string(lo) + ".." + std::to_string(hi) + "} is empty");
    return {lo, hi};
  }
  // At alpha == len the general bounds cross; the box then has one position.
  if (alpha == len) return {alpha / 2, alpha / 2};
  return {(alpha + 1) / 2, len - alpha / 2 - 1};
}

MaskCenter sample_center(const MaskSpec& spec, int h, int w, Rng& rng) {
  int alpha = 1;
  if (spec.kind == MaskKind::Ideal) {
    alpha = spec.box_side(h, w);
  } else if (spec.kind == MaskKind::Gaussian) {
    // The Gaussian attenuates everywhere; its center uses the same range as a
    // box of diameter-equivalent side so the darkest region stays inside.
    alpha = std::min(spec.box_side(h, w), std::min(h, w));
  }
  const auto [row_lo, row_hi] = center_range(h, alpha, spec.paper_literal_center_range);
  const auto [col_lo, col_hi] = center_range(w, alpha, spec.paper_literal_center_range);
  MaskCenter c;
  c.row = static_cast<int>(rng.uniform_int(row_lo, row_hi));
  c.col = static_cast<int>(rng.uniform_int(col_lo, col_hi));
  return c;
}

Grid<float> ideal_mask(int h, int w, MaskCenter center, int alpha) {
  if (alpha < 1) throw ConfigError("mask side must be at least 1");
  const int r0 = center.row - alpha / 2;
  const int c0 = center.col - alpha / 2;
  if (r0 < 0 || c0 < 0 || r0 + alpha > h || c0 + alpha > w)
    throw ShapeError("mask box at (" + std::to_string(center.row) + ", " + std::to_string(center.col) +
                     ") with side " + std::to_string(alpha) + " leaves the grid");
  Grid<float> grid(h, w, 1.0f);
  for (int r = r0; r < r0 + alpha; ++r)
    for (int c = c0; c < c0 + alpha; ++c) grid.at(r, c) = 0.0f;
  return grid;
}

Grid<float> gaussian_mask(int h, int w, MaskCenter center, double beta) {
  if (!(beta > 0.0)) throw ConfigError("gaussian mask radius must be positive");
  Grid<float> grid(h, w);
  const double denom = 2.0 * beta * beta;
  // Far pixels would round up to exactly 1 in single precision.
  const float below_one = std::nextafter(1.0f, 0.0f);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double dr = r - center.row;
      const double dc = c - center.col;
      grid.at(r, c) = std::min(static_cast<float>(-std::expm1(-(dr * dr + dc * dc) / denom)), below_one);
    }
  return grid;
}

MaskRealization realize_mask(const MaskSpec& spec, int h, int w, Rng& rng) {
  spec.validate();
  if (spec.kind == MaskKind::None) throw ConfigError("cannot realize a mask of kind none");
  MaskRealization m;
  m.spec = spec;
  m.center = sample_center(spec, h, w, rng);
  m.grid = spec.kind == MaskKind::Ideal ? ideal_mask(h, w, m.center, spec.box_side(h, w))
                                        : gaussian_mask(h, w, m.center, spec.gaussian_beta(h, w));
  return m;
}

ImageGrid apply_mask(const ImageGrid& image, const Grid<float>& mask) {
  if (!image.same_shape(mask))
    throw ShapeError("mask shape " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                     " does not match image " + std::to_string(image.rows) + "x" + std::to_string(image.cols));
  ImageGrid out = image;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] *= mask.values[i];
  return out;
}

}  // namespace cardioseg
