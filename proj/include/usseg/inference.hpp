#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "usseg/patches.hpp"
#include "usseg/raster.hpp"
#include "usseg/unet.hpp"

namespace usseg {

/// Per-pixel tumour probability, row-major.
class ProbabilityMap {
 public:
  ProbabilityMap() = default;
  ProbabilityMap(std::size_t width, std::size_t height, double fill = 0.0)
      : width_(width), height_(height), values_(width * height, fill) {}

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t size() const { return values_.size(); }
  double& at(std::size_t x, std::size_t y) { return values_[y * width_ + x]; }
  double at(std::size_t x, std::size_t y) const { return values_[y * width_ + x]; }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  /// Tumour channel (1) of item n of a N x 2 x H x W probability tensor.
  static ProbabilityMap from_scores(const Tensor& probs, std::size_t n = 0) {
    const Shape s = probs.shape();
    if (s.c != 2 || n >= s.n) throw std::invalid_argument("from_scores: expected N x 2 x H x W");
    ProbabilityMap m(s.w, s.h);
    const double* p = probs.ptr() + (n * 2 + 1) * s.plane();
    std::copy_n(p, s.plane(), m.values_.begin());
    return m;
  }

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<double> values_;
};

/// 0 if p < 0.5, 255 otherwise.
inline SegmentationMask threshold(const ProbabilityMap& p) {
  SegmentationMask m(p.width(), p.height());
  for (std::size_t y = 0; y < p.height(); ++y) {
    for (std::size_t x = 0; x < p.width(); ++x) m.set(x, y, p.at(x, y) >= 0.5);
  }
  return m;
}

struct SegmentResult {
  ProbabilityMap probability;      // at the network input size
  SegmentationMask mask_resized;   // at the network input size
  SegmentationMask mask;           // at the original image size
};

/// Resize to the training size, run in infer mode, threshold, and map the mask back.
SegmentResult segment_full(UNet& net, const Raster& image, std::size_t train_w,
                                  std::size_t train_h);

// ---------------------------------------------------------------------------
// Distinct-block classification
// ---------------------------------------------------------------------------

struct Tile {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t side = 0;
  bool operator==(const Tile&) const = default;
};

/// Non-overlapping tiles from the top-left plus edge-anchored tiles covering the margins.
struct TileGrid {
  std::size_t scale = 0;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<Tile> tiles;   // disjoint grid
  std::vector<Tile> margin;  // right column, bottom row, corner

  static TileGrid make(std::size_t width, std::size_t height, std::size_t scale) {
    if (scale == 0 || scale > width || scale > height) {
      throw std::invalid_argument("tile scale " + std::to_string(scale) + " does not fit " +
                                  std::to_string(width) + "x" + std::to_string(height));
    }
    TileGrid g{scale, width, height, {}, {}};
    const std::size_t cols = width / scale;
    const std::size_t rows = height / scale;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) g.tiles.push_back({c * scale, r * scale, scale});
    }
    const bool right = width % scale != 0;
    const bool bottom = height % scale != 0;
    if (right) {
      for (std::size_t r = 0; r < rows; ++r) g.margin.push_back({width - scale, r * scale, scale});
    }
    if (bottom) {
      for (std::size_t c = 0; c < cols; ++c) g.margin.push_back({c * scale, height - scale, scale});
    }
    if (right && bottom) g.margin.push_back({width - scale, height - scale, scale});
    return g;
  }
};

using TileClassifier = std::function<double(const Raster& tile, const Tile& where)>;

struct TiledOptions {
  bool hard_labels = false;  // threshold each tile before averaging
};

/// Per-scale tile probabilities broadcast to pixels (mean where tiles overlap), then the
/// unweighted mean over the usable scales.
ProbabilityMap tiled_classify(const TileClassifier& clf, const Raster& image,
                                     const std::vector<std::size_t>& scales,
                                     std::vector<std::string>* warnings = nullptr,
                                     TiledOptions opts = {});

inline constexpr std::size_t kClassifierInput = 32;

/// Adapts a PatchClassifier: each tile is resized to 32 x 32 before classification.
inline TileClassifier classifier_adapter(PatchClassifier& clf) {
  return [&clf](const Raster& tile, const Tile&) {
    const Raster r = resize(tile, kClassifierInput, kClassifierInput);
    const Tensor p = clf.predict(to_tensor(r, clf.in_channels()));
    return p[1];
  };
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

/// PGM with value round(255 p) plus "<path>.txt" recording the scale factor back to [0, 1].
void write_probability_map(const std::filesystem::path& path, const ProbabilityMap& p);

}  // namespace usseg
