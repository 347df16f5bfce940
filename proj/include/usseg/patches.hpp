#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "usseg/raster.hpp"

namespace usseg {

struct ImagePair {
  Raster image;
  SegmentationMask mask;
  std::string id;
};

struct PairedDataset {
  std::vector<ImagePair> pairs;
  std::vector<std::string> unmatched;  // file names with no partner
  std::vector<std::string> skipped;    // unreadable pairs, with the reason
};

/// Matches rasters in two directories by file stem, in lexicographic order. With
/// skip_unreadable, pairs that fail to load are listed in `skipped` instead of throwing.
PairedDataset pair_dataset(const std::filesystem::path& image_dir,
                                  const std::filesystem::path& mask_dir,
                                  bool skip_unreadable = false);

// ---------------------------------------------------------------------------
// Multi-scale multi-direction patch extraction
// ---------------------------------------------------------------------------

enum class PatchLabel { background, tumour };

inline const char* to_string(PatchLabel l) {
  return l == PatchLabel::tumour ? "tumour" : "background";
}

struct WindowScale {
  std::size_t w = 0;
  std::size_t h = 0;
  bool operator==(const WindowScale&) const = default;
};

struct PatchRecord {
  Raster pixels;
  PatchLabel label = PatchLabel::background;
  WindowScale scale;
  std::size_t origin_x = 0;
  std::size_t origin_y = 0;
  std::string source_id;
};

inline constexpr double kDefaultPurity = 0.8;
inline constexpr std::size_t kDefaultKeepOneIn = 8;

/// Squares of the given sides plus their 2:1 and 1:2 elongations.
inline std::vector<WindowScale> directional_scales(const std::vector<std::size_t>& sides) {
  std::vector<WindowScale> out;
  for (std::size_t s : sides) {
    out.push_back({s, s});
    out.push_back({2 * s, s});
    out.push_back({s, 2 * s});
  }
  return out;
}

inline std::vector<WindowScale> default_scales() { return directional_scales({20, 40, 60, 80}); }

/// Sliding windows stepping by half the window extent; labelled when one class covers
/// at least `purity` of the window, skipped otherwise. Order: scale-major, then row-major.
std::vector<PatchRecord> extract_patches(const ImagePair& pair,
                                                const std::vector<WindowScale>& scales,
                                                double purity = kDefaultPurity,
                                                std::vector<std::string>* warnings = nullptr);

/// Keeps background patches 0, k, 2k, ... of the background subsequence; tumour patches kept.
inline std::vector<PatchRecord> subsample_background(std::vector<PatchRecord> patches,
                                                     std::size_t keep_one_in = kDefaultKeepOneIn) {
  if (keep_one_in == 0) throw std::invalid_argument("subsample_background: keep_one_in must be > 0");
  std::vector<PatchRecord> out;
  std::size_t bg = 0;
  for (auto& p : patches) {
    if (p.label == PatchLabel::background) {
      if (bg++ % keep_one_in != 0) continue;
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline constexpr const char* kManifestHeader =
    "patch_id,label,scale_w,scale_h,origin_x,origin_y,source_id";

inline void write_manifest_row(std::ostream& out, const std::string& patch_id,
                               const PatchRecord& p) {
  out << patch_id << "," << to_string(p.label) << "," << p.scale.w << "," << p.scale.h << ","
      << p.origin_x << "," << p.origin_y << "," << p.source_id << "\n";
}

/// "<source>_<w>x<h>_<x>_<y>"; unique within a source image.
inline std::string patch_id(const PatchRecord& p) {
  return p.source_id + "_" + std::to_string(p.scale.w) + "x" + std::to_string(p.scale.h) + "_" +
         std::to_string(p.origin_x) + "_" + std::to_string(p.origin_y);
}

struct PatchSetSummary {
  std::size_t tumour = 0;
  std::size_t background = 0;
  std::vector<std::string> warnings;
};

/// Extracts every pair, thins background (keep_one_in = 1 keeps all) and writes
/// <out>/patches/<patch_id>.pgm plus <out>/manifest.csv.
PatchSetSummary write_patch_set(const PairedDataset& data, const std::filesystem::path& out,
                                const std::vector<WindowScale>& scales,
                                double purity = kDefaultPurity,
                                std::size_t keep_one_in = kDefaultKeepOneIn);

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Bilinear resize with half-pixel centres and edge clamping.
Raster resize(const Raster& src, std::size_t target_w, std::size_t target_h);

/// Nearest-neighbour resize; output stays binary.
SegmentationMask resize(const SegmentationMask& src, std::size_t target_w,
                               std::size_t target_h);

// ---------------------------------------------------------------------------
// Augmentation: scale along one axis, rotate, mirror (in that order)
// ---------------------------------------------------------------------------

enum class Axis { x, y };
enum class Mirror { none, x, y };

struct AugmentSpec {
  Axis scale_axis = Axis::x;
  double scale_factor = 1.0;
  double rotation_deg = 0.0;
  Mirror mirror = Mirror::none;
  std::uint64_t seed = 0;

  static constexpr double kMinScale = 0.3;
  static constexpr double kMaxScale = 4.0;
  static constexpr double kMaxRotation = 30.0;

  void validate() const {
    if (!(scale_factor >= kMinScale && scale_factor <= kMaxScale)) {
      throw std::invalid_argument("augment: scale factor " + std::to_string(scale_factor) +
                                  " outside [0.3, 4]");
    }
    if (!(std::abs(rotation_deg) <= kMaxRotation)) {
      throw std::invalid_argument("augment: rotation " + std::to_string(rotation_deg) +
                                  " outside [-30, 30]");
    }
  }

  bool is_identity() const {
    return scale_factor == 1.0 && rotation_deg == 0.0 && mirror == Mirror::none;
  }

  /// Uniform draw over the full ranges; deterministic in `seed`.
  static AugmentSpec sample(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    AugmentSpec s;
    s.seed = seed;
    s.scale_axis = unit(rng) < 0.5 ? Axis::x : Axis::y;
    s.scale_factor = kMinScale + (kMaxScale - kMinScale) * unit(rng);
    s.rotation_deg = -kMaxRotation + 2.0 * kMaxRotation * unit(rng);
    const double m = unit(rng);
    s.mirror = m < 1.0 / 3.0 ? Mirror::none : (m < 2.0 / 3.0 ? Mirror::x : Mirror::y);
    return s;
  }
};

struct Augmented {
  Raster image;
  std::optional<SegmentationMask> mask;
};

namespace detail {

// Inverse map from output pixel to source coordinate for scale-then-rotate about the centre.
struct InverseWarp {
  double cx, cy, cos_t, sin_t, sx, sy;
  std::pair<double, double> operator()(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    // undo rotation
    const double rx = cos_t * dx + sin_t * dy;
    const double ry = -sin_t * dx + cos_t * dy;
    return {rx / sx + cx, ry / sy + cy};
  }
};

inline Raster mirror(const Raster& r, Mirror m) {
  if (m == Mirror::none) return r;
  Raster out(r.width(), r.height());
  for (std::size_t y = 0; y < r.height(); ++y) {
    for (std::size_t x = 0; x < r.width(); ++x) {
      const std::size_t sx = m == Mirror::x ? r.width() - 1 - x : x;
      const std::size_t sy = m == Mirror::y ? r.height() - 1 - y : y;
      out.at(x, y) = r.at(sx, sy);
    }
  }
  return out;
}

}  // namespace detail

/// Resamples onto the same canvas; the image bilinearly, the mask by nearest neighbour.
/// Pixels mapping outside the source are zero.
Augmented augment(const Raster& image, const SegmentationMask* mask,
                         const AugmentSpec& spec);

}  // namespace usseg
