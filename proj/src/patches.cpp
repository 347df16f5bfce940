#include "usseg/patches.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

namespace usseg {

PairedDataset pair_dataset(const std::filesystem::path& image_dir,
                                  const std::filesystem::path& mask_dir,
                                  bool skip_unreadable) {
  namespace fs = std::filesystem;
  for (const auto& d : {image_dir, mask_dir}) {
    if (!fs::is_directory(d)) throw IoError("not a directory: " + d.string());
  }
  auto list = [](const fs::path& dir) {
    std::map<std::string, fs::path> by_stem;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && is_raster_file(e.path())) {
        by_stem[e.path().stem().string()] = e.path();
      }
    }
    return by_stem;
  };
  const auto images = list(image_dir);
  const auto masks = list(mask_dir);
  PairedDataset out;
  for (const auto& [stem, ipath] : images) {
    auto it = masks.find(stem);
    if (it == masks.end()) {
      out.unmatched.push_back(ipath.filename().string());
      continue;
    }
    try {
      ImagePair p{read_raster(ipath), read_mask(it->second), stem};
      if (p.image.width() != p.mask.width() || p.image.height() != p.mask.height()) {
        throw IoError("dimension mismatch between " + ipath.string() + " and " +
                      it->second.string());
      }
      out.pairs.push_back(std::move(p));
    } catch (const IoError& e) {
      if (!skip_unreadable) throw;
      out.skipped.push_back(e.what());
    }
  }
  for (const auto& [stem, mpath] : masks) {
    if (!images.contains(stem)) out.unmatched.push_back(mpath.filename().string());
  }
  std::sort(out.unmatched.begin(), out.unmatched.end());
  return out;
}

std::vector<PatchRecord> extract_patches(const ImagePair& pair,
                                                const std::vector<WindowScale>& scales,
                                                double purity,
                                                std::vector<std::string>* warnings) {
  if (!(purity > 0.0 && purity <= 1.0)) {
    throw std::invalid_argument("extract_patches: purity must lie in (0, 1]");
  }
  const std::size_t W = pair.mask.width();
  const std::size_t H = pair.mask.height();
  // Summed-area table of tumour pixels, (W+1) x (H+1).
  std::vector<std::size_t> sat((W + 1) * (H + 1), 0);
  for (std::size_t y = 0; y < H; ++y) {
    std::size_t row = 0;
    for (std::size_t x = 0; x < W; ++x) {
      row += pair.mask.tumour(x, y) ? 1 : 0;
      sat[(y + 1) * (W + 1) + x + 1] = sat[y * (W + 1) + x + 1] + row;
    }
  }
  auto tumour_in = [&](std::size_t x, std::size_t y, std::size_t w, std::size_t h) {
    return sat[(y + h) * (W + 1) + x + w] + sat[y * (W + 1) + x] - sat[y * (W + 1) + x + w] -
           sat[(y + h) * (W + 1) + x];
  };

  std::vector<PatchRecord> out;
  for (const WindowScale& s : scales) {
    if (s.w == 0 || s.h == 0) throw std::invalid_argument("extract_patches: zero window extent");
    if (s.w > W || s.h > H) {
      if (warnings) {
        warnings->push_back(pair.id + ": window " + std::to_string(s.w) + "x" +
                            std::to_string(s.h) + " exceeds image, skipped");
      }
      continue;
    }
    const std::size_t step_x = std::max<std::size_t>(1, s.w / 2);
    const std::size_t step_y = std::max<std::size_t>(1, s.h / 2);
    const double area = static_cast<double>(s.w * s.h);
    for (std::size_t y = 0; y + s.h <= H; y += step_y) {
      for (std::size_t x = 0; x + s.w <= W; x += step_x) {
        const double t = static_cast<double>(tumour_in(x, y, s.w, s.h));
        std::optional<PatchLabel> label;
        if (t / area >= purity) {
          label = PatchLabel::tumour;
        } else if ((area - t) / area >= purity) {
          label = PatchLabel::background;
        }
        if (!label) continue;
        out.push_back(PatchRecord{pair.image.crop(x, y, s.w, s.h), *label, s, x, y, pair.id});
      }
    }
  }
  return out;
}

Raster resize(const Raster& src, std::size_t target_w, std::size_t target_h) {
  if (target_w == 0 || target_h == 0) throw std::invalid_argument("resize: zero target extent");
  if (src.empty()) throw std::invalid_argument("resize: empty source");
  if (target_w == src.width() && target_h == src.height()) return src;
  Raster out(target_w, target_h);
  const double fx = static_cast<double>(src.width()) / static_cast<double>(target_w);
  const double fy = static_cast<double>(src.height()) / static_cast<double>(target_h);
  const double max_x = static_cast<double>(src.width() - 1);
  const double max_y = static_cast<double>(src.height() - 1);
  for (std::size_t y = 0; y < target_h; ++y) {
    const double sy = std::clamp((static_cast<double>(y) + 0.5) * fy - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, src.height() - 1);
    const double wy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < target_w; ++x) {
      const double sx = std::clamp((static_cast<double>(x) + 0.5) * fx - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, src.width() - 1);
      const double wx = sx - static_cast<double>(x0);
      const double v = (1 - wy) * ((1 - wx) * src.at(x0, y0) + wx * src.at(x1, y0)) +
                       wy * ((1 - wx) * src.at(x0, y1) + wx * src.at(x1, y1));
      out.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return out;
}

SegmentationMask resize(const SegmentationMask& src, std::size_t target_w,
                               std::size_t target_h) {
  if (target_w == 0 || target_h == 0) throw std::invalid_argument("resize: zero target extent");
  if (src.empty()) throw std::invalid_argument("resize: empty source");
  if (target_w == src.width() && target_h == src.height()) return src;
  SegmentationMask out(target_w, target_h);
  for (std::size_t y = 0; y < target_h; ++y) {
    const std::size_t sy = std::min(src.height() - 1, y * src.height() / target_h);
    for (std::size_t x = 0; x < target_w; ++x) {
      const std::size_t sx = std::min(src.width() - 1, x * src.width() / target_w);
      out.set(x, y, src.tumour(sx, sy));
    }
  }
  return out;
}

Augmented augment(const Raster& image, const SegmentationMask* mask,
                         const AugmentSpec& spec) {
  spec.validate();
  if (mask && (mask->width() != image.width() || mask->height() != image.height())) {
    throw std::invalid_argument("augment: image and mask dimensions differ");
  }
  Raster img = image;
  std::optional<Raster> msk;
  if (mask) msk = mask->raster();
  if (spec.scale_factor != 1.0 || spec.rotation_deg != 0.0) {
    const double theta = spec.rotation_deg * std::numbers::pi / 180.0;
    const detail::InverseWarp warp{(static_cast<double>(image.width()) - 1.0) / 2.0,
                                   (static_cast<double>(image.height()) - 1.0) / 2.0,
                                   std::cos(theta),
                                   std::sin(theta),
                                   spec.scale_axis == Axis::x ? spec.scale_factor : 1.0,
                                   spec.scale_axis == Axis::y ? spec.scale_factor : 1.0};
    const double max_x = static_cast<double>(image.width() - 1);
    const double max_y = static_cast<double>(image.height() - 1);
    constexpr double kSlack = 1e-9;
    Raster out_img(image.width(), image.height());
    std::optional<Raster> out_msk;
    if (msk) out_msk = Raster(image.width(), image.height());
    for (std::size_t y = 0; y < image.height(); ++y) {
      for (std::size_t x = 0; x < image.width(); ++x) {
        auto [sx, sy] = warp(static_cast<double>(x), static_cast<double>(y));
        if (sx < -kSlack || sy < -kSlack || sx > max_x + kSlack || sy > max_y + kSlack) continue;
        sx = std::clamp(sx, 0.0, max_x);
        sy = std::clamp(sy, 0.0, max_y);
        const auto x0 = static_cast<std::size_t>(sx);
        const auto y0 = static_cast<std::size_t>(sy);
        const std::size_t x1 = std::min(x0 + 1, image.width() - 1);
        const std::size_t y1 = std::min(y0 + 1, image.height() - 1);
        const double wx = sx - static_cast<double>(x0);
        const double wy = sy - static_cast<double>(y0);
        const double v = (1 - wy) * ((1 - wx) * img.at(x0, y0) + wx * img.at(x1, y0)) +
                         wy * ((1 - wx) * img.at(x0, y1) + wx * img.at(x1, y1));
        out_img.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        if (out_msk) {
          const auto nx = static_cast<std::size_t>(std::lround(sx));
          const auto ny = static_cast<std::size_t>(std::lround(sy));
          out_msk->at(x, y) = msk->at(nx, ny);
        }
      }
    }
    img = std::move(out_img);
    msk = std::move(out_msk);
  }
  Augmented result{detail::mirror(img, spec.mirror), std::nullopt};
  if (msk) result.mask = SegmentationMask::from_raster(detail::mirror(*msk, spec.mirror));
  return result;
}
PatchSetSummary write_patch_set(const PairedDataset& data, const std::filesystem::path& out,
                                const std::vector<WindowScale>& scales, double purity,
                                std::size_t keep_one_in) {
  std::filesystem::create_directories(out / "patches");
  std::ofstream manifest(out / "manifest.csv");
  if (!manifest) throw IoError("cannot write " + (out / "manifest.csv").string());
  manifest << kManifestHeader << "\n";
  PatchSetSummary summary;
  for (const ImagePair& pair : data.pairs) {
    const auto patches =
        subsample_background(extract_patches(pair, scales, purity, &summary.warnings), keep_one_in);
    for (const PatchRecord& p : patches) {
      const std::string id = patch_id(p);
      write_pgm(out / "patches" / (id + ".pgm"), p.pixels);
      write_manifest_row(manifest, id, p);
      ++(p.label == PatchLabel::tumour ? summary.tumour : summary.background);
    }
  }
  if (!manifest) throw IoError("write failed: " + (out / "manifest.csv").string());
  return summary;
}

}  // namespace usseg
