#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "usseg/tensor.hpp"

namespace usseg {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Single-channel 8-bit image, row-major.
class Raster {
 public:
  Raster() = default;
  Raster(std::size_t width, std::size_t height, std::uint8_t fill = 0)
      : width_(width), height_(height), pixels_(width * height, fill) {}
  Raster(std::size_t width, std::size_t height, std::vector<std::uint8_t> pixels)
      : width_(width), height_(height), pixels_(std::move(pixels)) {
    if (pixels_.size() != width_ * height_) {
      throw std::invalid_argument("raster pixel count does not match " + std::to_string(width_) +
                                  "x" + std::to_string(height_));
    }
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t size() const { return pixels_.size(); }
  bool empty() const { return pixels_.empty(); }

  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels_[y * width_ + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels_[y * width_ + x]; }

  std::span<std::uint8_t> pixels() { return pixels_; }
  std::span<const std::uint8_t> pixels() const { return pixels_; }

  Raster crop(std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) const {
    if (x0 + w > width_ || y0 + h > height_) {
      throw std::out_of_range("crop window exceeds raster bounds");
    }
    Raster out(w, h);
    for (std::size_t y = 0; y < h; ++y) {
      std::copy_n(pixels_.begin() + static_cast<std::ptrdiff_t>((y0 + y) * width_ + x0), w,
                  out.pixels_.begin() + static_cast<std::ptrdiff_t>(y * w));
    }
    return out;
  }

  bool operator==(const Raster&) const = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

inline constexpr std::uint8_t kTumour = 255;
inline constexpr std::uint8_t kBackground = 0;

/// Binary raster with values in {0, 255}; 255 marks tumour.
class SegmentationMask {
 public:
  SegmentationMask() = default;
  SegmentationMask(std::size_t width, std::size_t height, bool tumour = false)
      : raster_(width, height, tumour ? kTumour : kBackground) {}

  /// Throws if any value is outside {0, 255}.
  static SegmentationMask from_raster(Raster r) {
    for (std::uint8_t v : r.pixels()) {
      if (v != kTumour && v != kBackground) {
        throw std::invalid_argument("mask value " + std::to_string(v) + " is not 0 or 255");
      }
    }
    SegmentationMask m;
    m.raster_ = std::move(r);
    return m;
  }

  std::size_t width() const { return raster_.width(); }
  std::size_t height() const { return raster_.height(); }
  std::size_t size() const { return raster_.size(); }
  bool empty() const { return raster_.empty(); }

  bool tumour(std::size_t x, std::size_t y) const { return raster_.at(x, y) == kTumour; }
  void set(std::size_t x, std::size_t y, bool tumour) {
    raster_.at(x, y) = tumour ? kTumour : kBackground;
  }

  std::size_t tumour_count() const {
    return static_cast<std::size_t>(
        std::count(raster_.pixels().begin(), raster_.pixels().end(), kTumour));
  }

  const Raster& raster() const { return raster_; }

  bool operator==(const SegmentationMask&) const = default;

 private:
  Raster raster_;
};

// ---------------------------------------------------------------------------
// Tensor conversion
// ---------------------------------------------------------------------------

/// 1 x channels x H x W with intensities scaled to [0, 1]; the gray plane is replicated.
inline Tensor to_tensor(const Raster& r, std::size_t channels = 1) {
  Tensor t(Shape{1, channels, r.height(), r.width()});
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < r.size(); ++i) t[c * r.size() + i] = r.pixels()[i] / 255.0;
  }
  return t;
}

/// 1 x 1 x H x W with tumour = 1.
inline Tensor to_tensor(const SegmentationMask& m) {
  Tensor t(Shape{1, 1, m.height(), m.width()});
  for (std::size_t i = 0; i < m.size(); ++i) t[i] = m.raster().pixels()[i] == kTumour ? 1.0 : 0.0;
  return t;
}

/// Stacks equally-shaped 1-item tensors along the batch axis.
inline Tensor stack(const std::vector<Tensor>& items) {
  if (items.empty()) throw std::invalid_argument("stack: no items");
  const Shape s = items.front().shape();
  Tensor out(Shape{items.size(), s.c, s.h, s.w});
  const std::size_t per = s.c * s.plane();
  for (std::size_t n = 0; n < items.size(); ++n) {
    if (items[n].shape() != Shape{1, s.c, s.h, s.w}) {
      throw std::invalid_argument("stack: item " + items[n].shape().str() + " differs from " +
                                  s.str());
    }
    std::copy_n(items[n].ptr(), per, out.ptr() + n * per);
  }
  return out;
}

// ---------------------------------------------------------------------------
// PGM (P5) and PNG
// ---------------------------------------------------------------------------

Raster read_pgm(const std::filesystem::path& path);

void write_pgm(const std::filesystem::path& path, const Raster& r);

/// 8-bit grayscale PNG only; colour or 16-bit files are rejected.
Raster read_png(const std::filesystem::path& path);

bool is_raster_file(const std::filesystem::path& path);

Raster read_raster(const std::filesystem::path& path);

SegmentationMask read_mask(const std::filesystem::path& path);

void write_mask(const std::filesystem::path& path, const SegmentationMask& m);

}  // namespace usseg
