#include "usseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

namespace usseg {

PhantomImage synth_one(const PhantomSpec& spec, std::size_t index) {
  std::mt19937_64 rng(detail::mix_seed(spec.seed, index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = spec.side;
  const double side = static_cast<double>(n);

  SegmentationMask mask(n, n);
  if (!spec.background_only) {
    const std::size_t blobs =
        spec.min_blobs + static_cast<std::size_t>(unit(rng) * (spec.max_blobs - spec.min_blobs + 1));
    for (std::size_t b = 0; b < std::min(blobs, spec.max_blobs); ++b) {
      const double a = side * (spec.min_radius + (spec.max_radius - spec.min_radius) * unit(rng));
      const double bb = a * (spec.min_axis_ratio + (1.0 - spec.min_axis_ratio) * unit(rng));
      const double cx = a + (side - 2.0 * a) * unit(rng);
      const double cy = a + (side - 2.0 * a) * unit(rng);
      const double phi = std::numbers::pi * unit(rng);
      double amp[3], phase[3];
      for (int k = 0; k < 3; ++k) {
        amp[k] = spec.irregularity * unit(rng) / 3.0;
        phase[k] = 2.0 * std::numbers::pi * unit(rng);
      }
      const double c = std::cos(phi), s = std::sin(phi);
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          const double dx = static_cast<double>(x) - cx;
          const double dy = static_cast<double>(y) - cy;
          const double u = (c * dx + s * dy) / a;
          const double v = (-s * dx + c * dy) / bb;
          const double theta = std::atan2(v, u);
          double r = 1.0;
          for (int k = 0; k < 3; ++k) r += amp[k] * std::sin((k + 2) * theta + phase[k]);
          if (std::sqrt(u * u + v * v) <= r) mask.set(x, y, true);
        }
      }
      // The centre pixel is always inside, so every blob contributes at least one pixel.
      mask.set(static_cast<std::size_t>(cx), static_cast<std::size_t>(cy), true);
    }
  }

  // Multiplicative speckle: exponential texture smoothed by a box blur.
  std::exponential_distribution<double> expo(1.0);
  std::vector<double> tex(n * n);
  for (double& t : tex) t = expo(rng);
  std::vector<double> smooth(n * n, 0.0);
  const long r = static_cast<long>(spec.speckle_blur);
  for (long y = 0; y < static_cast<long>(n); ++y) {
    for (long x = 0; x < static_cast<long>(n); ++x) {
      double acc = 0.0;
      int cnt = 0;
      for (long dy = -r; dy <= r; ++dy) {
        for (long dx = -r; dx <= r; ++dx) {
          const long xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= static_cast<long>(n) || yy >= static_cast<long>(n)) continue;
          acc += tex[static_cast<std::size_t>(yy) * n + static_cast<std::size_t>(xx)];
          ++cnt;
        }
      }
      smooth[static_cast<std::size_t>(y) * n + static_cast<std::size_t>(x)] = acc / cnt;
    }
  }

  Raster img(n, n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double base = mask.tumour(x, y) ? spec.tumour_level : spec.background_level;
      const double v = base * smooth[y * n + x];
      img.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0l, 255l));
    }
  }

  char id[32];
  std::snprintf(id, sizeof(id), "phantom_%03zu", index);
  return PhantomImage{id, std::move(img), std::move(mask)};
}

std::vector<PhantomImage> synth_phantom(const PhantomSpec& spec) {
  spec.validate();
  std::vector<PhantomImage> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) out.push_back(synth_one(spec, i));
  return out;
}

void write_phantom(const PhantomSpec& spec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  for (const PhantomImage& p : synth_phantom(spec)) {
    write_pgm(dir / "images" / (p.id + ".pgm"), p.image);
    write_mask(dir / "masks" / (p.id + ".pgm"), p.mask);
  }
}
}  // namespace usseg
