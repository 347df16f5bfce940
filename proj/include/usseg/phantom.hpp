#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "usseg/raster.hpp"

namespace usseg {

/// Synthetic ultrasound-like phantom: speckled dark background, bright irregular blobs.
struct PhantomSpec {
  std::size_t count = 60;
  std::size_t side = 64;
  std::size_t min_blobs = 1;
  std::size_t max_blobs = 2;
  double min_radius = 0.10;  // fraction of side (semi-major axis)
  double max_radius = 0.25;
  double min_axis_ratio = 0.5;  // semi-minor / semi-major
  double irregularity = 0.15;   // relative amplitude of the border perturbation
  double background_level = 50.0;
  double tumour_level = 140.0;
  std::size_t speckle_blur = 1;  // box-blur radius applied to the exponential texture
  bool background_only = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (count == 0 || side < 8) throw std::invalid_argument("phantom: need count > 0, side >= 8");
    if (min_blobs == 0 || min_blobs > max_blobs) {
      throw std::invalid_argument("phantom: blob count range invalid");
    }
    if (!(min_radius > 0.0) || min_radius > max_radius || max_radius > 0.5) {
      throw std::invalid_argument("phantom: radius range invalid");
    }
    if (!(min_axis_ratio > 0.0) || min_axis_ratio > 1.0) {
      throw std::invalid_argument("phantom: axis ratio must lie in (0, 1]");
    }
    if (irregularity < 0.0 || irregularity >= 1.0) {
      throw std::invalid_argument("phantom: irregularity must lie in [0, 1)");
    }
  }
};

struct PhantomImage {
  std::string id;
  Raster image;
  SegmentationMask mask;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace detail

PhantomImage synth_one(const PhantomSpec& spec, std::size_t index);

std::vector<PhantomImage> synth_phantom(const PhantomSpec& spec);

/// Writes <dir>/images/<id>.pgm and <dir>/masks/<id>.pgm.
void write_phantom(const PhantomSpec& spec, const std::filesystem::path& dir);

}  // namespace usseg
