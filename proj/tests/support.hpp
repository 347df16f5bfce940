#pragma once

// Shared generators and brute-force oracles for the test suites. Oracles here are written
// independently of the library code paths they check (plain loops, no im2col, no tables).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "usseg/usseg.hpp"

namespace testing_support {

using namespace usseg;

inline Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(s);
  for (double& v : t.data()) v = d(rng);
  return t;
}

/// Values bounded away from zero (|v| in [margin, 1]) so relu kinks are not straddled.
inline Tensor away_from_zero(Shape s, std::uint64_t seed, double margin = 0.05) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> mag(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor t(s);
  for (double& v : t.data()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

/// A random permutation of evenly spaced values: every element distinct, gaps >= 1/size.
inline Tensor distinct_tensor(Shape s, std::uint64_t seed) {
  std::vector<double> vals(s.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<double>(i) / vals.size();
  std::mt19937_64 rng(seed);
  std::shuffle(vals.begin(), vals.end(), rng);
  return Tensor(s, vals);
}

inline Tensor random_scores(Shape s, std::uint64_t seed) {
  return random_tensor(s, seed, 0.02, 0.98);
}

inline Tensor random_binary(Shape s, std::uint64_t seed, double p = 0.4) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution d(p);
  Tensor t(s);
  for (double& v : t.data()) v = d(rng) ? 1.0 : 0.0;
  return t;
}

inline SegmentationMask random_mask(std::size_t w, std::size_t h, std::mt19937_64& rng,
                                    double p = 0.5) {
  std::bernoulli_distribution d(p);
  SegmentationMask m(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) m.set(x, y, d(rng));
  }
  return m;
}

inline Raster random_raster(std::size_t w, std::size_t h, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, 255);
  Raster r(w, h);
  for (auto& v : r.pixels()) v = static_cast<std::uint8_t>(d(rng));
  return r;
}

/// f = sum(w * y) for a fixed random projection w; keeps every output element in play.
inline Var project(Tape& t, const Var& y, std::uint64_t seed) {
  return sum(t, mul(t, y, Var::constant(random_tensor(y.shape(), seed ^ 0xABCDEFull))));
}

// ---------------------------------------------------------------------------
// Naive layer oracles
// ---------------------------------------------------------------------------

inline Tensor naive_conv2d(const Tensor& x, const Tensor& k, const Tensor* bias, std::size_t stride,
                           std::size_t pad) {
  const Shape xs = x.shape(), ks = k.shape();
  const std::size_t oh = (xs.h + 2 * pad - ks.h) / stride + 1;
  const std::size_t ow = (xs.w + 2 * pad - ks.w) / stride + 1;
  Tensor y(Shape{xs.n, ks.n, oh, ow});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ks.n; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = bias ? (*bias)[o] : 0.0;
          for (std::size_t c = 0; c < xs.c; ++c)
            for (std::size_t a = 0; a < ks.h; ++a)
              for (std::size_t b = 0; b < ks.w; ++b) {
                const long yy = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + b) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(xs.h) || xx >= static_cast<long>(xs.w))
                  continue;
                acc += x.at(n, c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) *
                       k.at(o, c, a, b);
              }
          y.at(n, o, i, j) = acc;
        }
  return y;
}

/// Scatter form of the transposed convolution; kernel (in, out, kh, kw).
inline Tensor naive_tconv(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad = 0,
                          std::size_t outpad = 0) {
  const Shape xs = x.shape(), ks = k.shape();
  const std::size_t full_h = (xs.h - 1) * stride + ks.h;
  const std::size_t full_w = (xs.w - 1) * stride + ks.w;
  const std::size_t oh = full_h - 2 * pad + outpad;
  const std::size_t ow = full_w - 2 * pad + outpad;
  Tensor y(Shape{xs.n, ks.c, oh, ow});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c)
      for (std::size_t i = 0; i < xs.h; ++i)
        for (std::size_t j = 0; j < xs.w; ++j)
          for (std::size_t o = 0; o < ks.c; ++o)
            for (std::size_t a = 0; a < ks.h; ++a)
              for (std::size_t b = 0; b < ks.w; ++b) {
                const long yy = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + b) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(oh) || xx >= static_cast<long>(ow))
                  continue;
                y.at(n, o, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) +=
                    x.at(n, c, i, j) * k.at(c, o, a, b);
              }
  return y;
}

}  // namespace testing_support
