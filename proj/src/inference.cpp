#include "usseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace usseg {

SegmentResult segment_full(UNet& net, const Raster& image, std::size_t train_w,
                                  std::size_t train_h) {
  net.config().check_input(train_h, train_w);
  const Raster small = resize(image, train_w, train_h);
  const Tensor probs = net.predict(to_tensor(small, net.config().in_channels));
  SegmentResult r;
  r.probability = ProbabilityMap::from_scores(probs);
  r.mask_resized = threshold(r.probability);
  r.mask = resize(r.mask_resized, image.width(), image.height());
  return r;
}

ProbabilityMap tiled_classify(const TileClassifier& clf, const Raster& image,
                                     const std::vector<std::size_t>& scales,
                                     std::vector<std::string>* warnings,
                                     TiledOptions opts) {
  const std::size_t w = image.width();
  const std::size_t h = image.height();
  ProbabilityMap fused(w, h, 0.0);
  std::size_t used = 0;
  for (std::size_t s : scales) {
    if (s == 0 || s > w || s > h) {
      if (warnings) {
        warnings->push_back("scale " + std::to_string(s) + " skipped: exceeds image " +
                            std::to_string(w) + "x" + std::to_string(h));
      }
      continue;
    }
    const TileGrid grid = TileGrid::make(w, h, s);
    std::vector<double> sum(w * h, 0.0);
    std::vector<unsigned> count(w * h, 0);
    auto paint = [&](const Tile& t) {
      double p = clf(image.crop(t.x, t.y, t.side, t.side), t);
      if (opts.hard_labels) p = p >= 0.5 ? 1.0 : 0.0;
      for (std::size_t y = t.y; y < t.y + t.side; ++y) {
        for (std::size_t x = t.x; x < t.x + t.side; ++x) {
          sum[y * w + x] += p;
          ++count[y * w + x];
        }
      }
    };
    for (const Tile& t : grid.tiles) paint(t);
    for (const Tile& t : grid.margin) paint(t);
    for (std::size_t i = 0; i < w * h; ++i) fused.values()[i] += sum[i] / count[i];
    ++used;
  }
  if (used == 0) throw std::invalid_argument("tiled_classify: no usable scale");
  for (double& v : fused.values()) v /= static_cast<double>(used);
  return fused;
}

void write_probability_map(const std::filesystem::path& path, const ProbabilityMap& p) {
  Raster r(p.width(), p.height());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double v = std::clamp(p.values()[i], 0.0, 1.0);
    r.pixels()[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  write_pgm(path, r);
  std::ofstream side(path.string() + ".txt");
  if (!side) throw IoError("cannot write sidecar for " + path.string());
  side << "scale_factor=" << 1.0 / 255.0 << "\n"
       << "encoding=probability = pixel * scale_factor\n"
       << "width=" << p.width() << "\nheight=" << p.height() << "\n";
}
}  // namespace usseg
