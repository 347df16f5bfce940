#include "usseg/metrics.hpp"

#include <cmath>
#include <cstdio>

namespace usseg {

std::vector<std::pair<std::size_t, std::size_t>> boundary_pixels(const SegmentationMask& m) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const std::size_t w = m.width();
  const std::size_t h = m.height();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (!m.tumour(x, y)) continue;
      const bool edge = (x > 0 && !m.tumour(x - 1, y)) || (x + 1 < w && !m.tumour(x + 1, y)) ||
                        (y > 0 && !m.tumour(x, y - 1)) || (y + 1 < h && !m.tumour(x, y + 1));
      if (edge) out.emplace_back(x, y);
    }
  }
  return out;
}

double detail::matched_fraction(const std::vector<std::pair<std::size_t, std::size_t>>& from,
                               const std::vector<std::pair<std::size_t, std::size_t>>& to,
                               std::size_t width, std::size_t height, double tol) {
  std::vector<char> grid(width * height, 0);
  for (auto [x, y] : to) grid[y * width + x] = 1;
  const long r = static_cast<long>(std::floor(tol));
  const double tol2 = tol * tol;
  std::size_t hit = 0;
  for (auto [x, y] : from) {
    bool found = false;
    for (long dy = -r; dy <= r && !found; ++dy) {
      const long yy = static_cast<long>(y) + dy;
      if (yy < 0 || yy >= static_cast<long>(height)) continue;
      for (long dx = -r; dx <= r; ++dx) {
        const long xx = static_cast<long>(x) + dx;
        if (xx < 0 || xx >= static_cast<long>(width)) continue;
        if (static_cast<double>(dx * dx + dy * dy) > tol2) continue;
        if (grid[static_cast<std::size_t>(yy) * width + static_cast<std::size_t>(xx)]) {
          found = true;
          break;
        }
      }
    }
    if (found) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(from.size());
}

double bf_score(const SegmentationMask& pred, const SegmentationMask& truth,
                       double tolerance) {
  detail::require_same_dims("bf_score", pred, truth);
  if (tolerance < 0.0) throw std::invalid_argument("bf_score: negative tolerance");
  const auto pb = boundary_pixels(pred);
  const auto tb = boundary_pixels(truth);
  if (pb.empty() && tb.empty()) return 1.0;
  if (pb.empty() || tb.empty()) return 0.0;
  const double precision = detail::matched_fraction(pb, tb, pred.width(), pred.height(), tolerance);
  const double recall = detail::matched_fraction(tb, pb, pred.width(), pred.height(), tolerance);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

MetricReport aggregate(std::vector<MetricRow> rows) {
  if (rows.empty()) throw std::invalid_argument("aggregate: no rows");
  MetricReport report;
  const double n = static_cast<double>(rows.size());
  for (std::size_t k = 0; k < kMetricCount; ++k) {
    double s = 0.0;
    for (const auto& r : rows) s += r.values[k];
    const double mean = s / n;
    double ss = 0.0;
    for (const auto& r : rows) ss += (r.values[k] - mean) * (r.values[k] - mean);
    report.mean[k] = mean;
    report.stddev[k] = std::sqrt(ss / n);
  }
  report.rows = std::move(rows);
  return report;
}

void write_report_csv(std::ostream& out, const std::string& model_name,
                             const MetricReport& report) {
  out << kReportCsvHeader << "\n";
  auto emit = [&](const std::string& id, const std::array<double, kMetricCount>& v) {
    out << model_name << "," << id;
    char buf[32];
    for (double x : v) {
      std::snprintf(buf, sizeof(buf), "%.10g", x);
      out << "," << buf;
    }
    out << "\n";
  };
  for (const auto& r : report.rows) emit(r.image_id, r.values);
  emit("mean", report.mean);
  emit("std", report.stddev);
}
}  // namespace usseg
