#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "usseg/raster.hpp"

namespace usseg {

/// Pixel confusion counts. Naming follows truth->prediction: p_tb is a tumour pixel
/// predicted as background.
struct ConfusionCounts {
  std::size_t p_bb = 0;
  std::size_t p_tt = 0;
  std::size_t p_tb = 0;
  std::size_t p_bt = 0;

  std::size_t total() const { return p_bb + p_tt + p_tb + p_bt; }
  bool operator==(const ConfusionCounts&) const = default;
};

namespace detail {

inline void require_same_dims(const char* op, const SegmentationMask& a,
                              const SegmentationMask& b) {
  if (a.width() != b.width() || a.height() != b.height()) {
    throw std::invalid_argument(std::string(op) + ": mask dimensions differ (" +
                                std::to_string(a.width()) + "x" + std::to_string(a.height()) +
                                " vs " + std::to_string(b.width()) + "x" +
                                std::to_string(b.height()) + ")");
  }
}

// Zero denominator: 1 when the class is absent from both masks, else 0.
inline double class_ratio(std::size_t num, std::size_t den, bool class_present_elsewhere) {
  if (den == 0) return class_present_elsewhere ? 0.0 : 1.0;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace detail

inline ConfusionCounts confusion_counts(const SegmentationMask& pred,
                                        const SegmentationMask& truth) {
  detail::require_same_dims("confusion_counts", pred, truth);
  ConfusionCounts c;
  const auto p = pred.raster().pixels();
  const auto t = truth.raster().pixels();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pt = p[i] == kTumour;
    const bool tt = t[i] == kTumour;
    if (tt) {
      pt ? ++c.p_tt : ++c.p_tb;
    } else {
      pt ? ++c.p_bt : ++c.p_bb;
    }
  }
  return c;
}

inline double global_accuracy(const ConfusionCounts& c) {
  if (c.total() == 0) throw std::invalid_argument("global_accuracy: no pixels");
  return static_cast<double>(c.p_bb + c.p_tt) / static_cast<double>(c.total());
}

inline double mean_accuracy(const ConfusionCounts& c) {
  // Background: truth-background pixels; tumour: truth-tumour pixels.
  const double bg = detail::class_ratio(c.p_bb, c.p_bb + c.p_bt, c.p_tb > 0);
  const double tu = detail::class_ratio(c.p_tt, c.p_tb + c.p_tt, c.p_bt > 0);
  return 0.5 * (bg + tu);
}

inline double background_iou(const ConfusionCounts& c) {
  return detail::class_ratio(c.p_bb, c.p_bb + c.p_tb + c.p_bt, false);
}

inline double tumour_iou(const ConfusionCounts& c) {
  return detail::class_ratio(c.p_tt, c.p_tt + c.p_tb + c.p_bt, false);
}

inline double mean_iou(const ConfusionCounts& c) { return 0.5 * (background_iou(c) + tumour_iou(c)); }

/// IoU per class weighted by the class share of the truth mask.
inline double weighted_iou(const ConfusionCounts& c, const SegmentationMask& truth) {
  const double w = static_cast<double>(truth.size());
  if (w == 0.0) throw std::invalid_argument("weighted_iou: empty truth");
  const double t = static_cast<double>(truth.tumour_count());
  const double b = w - t;
  return b / w * background_iou(c) + t / w * tumour_iou(c);
}

inline constexpr double kDefaultBoundaryTolerance = 2.0;

/// Tumour pixels with at least one 4-neighbour of background inside the image.
std::vector<std::pair<std::size_t, std::size_t>> boundary_pixels(const SegmentationMask& m);

namespace detail {

/// Fraction of `from` pixels within `tol` (Euclidean) of some `to` pixel.
double matched_fraction(const std::vector<std::pair<std::size_t, std::size_t>>& from,
                               const std::vector<std::pair<std::size_t, std::size_t>>& to,
                               std::size_t width, std::size_t height, double tol);

}  // namespace detail

/// Boundary F1 of the tumour class. Both boundaries empty scores 1; exactly one empty scores 0.
double bf_score(const SegmentationMask& pred, const SegmentationMask& truth,
                       double tolerance = kDefaultBoundaryTolerance);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline constexpr std::size_t kMetricCount = 5;
inline constexpr std::array<const char*, kMetricCount> kMetricNames = {
    "global_accuracy", "mean_accuracy", "mean_iou", "weighted_iou", "mean_bf_score"};
inline constexpr const char* kReportCsvHeader =
    "model_name,image_id,global_accuracy,mean_accuracy,mean_iou,weighted_iou,mean_bf_score";

struct MetricRow {
  std::string image_id;
  std::array<double, kMetricCount> values{};

  double global_accuracy() const { return values[0]; }
  double mean_accuracy() const { return values[1]; }
  double mean_iou() const { return values[2]; }
  double weighted_iou() const { return values[3]; }
  double bf_score() const { return values[4]; }
};

struct MetricReport {
  std::vector<MetricRow> rows;
  std::array<double, kMetricCount> mean{};
  std::array<double, kMetricCount> stddev{};
};

inline MetricRow evaluate_pair(const std::string& image_id, const SegmentationMask& pred,
                               const SegmentationMask& truth,
                               double tolerance = kDefaultBoundaryTolerance) {
  const ConfusionCounts c = confusion_counts(pred, truth);
  MetricRow row;
  row.image_id = image_id;
  row.values = {global_accuracy(c), mean_accuracy(c), mean_iou(c), weighted_iou(c, truth),
                bf_score(pred, truth, tolerance)};
  return row;
}

/// Per-metric arithmetic mean and population standard deviation.
MetricReport aggregate(std::vector<MetricRow> rows);

/// CSV with per-image rows followed by "mean" and "std" rows.
void write_report_csv(std::ostream& out, const std::string& model_name,
                             const MetricReport& report);

}  // namespace usseg
