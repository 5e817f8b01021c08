#pragma once

// Straightforward reference implementations used to cross-check the library.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "heightformer/bev.hpp"
#include "heightformer/box.hpp"
#include "heightformer/frustum.hpp"
#include "heightformer/iou.hpp"
#include "heightformer/metrics.hpp"

namespace hf::oracle {

/// Per-point scatter into a C x ny x nx grid.
inline std::vector<double> scatter(const FeaturePointCloud& cloud, const BevGridSpec& spec) {
  const std::size_t nx = spec.cells_x(), ny = spec.cells_y(), c = spec.channels;
  std::vector<double> grid(c * nx * ny, 0.0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double x = cloud.xyz[i].x(), y = cloud.xyz[i].y();
    const double fx = std::floor((x - spec.x_min) / spec.resolution);
    const double fy = std::floor((y - spec.y_min) / spec.resolution);
    if (fx < 0 || fy < 0 || fx >= static_cast<double>(nx) || fy >= static_cast<double>(ny)) continue;
    const auto ix = static_cast<std::size_t>(fx), iy = static_cast<std::size_t>(fy);
    for (std::size_t ch = 0; ch < c; ++ch) grid[(ch * ny + iy) * nx + ix] += cloud.features[i * c + ch];
  }
  return grid;
}

/// Whether (x, y) lies inside the box footprint, tested in the box frame.
inline bool inside_footprint(const Box3D& b, double x, double y) {
  const double dx = x - b.cx, dy = y - b.cy;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double lx = c * dx + s * dy, ly = -s * dx + c * dy;
  return std::abs(lx) <= 0.5 * b.length && std::abs(ly) <= 0.5 * b.width;
}

inline double z_overlap(const Box3D& a, const Box3D& b) {
  return std::max(0.0, std::min(a.cz + a.height / 2, b.cz + b.height / 2) - std::max(a.cz - a.height / 2, b.cz - b.height / 2));
}

inline void footprint_bounds(const Box3D& b, double& x0, double& x1, double& y0, double& y1) {
  const double c = std::abs(std::cos(b.yaw)), s = std::abs(std::sin(b.yaw));
  const double ex = 0.5 * (b.length * c + b.width * s), ey = 0.5 * (b.length * s + b.width * c);
  x0 = b.cx - ex;
  x1 = b.cx + ex;
  y0 = b.cy - ey;
  y1 = b.cy + ey;
}

/// 3D IoU from an n x n grid of cell-center samples over the overlap of the
/// footprint bounding rectangles.
inline double raster_iou(const Box3D& a, const Box3D& b, int n = 1000) {
  double ax0, ax1, ay0, ay1, bx0, bx1, by0, by1;
  footprint_bounds(a, ax0, ax1, ay0, ay1);
  footprint_bounds(b, bx0, bx1, by0, by1);
  const double x0 = std::max(ax0, bx0), x1 = std::min(ax1, bx1), y0 = std::max(ay0, by0), y1 = std::min(ay1, by1);
  const double hx = (x1 - x0) / n, hy = (y1 - y0) / n;
  long both = 0;
  if (x1 <= x0 || y1 <= y0) return 0.0;
  const double ca = std::cos(a.yaw), sa = std::sin(a.yaw), cb = std::cos(b.yaw), sb = std::sin(b.yaw);
  for (int i = 0; i < n; ++i) {
    const double y = y0 + (i + 0.5) * hy;
    for (int j = 0; j < n; ++j) {
      const double x = x0 + (j + 0.5) * hx;
      const double dax = x - a.cx, day = y - a.cy, dbx = x - b.cx, dby = y - b.cy;
      both += std::abs(ca * dax + sa * day) <= 0.5 * a.length && std::abs(-sa * dax + ca * day) <= 0.5 * a.width &&
              std::abs(cb * dbx + sb * dby) <= 0.5 * b.length && std::abs(-sb * dbx + cb * dby) <= 0.5 * b.width;
    }
  }
  const double inter = static_cast<double>(both) * hx * hy * z_overlap(a, b);
  return inter / (a.length * a.width * a.height + b.length * b.width * b.height - inter);
}

/// x-interval of a footprint on the horizontal line at y; empty when lo > hi.
inline std::pair<double, double> row_interval(const Box3D& b, double y) {
  // Solve |c dx + s dy| <= L/2 and |-s dx + c dy| <= W/2 for x.
  const double c = std::cos(b.yaw), s = std::sin(b.yaw), dy = y - b.cy;
  double lo = -1e300, hi = 1e300;
  auto clamp_to = [&](double coef, double rest, double half) {
    if (std::abs(coef) < 1e-15) {
      if (std::abs(rest) > half) lo = 1, hi = 0;
      return;
    }
    double a = (-half - rest) / coef, z = (half - rest) / coef;
    if (a > z) std::swap(a, z);
    lo = std::max(lo, a);
    hi = std::min(hi, z);
  };
  clamp_to(c, s * dy, 0.5 * b.length);
  clamp_to(-s, c * dy, 0.5 * b.width);
  return {lo + b.cx, hi + b.cx};
}

/// 3D IoU by scanlines: exact intersection length per row, n rows.
inline double scanline_iou(const Box3D& a, const Box3D& b, int n = 4000) {
  double ax0, ax1, ay0, ay1, bx0, bx1, by0, by1;
  footprint_bounds(a, ax0, ax1, ay0, ay1);
  footprint_bounds(b, bx0, bx1, by0, by1);
  const double y0 = std::max(ay0, by0), y1 = std::min(ay1, by1);
  double area = 0.0;
  if (y1 > y0) {
    const double h = (y1 - y0) / n;
    for (int i = 0; i < n; ++i) {
      const double y = y0 + (i + 0.5) * h;
      const auto [alo, ahi] = row_interval(a, y);
      const auto [blo, bhi] = row_interval(b, y);
      area += std::max(0.0, std::min(ahi, bhi) - std::max(alo, blo)) * h;
    }
  }
  const double inter = area * z_overlap(a, b);
  return inter / (a.length * a.width * a.height + b.length * b.width * b.height - inter);
}

/// AP by direct enumeration: every rank cut-off gives (recall, precision);
/// for r = 1/40 .. 1 take the best precision among cut-offs reaching recall r.
/// Assumes distinct scores.
inline double ap_r40_enumerated(const std::vector<RankedPrediction>& preds, std::size_t n_gt) {
  std::vector<RankedPrediction> sorted = preds;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<double> recall, precision;
  for (std::size_t k = 1; k <= sorted.size(); ++k) {
    std::size_t tp = 0;
    for (std::size_t i = 0; i < k; ++i) tp += sorted[i].true_positive;
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k));
  }
  double sum = 0.0;
  for (int r = 1; r <= 40; ++r) {
    double best = 0.0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
      if (recall[i] >= r / 40.0) best = std::max(best, precision[i]);
    }
    sum += best;
  }
  return sum / 40.0;
}

/// Greedy matching written as an explicit scan over all (pred, gt) IoUs.
inline MatchSet greedy_match(const std::vector<Detection>& preds, const std::vector<Box3D>& gts, double thr) {
  std::vector<std::vector<double>> iou(preds.size(), std::vector<double>(gts.size()));
  for (std::size_t p = 0; p < preds.size(); ++p) {
    for (std::size_t g = 0; g < gts.size(); ++g) iou[p][g] = rotated_iou_3d(preds[p].box, gts[g]);
  }
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return preds[a].score > preds[b].score; });
  std::vector<int> owner(gts.size(), -1);
  MatchSet m;
  for (auto p : order) {
    int best = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (owner[g] >= 0 || iou[p][g] < thr) continue;
      if (best < 0 || iou[p][g] > iou[p][static_cast<std::size_t>(best)]) best = static_cast<int>(g);
    }
    if (best < 0) {
      m.unmatched_preds.push_back(p);
    } else {
      owner[static_cast<std::size_t>(best)] = static_cast<int>(p);
      m.pairs.push_back({p, static_cast<std::size_t>(best), iou[p][static_cast<std::size_t>(best)]});
    }
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (owner[g] < 0) m.unmatched_gts.push_back(g);
  }
  return m;
}

/// O(n^2) NMS: mark suppression forward from every surviving box.
inline std::vector<std::size_t> nms_keep(const std::vector<Detection>& dets, double thr) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return dets[a].score > dets[b].score; });
  std::vector<bool> dead(dets.size(), false);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (dead[order[i]]) continue;
    keep.push_back(order[i]);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const auto& a = dets[order[i]];
      const auto& b = dets[order[j]];
      if (a.category == b.category && bev_iou(a.box, b.box) >= thr) dead[order[j]] = true;
    }
  }
  return keep;
}

}  // namespace hf::oracle
