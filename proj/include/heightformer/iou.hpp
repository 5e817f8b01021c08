#pragma once

// Rotated-box overlap: BEV footprint polygons clipped with Sutherland-Hodgman,
// extruded by the vertical overlap.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "heightformer/box.hpp"

namespace hf {

struct Point2 {
  double x = 0.0, y = 0.0;
};

using Footprint = std::array<Point2, 4>;

inline double cross2(const Point2& o, const Point2& a, const Point2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

/// Shoelace area, positive for counter-clockwise polygons.
template <typename Poly>
double signed_area(const Poly& poly) {
  double s = 0.0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = poly[i];
    const auto& b = poly[(i + 1) % n];
    s += a.x * b.y - b.x * a.y;
  }
  return 0.5 * s;
}

/// Corners at center + R(yaw) (+-L/2, +-W/2), counter-clockwise.
inline Footprint bev_footprint(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = 0.5 * b.length, hw = 0.5 * b.width;
  const std::array<Point2, 4> local = {{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  Footprint out;
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = {b.cx + c * local[i].x - s * local[i].y, b.cy + s * local[i].x + c * local[i].y};
  }
  if (signed_area(out) < 0.0) std::reverse(out.begin(), out.end());
  return out;
}

/// Intersection of two convex counter-clockwise polygons.
template <typename PolyA, typename PolyB>
std::vector<Point2> clip_convex(const PolyA& subject, const PolyB& clip) {
  std::vector<Point2> out(subject.begin(), subject.end());
  const std::size_t m = clip.size();
  for (std::size_t e = 0; e < m && !out.empty(); ++e) {
    const Point2 a = clip[e], b = clip[(e + 1) % m];
    std::vector<Point2> in;
    in.swap(out);
    const std::size_t n = in.size();
    for (std::size_t i = 0; i < n; ++i) {
      const Point2 p = in[i], q = in[(i + 1) % n];
      const double sp = cross2(a, b, p), sq = cross2(a, b, q);
      if (sp >= 0.0) out.push_back(p);
      if ((sp >= 0.0) != (sq >= 0.0)) {
        const double t = sp / (sp - sq);
        out.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
      }
    }
  }
  return out;
}

inline double bev_intersection_area(const Box3D& a, const Box3D& b) {
  const auto poly = clip_convex(bev_footprint(a), bev_footprint(b));
  return poly.size() < 3 ? 0.0 : std::max(0.0, signed_area(poly));
}

/// Footprint IoU, used by NMS.
inline double bev_iou(const Box3D& a, const Box3D& b) {
  const double inter = bev_intersection_area(a, b);
  const double uni = a.length * a.width + b.length * b.width - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

inline double vertical_overlap(const Box3D& a, const Box3D& b) {
  return std::max(0.0, std::min(a.top(), b.top()) - std::max(a.bottom(), b.bottom()));
}

inline double rotated_iou_3d(const Box3D& a, const Box3D& b) {
  const double dz = vertical_overlap(a, b);
  if (dz <= 0.0) return 0.0;
  const double inter = bev_intersection_area(a, b) * dz;
  const double uni = a.volume() + b.volume() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

}  // namespace hf
