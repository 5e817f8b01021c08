#pragma once

// Deterministic synthetic roadside scenes: a pitched camera over flat ground,
// boxes resting on the ground, a semantic painting of their 2D extents, and
// the ideal per-pixel height map.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "heightformer/bev.hpp"
#include "heightformer/box.hpp"
#include "heightformer/errors.hpp"
#include "heightformer/geometry.hpp"
#include "heightformer/iou.hpp"
#include "heightformer/random.hpp"
#include "heightformer/render.hpp"
#include "heightformer/scene_io.hpp"

namespace hf {

struct SyntheticSceneSpec {
  std::uint64_t seed = 0;
  std::array<std::size_t, kNumCategories> n_objects = {4, 1, 1};
  double height_min = 4.0, height_max = 8.0;                                  // meters
  double pitch_min = 5.0 * std::numbers::pi / 180.0, pitch_max = 15.0 * std::numbers::pi / 180.0;
  double focal_min = 70.0, focal_max = 90.0;                                  // pixels
  std::size_t image_width = 96, image_height = 64;
  BevGridSpec bev;
  double max_abs_yaw = 0.15;
  double noise = 0.02;  // pixel noise stddev, in [0, 1] intensity units
  std::size_t max_attempts = 100;

  void validate() const {
    if (!(height_min > 0.0 && height_min <= height_max)) throw ConfigError("synth: bad camera height range");
    if (!(pitch_min > 0.0 && pitch_min <= pitch_max && pitch_max < std::numbers::pi / 2)) {
      throw ConfigError("synth: bad pitch range");
    }
    if (!(focal_min > 0.0 && focal_min <= focal_max)) throw ConfigError("synth: bad focal range");
    if (image_width == 0 || image_height == 0) throw ConfigError("synth: empty image");
    if (!(noise >= 0.0)) throw ConfigError("synth: noise must be nonnegative");
    if (!(max_abs_yaw >= 0.0)) throw ConfigError("synth: max_abs_yaw must be nonnegative");
    bev.validate();
  }
};

struct SyntheticScene {
  SceneAnnotation annotation;
  VirtualCameraFrame frame;
  std::vector<LabeledBox> boxes;  // generator ground truth, ego frame
  Image8 image;
  std::vector<double> height_map;  // row-major, image_height x image_width
};

inline constexpr std::array<Rgb, kNumCategories> kClassColors = {{{220, 40, 40}, {40, 200, 60}, {50, 80, 230}}};
inline constexpr double kGroundIntensity = 0.4;

namespace synth {

inline Box3D sample_dimensions(Category c, Rng& rng) {
  Box3D b;
  switch (c) {
    case Category::Car:
      b.length = rng.uniform(3.8, 4.8);
      b.width = rng.uniform(1.6, 2.0);
      b.height = rng.uniform(1.4, 1.7);
      break;
    case Category::BigVehicle:
      b.length = rng.uniform(8.0, 11.0);
      b.width = rng.uniform(2.4, 2.6);
      b.height = rng.uniform(2.8, 3.6);
      break;
    case Category::Cyclist:
      b.length = rng.uniform(1.5, 1.9);
      b.width = rng.uniform(0.5, 0.8);
      b.height = rng.uniform(1.5, 1.9);
      break;
  }
  return b;
}

inline std::array<Vec3, 8> corners(const Box3D& b) {
  std::array<Vec3, 8> out;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  std::size_t i = 0;
  for (double dz : {-0.5, 0.5}) {
    for (double dx : {-0.5, 0.5}) {
      for (double dy : {-0.5, 0.5}) {
        const double lx = dx * b.length, ly = dy * b.width;
        out[i++] = Vec3(b.cx + c * lx - s * ly, b.cy + s * lx + c * ly, b.cz + dz * b.height);
      }
    }
  }
  return out;
}

/// 2D extent (u0, v0, u1, v1) of the projected corners; empty if any corner
/// is behind the camera.
inline std::optional<std::array<double, 4>> project_extent(const Box3D& b, const VirtualCameraFrame& f) {
  std::array<double, 4> e = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                             -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const Vec3& p : corners(b)) {
    if (!(ego_to_camera(p, f).z() > 0.0)) return std::nullopt;
    const auto px = project_ego_to_pixel(p, f);
    e[0] = std::min(e[0], px.u);
    e[1] = std::min(e[1], px.v);
    e[2] = std::max(e[2], px.u);
    e[3] = std::max(e[3], px.v);
  }
  return e;
}

/// Ego-frame ray through the center of pixel (col, row).
inline std::pair<Vec3, Vec3> pixel_ray(std::size_t col, std::size_t row, const VirtualCameraFrame& f) {
  const auto ref = pixel_to_cam_ref({static_cast<double>(col) + 0.5, static_cast<double>(row) + 0.5, 0.0}, f.intrinsics);
  const Vec3 origin = camera_to_ego(Vec3::Zero(), f);
  return {origin, camera_to_ego(ref.point, f) - origin};
}

/// Entry parameter of the ray into the box (slab test in box coordinates).
inline std::optional<double> ray_box_entry(const Vec3& origin, const Vec3& dir, const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const Vec3 o = origin - Vec3(b.cx, b.cy, b.cz);
  const Vec3 lo(c * o.x() + s * o.y(), -s * o.x() + c * o.y(), o.z());
  const Vec3 ld(c * dir.x() + s * dir.y(), -s * dir.x() + c * dir.y(), dir.z());
  const Vec3 half(0.5 * b.length, 0.5 * b.width, 0.5 * b.height);
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k) {
    if (std::abs(ld[k]) < 1e-15) {
      if (std::abs(lo[k]) > half[k]) return std::nullopt;
      continue;
    }
    double a = (-half[k] - lo[k]) / ld[k], e = (half[k] - lo[k]) / ld[k];
    if (a > e) std::swap(a, e);
    t0 = std::max(t0, a);
    t1 = std::min(t1, e);
    if (t0 > t1) return std::nullopt;
  }
  return t0;
}

inline bool inside_image(const std::array<double, 4>& e, const SyntheticSceneSpec& spec) {
  return e[0] >= 0.0 && e[1] >= 0.0 && e[2] <= static_cast<double>(spec.image_width) &&
         e[3] <= static_cast<double>(spec.image_height);
}

inline bool inside_bev(const Box3D& b, const BevGridSpec& g) {
  for (const Point2& p : bev_footprint(b)) {
    if (p.x <= g.x_min || p.x >= g.x_max || p.y <= g.y_min || p.y >= g.y_max) return false;
  }
  return true;
}

inline Box3D inflated(Box3D b, double margin) {
  b.length += 2.0 * margin;
  b.width += 2.0 * margin;
  return b;
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace synth

/// Same spec and seed give bit-identical scenes. Throws PlacementError when
/// an object cannot be placed fully in view without overlap.
inline SyntheticScene generate_scene(const SyntheticSceneSpec& spec, const std::string& name = "scene") {
  spec.validate();
  Rng rng(spec.seed);
  SyntheticScene s;
  const double height = rng.uniform(spec.height_min, spec.height_max);
  const double pitch = rng.uniform(spec.pitch_min, spec.pitch_max);
  const double focal = rng.uniform(spec.focal_min, spec.focal_max);
  const CameraIntrinsics k{focal, focal, 0.5 * static_cast<double>(spec.image_width),
                           0.5 * static_cast<double>(spec.image_height)};
  const GroundPlane plane = ground_plane_for(pitch, height);
  s.frame = make_camera_frame(plane, k);

  for (std::size_t cls = 0; cls < kNumCategories; ++cls) {
    for (std::size_t n = 0; n < spec.n_objects[cls]; ++n) {
      const auto category = static_cast<Category>(cls);
      bool placed = false;
      for (std::size_t attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
        Box3D b = synth::sample_dimensions(category, rng);
        b.cx = rng.uniform(spec.bev.x_min, spec.bev.x_max);
        b.cy = rng.uniform(spec.bev.y_min, spec.bev.y_max);
        b.cz = 0.5 * b.height;
        b.yaw = rng.uniform(-spec.max_abs_yaw, spec.max_abs_yaw);
        if (!synth::inside_bev(b, spec.bev)) continue;
        const auto extent = synth::project_extent(b, s.frame);
        if (!extent || !synth::inside_image(*extent, spec)) continue;
        const bool overlaps = std::any_of(s.boxes.begin(), s.boxes.end(), [&](const LabeledBox& o) {
          return bev_intersection_area(synth::inflated(b, 0.25), synth::inflated(o.box, 0.25)) > 0.0;
        });
        if (overlaps) continue;
        s.boxes.push_back({b, category});
        placed = true;
      }
      if (!placed) {
        throw PlacementError("could not place " + std::string(category_name(category)) + " #" + std::to_string(n) +
                             " after " + std::to_string(spec.max_attempts) + " attempts");
      }
    }
  }

  // paint far to near; owner[pixel] = index of the box painted last
  const std::size_t w = spec.image_width, h = spec.image_height;
  std::vector<int> owner(w * h, -1);
  std::vector<std::array<double, 4>> extents;
  std::vector<std::size_t> order(s.boxes.size());
  for (std::size_t i = 0; i < s.boxes.size(); ++i) {
    extents.push_back(*synth::project_extent(s.boxes[i].box, s.frame));
    order[i] = i;
  }
  auto depth = [&](std::size_t i) {
    const Box3D& b = s.boxes[i].box;
    return ego_to_camera(Vec3(b.cx, b.cy, b.cz), s.frame).z();
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return depth(a) > depth(b); });
  std::vector<std::size_t> area(s.boxes.size(), 0);
  for (std::size_t i : order) {
    const auto& e = extents[i];
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const double u = static_cast<double>(c) + 0.5, v = static_cast<double>(r) + 0.5;
        if (u < e[0] || u > e[2] || v < e[1] || v > e[3]) continue;
        owner[r * w + c] = static_cast<int>(i);
        ++area[i];
      }
    }
  }

  s.image = Image8(w, h);
  for (std::size_t p = 0; p < w * h; ++p) {
    std::array<double, 3> rgb = {kGroundIntensity, kGroundIntensity, kGroundIntensity};
    if (owner[p] >= 0) {
      const Rgb c = kClassColors[static_cast<std::size_t>(s.boxes[static_cast<std::size_t>(owner[p])].category)];
      rgb = {c.r / 255.0, c.g / 255.0, c.b / 255.0};
    }
    if (spec.noise > 0.0) {
      for (double& x : rgb) x += rng.normal(0.0, spec.noise);
    }
    s.image.set(p % w, p / w, {synth::to_byte(rgb[0]), synth::to_byte(rgb[1]), synth::to_byte(rgb[2])});
  }

  s.height_map.assign(w * h, 0.0);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const auto [origin, dir] = synth::pixel_ray(c, r, s.frame);
      double best = std::numeric_limits<double>::infinity();
      for (const auto& lb : s.boxes) {
        const auto t = synth::ray_box_entry(origin, dir, lb.box);
        if (t && *t < best) {
          best = *t;
          s.height_map[r * w + c] = lb.box.height;
        }
      }
    }
  }

  SceneAnnotation& a = s.annotation;
  a.name = name;
  a.intrinsics = k;
  a.ground = plane;
  a.image_width = w;
  a.image_height = h;
  for (std::size_t i = 0; i < s.boxes.size(); ++i) {
    std::size_t visible = 0;
    for (int o : owner) visible += (o == static_cast<int>(i));
    const double hidden = area[i] ? 1.0 - static_cast<double>(visible) / static_cast<double>(area[i]) : 1.0;
    const int occlusion = hidden <= 0.0 ? 0 : (hidden < 0.5 ? 1 : 2);
    LabelRecord r = ego_box_to_label(s.boxes[i], s.frame, occlusion, 0.0, 0.0, extents[i]);
    r.alpha = normalize_angle(r.rotation_y - std::atan2(r.x, r.z));
    a.labels.push_back(r);
  }
  return s;
}

/// Scene i of a dataset seeded with `seed`.
inline std::uint64_t scene_seed(std::uint64_t seed, std::size_t index) {
  return seed * 1000003ULL + static_cast<std::uint64_t>(index);
}

inline std::string scene_name(std::size_t index) {
  std::string n = std::to_string(index);
  return "scene_" + std::string(n.size() < 4 ? 4 - n.size() : 0, '0') + n;
}

/// Writes label, calib, ground plane and image files into `dir`.
inline void save_scene(const SyntheticScene& s, const std::filesystem::path& dir) {
  save_annotation(s.annotation, dir);
  io::write_file(dir / kImageFile, encode_ppm(s.image));
}

}  // namespace hf
