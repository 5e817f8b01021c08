#pragma once

// 8-bit RGB images, binary PPM (P6) encoding, and top-down renderings of BEV
// features and boxes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "heightformer/bev.hpp"
#include "heightformer/box.hpp"
#include "heightformer/errors.hpp"
#include "heightformer/iou.hpp"
#include "heightformer/metrics.hpp"
#include "heightformer/tensor.hpp"

namespace hf {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

inline constexpr Rgb kGtColor{0, 0, 255};
inline constexpr Rgb kTruePositiveColor{0, 255, 0};
inline constexpr Rgb kFalsePositiveColor{255, 0, 0};

/// Row-major interleaved RGB.
struct Image8 {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  Image8() = default;
  Image8(std::size_t w, std::size_t h, Rgb fill = {}) : width(w), height(h), rgb(w * h * 3) {
    for (std::size_t i = 0; i < w * h; ++i) set(i % w, i / w, fill);
  }

  Rgb at(std::size_t x, std::size_t y) const {
    const std::size_t i = (y * width + x) * 3;
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
  }
  void set(std::size_t x, std::size_t y, Rgb c) {
    const std::size_t i = (y * width + x) * 3;
    rgb[i] = c.r;
    rgb[i + 1] = c.g;
    rgb[i + 2] = c.b;
  }
  bool contains(Rgb c) const {
    for (std::size_t i = 0; i < width * height; ++i) {
      if (at(i % width, i / width) == c) return true;
    }
    return false;
  }
  bool operator==(const Image8&) const = default;
};

inline std::string encode_ppm(const Image8& img) {
  std::string out = "P6\n" + std::to_string(img.width) + ' ' + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
  return out;
}

/// Reads the layout written by encode_ppm (P6, maxval 255).
inline Image8 decode_ppm(std::string_view bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return std::string(bytes.substr(start, pos - start));
  };
  if (token() != "P6") throw ParseError("not a binary PPM", 1);
  std::size_t w = 0, h = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    if (token() != "255") throw ParseError("PPM maxval must be 255", 3);
  } catch (const std::logic_error&) {
    throw ParseError("bad PPM header", 2);
  }
  ++pos;  // single whitespace before the raster
  if (bytes.size() < pos + w * h * 3) throw ParseError("truncated PPM raster", 0);
  Image8 img(w, h);
  std::copy_n(bytes.data() + pos, w * h * 3, reinterpret_cast<char*>(img.rgb.data()));
  return img;
}

/// 3 x H x W tensor in [0, 1].
inline Tensor image_to_tensor(const Image8& img) {
  const std::size_t n = img.width * img.height;
  std::vector<double> v(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) v[c * n + i] = img.rgb[i * 3 + c] / 255.0;
  }
  return Tensor({3, img.height, img.width}, std::move(v));
}

/// Max over channels per cell, scaled so the largest positive value is 255.
/// Pixel (x, y) is cell (ix, iy).
inline Image8 render_feature_map(const BevFeatureMap& f) {
  const std::size_t c = f.data.dim(0), ny = f.data.dim(1), nx = f.data.dim(2), n = ny * nx;
  std::vector<double> mx(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t ch = 0; ch < c; ++ch) mx[k] = std::max(mx[k], f.data[ch * n + k]);
  }
  const double top = *std::max_element(mx.begin(), mx.end());
  Image8 img(nx, ny);
  if (!(top > 0.0)) return img;
  for (std::size_t k = 0; k < n; ++k) {
    const auto g = static_cast<std::uint8_t>(std::lround(255.0 * mx[k] / top));
    img.set(k % nx, k / nx, {g, g, g});
  }
  return img;
}

namespace detail {

inline void draw_line(Image8& img, double x0, double y0, double x1, double y1, Rgb c) {
  const double len = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
  const int steps = std::max(1, static_cast<int>(std::ceil(len * 2.0)));
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    const double x = std::floor(x0 + t * (x1 - x0)), y = std::floor(y0 + t * (y1 - y0));
    if (x < 0.0 || y < 0.0 || x >= static_cast<double>(img.width) || y >= static_cast<double>(img.height)) continue;
    img.set(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c);
  }
}

inline void draw_box(Image8& img, const BevGridSpec& spec, double ppc, const Box3D& b, Rgb c) {
  const Footprint fp = bev_footprint(b);
  auto px = [&](const Point2& p) { return (p.x - spec.x_min) / spec.resolution * ppc; };
  auto py = [&](const Point2& p) { return (p.y - spec.y_min) / spec.resolution * ppc; };
  for (std::size_t i = 0; i < 4; ++i) {
    const Point2& a = fp[i];
    const Point2& e = fp[(i + 1) % 4];
    draw_line(img, px(a), py(a), px(e), py(e), c);
  }
}

}  // namespace detail

/// Box outlines over the grid at `pixels_per_cell`: gt blue, detections
/// green when matched to a gt of their class at iou_thr, red otherwise.
/// An optional feature map is drawn underneath.
inline Image8 render_detections(const BevGridSpec& spec, const std::vector<LabeledBox>& gts,
                                const std::vector<Detection>& dets, double iou_thr, std::size_t pixels_per_cell = 4,
                                const BevFeatureMap* background = nullptr) {
  const std::size_t ppc = std::max<std::size_t>(1, pixels_per_cell);
  Image8 img(spec.cells_x() * ppc, spec.cells_y() * ppc);
  if (background) {
    const Image8 bg = render_feature_map(*background);
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) img.set(x, y, bg.at(x / ppc, y / ppc));
    }
  }
  const double scale = static_cast<double>(ppc);
  for (const auto& g : gts) detail::draw_box(img, spec, scale, g.box, kGtColor);
  for (std::size_t k = 0; k < kNumCategories; ++k) {
    const auto cls = static_cast<Category>(k);
    std::vector<Detection> d;
    std::vector<Box3D> g;
    for (const auto& x : dets) {
      if (x.category == cls) d.push_back(x);
    }
    for (const auto& x : gts) {
      if (x.category == cls) g.push_back(x.box);
    }
    const MatchSet m = match_detections(d, g, iou_thr);
    for (std::size_t i : m.unmatched_preds) detail::draw_box(img, spec, scale, d[i].box, kFalsePositiveColor);
    for (const auto& p : m.pairs) detail::draw_box(img, spec, scale, d[p.pred].box, kTruePositiveColor);
  }
  return img;
}

}  // namespace hf
