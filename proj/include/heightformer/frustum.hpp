#pragma once

// Lift: spread each fused feature over the height bins by its height
// distribution and place every (pixel, bin) sample at its ego location.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "heightformer/errors.hpp"
#include "heightformer/geometry.hpp"
#include "heightformer/height_dmsc.hpp"
#include "heightformer/ops.hpp"
#include "heightformer/tensor.hpp"

namespace hf {

/// Ego location of every (pixel, bin) sample, pixel-major then bin.
struct FrustumGrid {
  std::size_t height = 0, width = 0, n_bins = 0;
  std::vector<Vec3> points;
  std::vector<std::uint8_t> valid;

  std::size_t index(std::size_t row, std::size_t col, std::size_t bin) const {
    return (row * width + col) * n_bins + bin;
  }
  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto v : valid) n += v;
    return n;
  }
};

struct FeaturePointCloud {
  std::vector<Vec3> xyz;
  Tensor features;  // N x C; undefined when N == 0

  std::size_t size() const { return xyz.size(); }
};

/// feature(p, b) = softmax_b(logits)(p) * fused(p). Result is (H*W*B) x C,
/// pixel-major then bin.
inline Tensor outer_product_lift(Tape& tape, const FeatureMap& fused, const HeightPrediction& h) {
  const std::size_t c = fused.channels(), hh = fused.height(), ww = fused.width();
  if (h.logits.rank() != 3 || h.logits.dim(1) != hh || h.logits.dim(2) != ww) {
    throw DimensionError("outer_product_lift: height prediction " + shape_str(h.logits.shape()) +
                         " not aligned with features " + shape_str(fused.data.shape()));
  }
  const std::size_t nb = h.logits.dim(0), npix = hh * ww;
  Tensor prob = h.probabilities(tape);

  std::vector<double> out(npix * nb * c);
  for (std::size_t p = 0; p < npix; ++p) {
    for (std::size_t b = 0; b < nb; ++b) {
      const double w = prob[b * npix + p];
      double* row = out.data() + (p * nb + b) * c;
      for (std::size_t ch = 0; ch < c; ++ch) row[ch] = w * fused.data[ch * npix + p];
    }
  }
  const Tensor& f = fused.data;
  const bool rg = f.requires_grad() || prob.requires_grad();
  Tensor result({npix * nb, c}, std::move(out), rg);
  if (rg) {
    tape.record("outer_product_lift", {f, prob}, result, [f, prob, result, c, nb, npix] {
      auto g = result.grad();
      auto gf = f.requires_grad() ? f.grad_buffer() : std::span<double>{};
      auto gp = prob.requires_grad() ? prob.grad_buffer() : std::span<double>{};
      for (std::size_t p = 0; p < npix; ++p) {
        for (std::size_t b = 0; b < nb; ++b) {
          const double* gr = g.data() + (p * nb + b) * c;
          const double w = prob[b * npix + p];
          double acc = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch) {
            if (!gf.empty()) gf[ch * npix + p] += gr[ch] * w;
            acc += gr[ch] * f[ch * npix + p];
          }
          if (!gp.empty()) gp[b * npix + p] += acc;
        }
      }
    });
  }
  return result;
}

/// Lifts the center of every feature pixel, ((col + 0.5) * stride,
/// (row + 0.5) * stride) in image pixels, at every bin center. Samples above
/// the horizon or with a bin at/above the camera are masked invalid.
inline FrustumGrid frustum_to_ego(const HeightBinSpec& bins, const VirtualCameraFrame& frame,
                                  std::size_t feature_stride, std::size_t feat_h, std::size_t feat_w) {
  bins.validate();
  FrustumGrid grid;
  grid.height = feat_h;
  grid.width = feat_w;
  grid.n_bins = bins.n_bins;
  grid.points.assign(feat_h * feat_w * bins.n_bins, Vec3::Zero());
  grid.valid.assign(grid.points.size(), 0);
  const double stride = static_cast<double>(feature_stride);
  for (std::size_t r = 0; r < feat_h; ++r) {
    for (std::size_t c = 0; c < feat_w; ++c) {
      const PixelHeightSample pix{(static_cast<double>(c) + 0.5) * stride, (static_cast<double>(r) + 0.5) * stride, 0.0};
      const Vec3 ref = cam_to_virtual(pixel_to_cam_ref(pix, frame.intrinsics).point, frame);
      if (!(ref.y() > kHorizonEps)) continue;
      for (std::size_t b = 0; b < bins.n_bins; ++b) {
        const double h = bin_center(bins, b);
        if (h >= frame.camera_height) continue;
        const auto i = grid.index(r, c, b);
        grid.points[i] = virtual_to_ego(ground_intersect(ref, h, frame), frame);
        grid.valid[i] = 1;
      }
    }
  }
  if (grid.valid_count() == 0) throw DegenerateCameraError("no frustum sample reaches the ground below the camera");
  return grid;
}

/// Valid (xyz, feature) pairs in pixel-major, bin-minor order.
inline FeaturePointCloud build_point_cloud(Tape& tape, const Tensor& lifted, const FrustumGrid& grid) {
  if (lifted.rank() != 2 || lifted.dim(0) != grid.points.size()) {
    throw DimensionError("build_point_cloud: lifted features " + shape_str(lifted.shape()) + " vs " +
                         std::to_string(grid.points.size()) + " frustum samples");
  }
  FeaturePointCloud cloud;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < grid.points.size(); ++i) {
    if (!grid.valid[i]) continue;
    rows.push_back(i);
    cloud.xyz.push_back(grid.points[i]);
  }
  if (!rows.empty()) cloud.features = gather_rows(tape, lifted, rows);
  return cloud;
}

}  // namespace hf
