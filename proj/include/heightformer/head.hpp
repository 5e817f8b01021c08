#pragma once

// Center-heatmap detection head over the BEV map: forward, target encoding,
// box decoding, rotated NMS and the training loss.
//
// Regression channels per cell: (dx, dy, z, log L, log W, log H, sin yaw,
// cos yaw), where (dx, dy) is the box center's offset inside its cell in
// units of cells.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "heightformer/bev.hpp"
#include "heightformer/box.hpp"
#include "heightformer/errors.hpp"
#include "heightformer/iou.hpp"
#include "heightformer/ops.hpp"
#include "heightformer/params.hpp"
#include "heightformer/random.hpp"
#include "heightformer/tensor.hpp"

namespace hf {

inline constexpr std::size_t kRegressionChannels = 8;
enum RegressionChannel : std::size_t { kDx = 0, kDy, kZ, kLogL, kLogW, kLogH, kSinYaw, kCosYaw };

/// Heatmap bias so the initial score is 0.1 everywhere.
inline constexpr double kHeatmapPriorBias = -2.19;

struct HeadOutput {
  Tensor heatmap_logits;  // n_classes x cells_y x cells_x
  Tensor heatmap;         // sigmoid of the logits
  Tensor regression;      // 8 x cells_y x cells_x
};

/// `regression_bias` seeds the regression layer's bias (e.g. a typical box).
inline void init_head(ParameterStore& store, Rng& rng, std::size_t channels, std::size_t n_classes,
                      const std::array<double, kRegressionChannels>& regression_bias = {},
                      const std::string& prefix = "head") {
  store.add(prefix + ".trunk.kernel", init_uniform(rng, {channels, channels, 3, 3}, channels * 9, std::sqrt(6.0)));
  store.add(prefix + ".trunk.bias", Tensor::zeros({channels}));
  store.add(prefix + ".heatmap.kernel", init_uniform(rng, {n_classes, channels, 1, 1}, channels));
  store.add(prefix + ".heatmap.bias", Tensor::full({n_classes}, kHeatmapPriorBias));
  store.add(prefix + ".regression.kernel", init_uniform(rng, {kRegressionChannels, channels, 1, 1}, channels, 0.1));
  store.add(prefix + ".regression.bias",
            Tensor({kRegressionChannels}, std::vector<double>(regression_bias.begin(), regression_bias.end())));
}

/// Shared 3x3 trunk + ReLU feeding parallel 1x1 heatmap and regression convs.
inline HeadOutput head_forward(Tape& tape, const BevFeatureMap& bev, const ParameterStore& p,
                               const std::string& prefix = "head") {
  const auto& trunk = p.get(prefix + ".trunk.kernel");
  if (bev.data.dim(0) != trunk.dim(1)) {
    throw DimensionError("head: BEV has " + std::to_string(bev.data.dim(0)) + " channels, trunk expects " +
                         std::to_string(trunk.dim(1)));
  }
  Tensor x = relu(tape, add_channel_bias(tape, conv2d(tape, bev.data, trunk, 1, 1), p.get(prefix + ".trunk.bias")));
  Tensor logits = add_channel_bias(tape, conv2d(tape, x, p.get(prefix + ".heatmap.kernel"), 1, 0),
                                   p.get(prefix + ".heatmap.bias"));
  Tensor reg = add_channel_bias(tape, conv2d(tape, x, p.get(prefix + ".regression.kernel"), 1, 0),
                                p.get(prefix + ".regression.bias"));
  return {logits, sigmoid(tape, logits), reg};
}

struct DetectionTargets {
  Tensor heatmap;     // n_classes x cells_y x cells_x, peaks exactly 1
  Tensor regression;  // 8 x cells_y x cells_x
  Tensor mask;        // cells_y x cells_x, 1 at supervised cells
  std::size_t supervised = 0;
  std::size_t skipped = 0;  // boxes whose center is outside the grid
};

/// Splat radius in cells, at least 1, growing with the footprint's long side.
inline std::size_t splat_radius(const Box3D& b, double resolution) {
  const double r = std::floor(std::max(b.length, b.width) / (4.0 * resolution));
  return std::max<std::size_t>(1, static_cast<std::size_t>(r));
}

inline DetectionTargets encode_targets(const std::vector<LabeledBox>& gt, const BevGridSpec& spec,
                                       std::size_t n_classes = kNumCategories) {
  spec.validate();
  const std::size_t ny = spec.cells_y(), nx = spec.cells_x(), ncell = ny * nx;
  std::vector<double> heat(n_classes * ncell, 0.0), reg(kRegressionChannels * ncell, 0.0), mask(ncell, 0.0);
  DetectionTargets t;
  for (const auto& g : gt) {
    const auto cell = spec.cell_of(g.box.cx, g.box.cy);
    const auto cls = static_cast<std::size_t>(g.category);
    if (!cell || cls >= n_classes) {
      ++t.skipped;
      continue;
    }
    const std::size_t ix = *cell % nx, iy = *cell / nx;
    const auto r = static_cast<std::ptrdiff_t>(splat_radius(g.box, spec.resolution));
    const double sigma = static_cast<double>(2 * r + 1) / 6.0;
    for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
      for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
        const auto x = static_cast<std::ptrdiff_t>(ix) + dx, y = static_cast<std::ptrdiff_t>(iy) + dy;
        if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(nx) || y >= static_cast<std::ptrdiff_t>(ny)) continue;
        const double v = (dx == 0 && dy == 0) ? 1.0 : std::exp(-static_cast<double>(dx * dx + dy * dy) / (2 * sigma * sigma));
        double& dst = heat[cls * ncell + static_cast<std::size_t>(y) * nx + static_cast<std::size_t>(x)];
        dst = std::max(dst, v);
      }
    }
    const std::array<double, kRegressionChannels> target = {
        (g.box.cx - spec.x_min) / spec.resolution - static_cast<double>(ix),
        (g.box.cy - spec.y_min) / spec.resolution - static_cast<double>(iy),
        g.box.cz,
        std::log(g.box.length),
        std::log(g.box.width),
        std::log(g.box.height),
        std::sin(g.box.yaw),
        std::cos(g.box.yaw)};
    for (std::size_t ch = 0; ch < kRegressionChannels; ++ch) reg[ch * ncell + *cell] = target[ch];
    mask[*cell] = 1.0;
  }
  t.supervised = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1.0));
  t.heatmap = Tensor({n_classes, ny, nx}, std::move(heat));
  t.regression = Tensor({kRegressionChannels, ny, nx}, std::move(reg));
  t.mask = Tensor({ny, nx}, std::move(mask));
  return t;
}

/// Box stored at one cell of a regression map.
inline Box3D box_at_cell(const Tensor& regression, const BevGridSpec& spec, std::size_t iy, std::size_t ix) {
  const std::size_t nx = spec.cells_x(), ncell = spec.cell_count(), k = iy * nx + ix;
  auto r = [&](std::size_t ch) { return regression[ch * ncell + k]; };
  Box3D b;
  b.cx = spec.x_min + (static_cast<double>(ix) + r(kDx)) * spec.resolution;
  b.cy = spec.y_min + (static_cast<double>(iy) + r(kDy)) * spec.resolution;
  b.cz = r(kZ);
  b.length = std::exp(r(kLogL));
  b.width = std::exp(r(kLogW));
  b.height = std::exp(r(kLogH));
  b.yaw = normalize_angle(std::atan2(r(kSinYaw), r(kCosYaw)));
  return b;
}

/// Local maxima (3x3) of each class heatmap with score >= score_thr, best
/// `max_dets` by score.
inline std::vector<Detection> decode_boxes(const HeadOutput& out, const BevGridSpec& spec, std::size_t max_dets,
                                           double score_thr) {
  const std::size_t ny = spec.cells_y(), nx = spec.cells_x(), ncell = ny * nx;
  const Tensor& heat = out.heatmap;
  if (heat.rank() != 3 || heat.dim(1) != ny || heat.dim(2) != nx) {
    throw DimensionError("decode_boxes: heatmap " + shape_str(heat.shape()) + " does not match the BEV grid");
  }
  std::vector<Detection> dets;
  for (std::size_t cls = 0; cls < heat.dim(0); ++cls) {
    for (std::size_t iy = 0; iy < ny; ++iy) {
      for (std::size_t ix = 0; ix < nx; ++ix) {
        const double s = heat[cls * ncell + iy * nx + ix];
        if (s < score_thr) continue;
        bool peak = true;
        for (int dy = -1; dy <= 1 && peak; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const auto y = static_cast<std::ptrdiff_t>(iy) + dy, x = static_cast<std::ptrdiff_t>(ix) + dx;
            if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(nx) || y >= static_cast<std::ptrdiff_t>(ny)) continue;
            if (heat[cls * ncell + static_cast<std::size_t>(y) * nx + static_cast<std::size_t>(x)] > s) {
              peak = false;
              break;
            }
          }
        }
        if (!peak) continue;
        dets.push_back({box_at_cell(out.regression, spec, iy, ix), static_cast<Category>(cls), s});
      }
    }
  }
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (dets.size() > max_dets) dets.resize(max_dets);
  return dets;
}

/// Greedy per-class suppression by footprint IoU; output sorted by score.
inline std::vector<Detection> rotated_nms(std::vector<Detection> dets, double iou_thr) {
  if (!(iou_thr > 0.0 && iou_thr < 1.0)) throw ContractError("rotated_nms: iou_thr must lie in (0, 1)");
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.category == d.category && bev_iou(k.box, d.box) >= iou_thr) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// -------------------------------------------------------------------- loss

struct LossWeights {
  double heatmap = 1.0;
  double regression = 0.25;
};

inline constexpr double kFocalAlpha = 2.0;
inline constexpr double kFocalBeta = 4.0;

namespace detail {

inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace detail

/// Penalty-reduced focal loss on heatmap logits, normalized by the number of
/// positive cells (target == 1, at least 1).
inline Tensor focal_loss(Tape& tape, const Tensor& logits, const Tensor& target) {
  detail::require_same_shape("focal_loss", logits, target);
  double npos = 0.0;
  for (double y : target.values()) npos += (y == 1.0);
  const double norm = 1.0 / std::max(1.0, npos);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i], y = target[i], p = sigmoid_value(z);
    const double log_p = -detail::softplus(-z), log_1mp = -detail::softplus(z);
    if (y == 1.0) {
      total -= std::pow(1.0 - p, kFocalAlpha) * log_p;
    } else {
      total -= std::pow(1.0 - y, kFocalBeta) * std::pow(p, kFocalAlpha) * log_1mp;
    }
  }
  Tensor out = Tensor::scalar(total * norm, logits.requires_grad());
  if (logits.requires_grad()) {
    tape.record("focal_loss", {logits}, out, [logits, target, out, norm] {
      const double g = out.grad()[0] * norm;
      auto gl = logits.grad_buffer();
      for (std::size_t i = 0; i < logits.size(); ++i) {
        const double z = logits[i], y = target[i], p = sigmoid_value(z);
        const double log_p = -detail::softplus(-z), log_1mp = -detail::softplus(z);
        double d;
        if (y == 1.0) {
          d = kFocalAlpha * p * std::pow(1.0 - p, kFocalAlpha) * log_p - std::pow(1.0 - p, kFocalAlpha + 1.0);
        } else {
          d = -std::pow(1.0 - y, kFocalBeta) *
              (kFocalAlpha * std::pow(p, kFocalAlpha) * (1.0 - p) * log_1mp - std::pow(p, kFocalAlpha + 1.0));
        }
        gl[i] += g * d;
      }
    });
  }
  return out;
}

/// L1 over masked cells and all regression channels, divided by the number
/// of masked cells (at least 1).
inline Tensor masked_l1(Tape& tape, const Tensor& pred, const Tensor& target, const Tensor& mask) {
  detail::require_same_shape("masked_l1", pred, target);
  const std::size_t ncell = mask.size(), nch = pred.size() / ncell;
  if (nch * ncell != pred.size()) throw DimensionError("masked_l1: mask does not tile the prediction");
  double count = 0.0;
  for (double m : mask.values()) count += m;
  const double norm = 1.0 / std::max(1.0, count);
  double total = 0.0;
  for (std::size_t ch = 0; ch < nch; ++ch) {
    for (std::size_t k = 0; k < ncell; ++k) {
      if (mask[k] != 0.0) total += mask[k] * std::abs(pred[ch * ncell + k] - target[ch * ncell + k]);
    }
  }
  Tensor out = Tensor::scalar(total * norm, pred.requires_grad());
  if (pred.requires_grad()) {
    tape.record("masked_l1", {pred}, out, [pred, target, mask, out, norm, nch, ncell] {
      const double g = out.grad()[0] * norm;
      auto gp = pred.grad_buffer();
      for (std::size_t ch = 0; ch < nch; ++ch) {
        for (std::size_t k = 0; k < ncell; ++k) {
          if (mask[k] == 0.0) continue;
          const double diff = pred[ch * ncell + k] - target[ch * ncell + k];
          gp[ch * ncell + k] += g * mask[k] * static_cast<double>((diff > 0.0) - (diff < 0.0));
        }
      }
    });
  }
  return out;
}

/// heatmap_weight * focal + regression_weight * L1 (regression term omitted
/// when no cell is supervised).
inline Tensor detection_loss(Tape& tape, const HeadOutput& out, const DetectionTargets& targets,
                             const LossWeights& weights = {}) {
  Tensor loss = scale(tape, focal_loss(tape, out.heatmap_logits, targets.heatmap), weights.heatmap);
  if (targets.supervised == 0) return loss;
  Tensor l1 = masked_l1(tape, out.regression, targets.regression, targets.mask);
  return add(tape, loss, scale(tape, l1, weights.regression));
}

}  // namespace hf
