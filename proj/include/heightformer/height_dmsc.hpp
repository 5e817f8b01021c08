#pragma once

// Image backbone, height network, camera-parameter modulation, and the
// deformable multi-scale spatial cross-attention (DMSC) that fuses height
// features into context features.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "heightformer/errors.hpp"
#include "heightformer/geometry.hpp"
#include "heightformer/ops.hpp"
#include "heightformer/params.hpp"
#include "heightformer/random.hpp"
#include "heightformer/tensor.hpp"

namespace hf {

struct FeatureMap {
  Tensor data;  // C x H x W
  std::size_t stride = 1;

  std::size_t channels() const { return data.dim(0); }
  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
};

struct HeightBinSpec {
  std::size_t n_bins = 32;
  double h_min = -0.5;
  double h_max = 6.0;

  void validate() const {
    if (n_bins < 2) throw ConfigError("height bins: need at least 2 bins");
    if (!(h_min < h_max)) throw ConfigError("height bins: h_min must be below h_max");
  }
};

inline double bin_center(const HeightBinSpec& spec, std::size_t i) {
  if (i >= spec.n_bins) {
    throw ContractError("bin index " + std::to_string(i) + " out of range for " +
                        std::to_string(spec.n_bins) + " bins");
  }
  return spec.h_min + (static_cast<double>(i) + 0.5) * (spec.h_max - spec.h_min) / static_cast<double>(spec.n_bins);
}

struct HeightPrediction {
  Tensor logits;  // n_bins x H x W
  HeightBinSpec spec;

  /// Per-pixel categorical distribution over bins.
  Tensor probabilities(Tape& tape) const { return softmax(tape, logits, 0); }
};

struct DmscConfig {
  std::size_t n_heads = 4;
  std::size_t n_levels = 2;
  std::size_t n_points = 4;
  std::size_t d_model = 32;

  std::size_t slots() const { return n_levels * n_points; }

  void validate() const {
    if (n_heads == 0 || d_model % n_heads != 0) throw ConfigError("dmsc: d_model must be divisible by n_heads");
    if (n_levels < 1) throw ConfigError("dmsc: n_levels must be >= 1");
    if (n_points < 1) throw ConfigError("dmsc: n_points must be >= 1");
  }
};

// ---------------------------------------------------------------- backbone

inline void init_backbone(ParameterStore& store, Rng& rng, std::size_t d_model,
                          const std::string& prefix = "backbone") {
  const std::size_t mid = std::max<std::size_t>(d_model / 2, 1);
  store.add(prefix + ".conv1.kernel", init_uniform(rng, {mid, 3, 3, 3}, 27, std::sqrt(6.0)));
  store.add(prefix + ".conv1.bias", Tensor::zeros({mid}));
  store.add(prefix + ".conv2.kernel", init_uniform(rng, {d_model, mid, 3, 3}, mid * 9, std::sqrt(6.0)));
  store.add(prefix + ".conv2.bias", Tensor::zeros({d_model}));
}

/// Two stride-2 conv + ReLU stages: 3 x Hi x Wi image to d_model x Hi/4 x Wi/4.
inline FeatureMap backbone_forward(Tape& tape, const Tensor& image, const ParameterStore& p,
                                   const std::string& prefix = "backbone") {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("backbone: image must be 3 x H x W, got " + shape_str(image.shape()));
  }
  if (image.dim(1) % 4 || image.dim(2) % 4) {
    throw DimensionError("backbone: image dims " + shape_str(image.shape()) + " not divisible by 4");
  }
  Tensor x = conv2d(tape, image, p.get(prefix + ".conv1.kernel"), 2, 1);
  x = relu(tape, add_channel_bias(tape, x, p.get(prefix + ".conv1.bias")));
  x = conv2d(tape, x, p.get(prefix + ".conv2.kernel"), 2, 1);
  x = relu(tape, add_channel_bias(tape, x, p.get(prefix + ".conv2.bias")));
  return {x, 4};
}

// --------------------------------------------------------------- height net

inline void init_height_net(ParameterStore& store, Rng& rng, std::size_t d_model, std::size_t n_bins,
                            const std::string& prefix = "height_net") {
  store.add(prefix + ".conv1.kernel", init_uniform(rng, {d_model, d_model, 3, 3}, d_model * 9, std::sqrt(6.0)));
  store.add(prefix + ".conv1.bias", Tensor::zeros({d_model}));
  store.add(prefix + ".head.kernel", init_uniform(rng, {n_bins, d_model, 1, 1}, d_model));
  store.add(prefix + ".head.bias", Tensor::zeros({n_bins}));
}

/// 3x3 conv body then a 1x1 head to per-pixel height-bin logits at feature
/// resolution.
inline HeightPrediction height_net_forward(Tape& tape, const FeatureMap& f, const HeightBinSpec& spec,
                                           const ParameterStore& p, const std::string& prefix = "height_net") {
  spec.validate();
  const auto& body = p.get(prefix + ".conv1.kernel");
  if (f.channels() != body.dim(1)) {
    throw DimensionError("height net expects " + std::to_string(body.dim(1)) + " channels, got " +
                         std::to_string(f.channels()));
  }
  const auto& head = p.get(prefix + ".head.kernel");
  if (head.dim(0) != spec.n_bins) throw DimensionError("height net head does not match the bin count");
  Tensor x = relu(tape, add_channel_bias(tape, conv2d(tape, f.data, body, 1, 1), p.get(prefix + ".conv1.bias")));
  Tensor logits = add_channel_bias(tape, conv2d(tape, x, head, 1, 0), p.get(prefix + ".head.bias"));
  return {logits, spec};
}

// ------------------------------------------------------- camera modulation

inline constexpr std::size_t kCameraMlpHidden = 16;

inline void init_camera_modulation(ParameterStore& store, Rng& rng, std::size_t d_model,
                                   const std::string& prefix = "cam_mod") {
  store.add(prefix + ".fc1.weight", init_uniform(rng, {4, kCameraMlpHidden}, 4, std::sqrt(6.0)));
  store.add(prefix + ".fc1.bias", Tensor::zeros({kCameraMlpHidden}));
  store.add(prefix + ".fc2.weight", Tensor::zeros({kCameraMlpHidden, d_model}));
  store.add(prefix + ".fc2.bias", Tensor::zeros({d_model}));
}

/// (fx, fy, cx, cy) normalized by image width/height.
inline Tensor normalized_intrinsics(const CameraIntrinsics& k, std::size_t image_w, std::size_t image_h) {
  const double w = static_cast<double>(image_w), h = static_cast<double>(image_h);
  return Tensor({1, 4}, {k.fx / w, k.fy / h, k.cx / w, k.cy / h});
}

/// Per-channel scale in (0, 2) predicted from the intrinsics.
inline Tensor camera_scale(Tape& tape, const Tensor& intrinsics_row, const ParameterStore& p,
                           const std::string& prefix = "cam_mod") {
  Tensor hidden = relu(tape, linear(tape, intrinsics_row, p.get(prefix + ".fc1.weight"), p.get(prefix + ".fc1.bias")));
  Tensor logits = linear(tape, hidden, p.get(prefix + ".fc2.weight"), p.get(prefix + ".fc2.bias"));
  return scale(tape, sigmoid(tape, logits), 2.0);
}

inline FeatureMap camera_modulation(Tape& tape, const FeatureMap& f, const CameraIntrinsics& k,
                                    std::size_t image_w, std::size_t image_h, const ParameterStore& p,
                                    const std::string& prefix = "cam_mod") {
  Tensor s = camera_scale(tape, normalized_intrinsics(k, image_w, image_h), p, prefix);
  if (s.size() != f.channels()) throw DimensionError("camera modulation width does not match feature channels");
  return {scale_channels(tape, f.data, s), f.stride};
}

// ------------------------------------------------------------------- DMSC

/// Level 0 is a 1x1 projection of the height logits to d_model channels; each
/// further level 2x2-average-pools the previous one.
inline std::vector<FeatureMap> build_value_pyramid(Tape& tape, const HeightPrediction& h, std::size_t n_levels,
                                                   const ParameterStore& p, const std::string& prefix = "dmsc") {
  if (n_levels < 1) throw ConfigError("value pyramid needs at least one level");
  const std::size_t div = std::size_t{1} << (n_levels - 1);
  if (h.logits.dim(1) % div || h.logits.dim(2) % div) {
    throw DimensionError("value pyramid: dims " + shape_str(h.logits.shape()) + " not divisible by " +
                         std::to_string(div));
  }
  std::vector<FeatureMap> levels;
  Tensor v = conv2d(tape, h.logits, p.get(prefix + ".value_proj.kernel"), 1, 0);
  levels.push_back({add_channel_bias(tape, v, p.get(prefix + ".value_proj.bias")), 1});
  for (std::size_t l = 1; l < n_levels; ++l) {
    levels.push_back({avg_pool2(tape, levels.back().data), levels.back().stride * 2});
  }
  return levels;
}

/// Multi-scale deformable gather.
///
/// values[l]    : d_model x H_l x W_l
/// reference    : N x 2 normalized (x, y) in [0, 1], constant
/// offsets      : N x (heads*levels*points*2), in level-pixel units
/// weights      : N x (heads*levels*points), already normalized per head
/// result       : N x d_model, head h filling channels [h*dh, (h+1)*dh)
///
/// Sample position on level l: loc = ref + offset / (W_l, H_l), read at
/// pixel (loc_x * W_l - 0.5, loc_y * H_l - 0.5) with border-zero bilinear
/// interpolation.
inline Tensor deformable_gather(Tape& tape, const std::vector<Tensor>& values, const Tensor& reference,
                                const Tensor& offsets, const Tensor& weights, const DmscConfig& cfg) {
  cfg.validate();
  if (values.size() != cfg.n_levels) throw DimensionError("deformable_gather: level count mismatch");
  const std::size_t n = reference.dim(0), d = cfg.d_model, dh = d / cfg.n_heads;
  const std::size_t slots = cfg.slots();
  if (offsets.rank() != 2 || offsets.dim(0) != n || offsets.dim(1) != cfg.n_heads * slots * 2) {
    throw DimensionError("deformable_gather: offsets " + shape_str(offsets.shape()));
  }
  if (weights.rank() != 2 || weights.dim(0) != n || weights.dim(1) != cfg.n_heads * slots) {
    throw DimensionError("deformable_gather: weights " + shape_str(weights.shape()));
  }
  for (const auto& v : values) {
    if (v.rank() != 3 || v.dim(0) != d) throw DimensionError("deformable_gather: value level " + shape_str(v.shape()));
  }

  auto locate = [values, reference, offsets, cfg, slots](std::size_t q, std::size_t head, std::size_t l, std::size_t pt) {
    const std::size_t hl = values[l].dim(1), wl = values[l].dim(2);
    const std::size_t s = (head * cfg.n_levels + l) * cfg.n_points + pt;
    const double lx = reference[2 * q] + offsets[q * slots * cfg.n_heads * 2 + 2 * s] / static_cast<double>(wl);
    const double ly = reference[2 * q + 1] + offsets[q * slots * cfg.n_heads * 2 + 2 * s + 1] / static_cast<double>(hl);
    return detail::bilinear_tap(lx * static_cast<double>(wl) - 0.5, ly * static_cast<double>(hl) - 0.5, hl, wl);
  };

  std::vector<double> out(n * d, 0.0);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
      for (std::size_t l = 0; l < cfg.n_levels; ++l) {
        const std::size_t hl = values[l].dim(1), wl = values[l].dim(2);
        const auto val = values[l].values();
        for (std::size_t pt = 0; pt < cfg.n_points; ++pt) {
          const auto t = locate(q, head, l, pt);
          if (!t.valid) continue;
          const double w = weights[q * cfg.n_heads * slots + head * slots + l * cfg.n_points + pt];
          for (std::size_t c = head * dh; c < (head + 1) * dh; ++c) {
            const double* m = val.data() + c * hl * wl;
            const double s = (1 - t.fx) * (1 - t.fy) * m[t.y0 * wl + t.x0] + t.fx * (1 - t.fy) * m[t.y0 * wl + t.x1] +
                             (1 - t.fx) * t.fy * m[t.y1 * wl + t.x0] + t.fx * t.fy * m[t.y1 * wl + t.x1];
            out[q * d + c] += w * s;
          }
        }
      }
    }
  }

  bool rg = offsets.requires_grad() || weights.requires_grad();
  for (const auto& v : values) rg = rg || v.requires_grad();
  Tensor result({n, d}, std::move(out), rg);
  if (rg) {
    std::vector<Tensor> inputs = values;
    inputs.push_back(offsets);
    inputs.push_back(weights);
    tape.record("deformable_gather", inputs, result,
                [values, reference, offsets, weights, result, cfg, n, d, dh, slots, locate] {
                  auto g = result.grad();
                  auto goff = offsets.requires_grad() ? offsets.grad_buffer() : std::span<double>{};
                  auto gw = weights.requires_grad() ? weights.grad_buffer() : std::span<double>{};
                  std::vector<std::span<double>> gv;
                  for (const auto& v : values) gv.push_back(v.requires_grad() ? v.grad_buffer() : std::span<double>{});
                  for (std::size_t q = 0; q < n; ++q) {
                    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
                      for (std::size_t l = 0; l < cfg.n_levels; ++l) {
                        const std::size_t hl = values[l].dim(1), wl = values[l].dim(2);
                        const auto val = values[l].values();
                        for (std::size_t pt = 0; pt < cfg.n_points; ++pt) {
                          const auto t = locate(q, head, l, pt);
                          if (!t.valid) continue;
                          const std::size_t s = (head * cfg.n_levels + l) * cfg.n_points + pt;
                          const std::size_t wi = q * cfg.n_heads * slots + head * slots + l * cfg.n_points + pt;
                          const double w = weights[wi];
                          double dw = 0.0, du = 0.0, dv = 0.0;
                          for (std::size_t c = head * dh; c < (head + 1) * dh; ++c) {
                            const double go = g[q * d + c];
                            if (go == 0.0) continue;
                            const std::size_t off = c * hl * wl;
                            const double v00 = val[off + t.y0 * wl + t.x0], v01 = val[off + t.y0 * wl + t.x1];
                            const double v10 = val[off + t.y1 * wl + t.x0], v11 = val[off + t.y1 * wl + t.x1];
                            const double smpv = (1 - t.fx) * (1 - t.fy) * v00 + t.fx * (1 - t.fy) * v01 +
                                                (1 - t.fx) * t.fy * v10 + t.fx * t.fy * v11;
                            dw += go * smpv;
                            du += go * w * ((1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                            dv += go * w * ((1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                            if (!gv[l].empty()) {
                              const double gwc = go * w;
                              gv[l][off + t.y0 * wl + t.x0] += gwc * (1 - t.fx) * (1 - t.fy);
                              gv[l][off + t.y0 * wl + t.x1] += gwc * t.fx * (1 - t.fy);
                              gv[l][off + t.y1 * wl + t.x0] += gwc * (1 - t.fx) * t.fy;
                              gv[l][off + t.y1 * wl + t.x1] += gwc * t.fx * t.fy;
                            }
                          }
                          if (!gw.empty()) gw[wi] += dw;
                          if (!goff.empty()) {
                            // pixel = (ref + off / W_l) * W_l - 0.5, so d(pixel)/d(off) = 1
                            goff[q * slots * cfg.n_heads * 2 + 2 * s] += du;
                            goff[q * slots * cfg.n_heads * 2 + 2 * s + 1] += dv;
                          }
                        }
                      }
                    }
                  }
                });
  }
  return result;
}

/// Normalized pixel-center coordinates ((j + 0.5) / W, (i + 0.5) / H), row-major.
inline Tensor reference_points(std::size_t h, std::size_t w) {
  std::vector<double> r(h * w * 2);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      r[(i * w + j) * 2] = (static_cast<double>(j) + 0.5) / static_cast<double>(w);
      r[(i * w + j) * 2 + 1] = (static_cast<double>(i) + 0.5) / static_cast<double>(h);
    }
  }
  return Tensor({h * w, 2}, std::move(r));
}

/// Offset/attention weights start at zero; offset biases fan the sampling
/// points out radially per head so points do not start (and stay) coincident.
/// The output projection starts at zero, so the block is initially the
/// identity on the context.
inline void init_dmsc(ParameterStore& store, Rng& rng, const DmscConfig& cfg, std::size_t n_bins,
                      const std::string& prefix = "dmsc") {
  cfg.validate();
  const std::size_t d = cfg.d_model, slots = cfg.slots();
  store.add(prefix + ".value_proj.kernel", init_uniform(rng, {d, n_bins, 1, 1}, n_bins));
  store.add(prefix + ".value_proj.bias", Tensor::zeros({d}));
  store.add(prefix + ".offsets.weight", Tensor::zeros({d, cfg.n_heads * slots * 2}));
  std::vector<double> bias(cfg.n_heads * slots * 2);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(h) / static_cast<double>(cfg.n_heads);
    double dx = std::cos(angle), dy = std::sin(angle);
    const double norm = std::max(std::abs(dx), std::abs(dy));
    dx /= norm;
    dy /= norm;
    for (std::size_t l = 0; l < cfg.n_levels; ++l) {
      for (std::size_t pt = 0; pt < cfg.n_points; ++pt) {
        const std::size_t s = (h * cfg.n_levels + l) * cfg.n_points + pt;
        bias[2 * s] = dx * static_cast<double>(pt + 1);
        bias[2 * s + 1] = dy * static_cast<double>(pt + 1);
      }
    }
  }
  store.add(prefix + ".offsets.bias", Tensor({cfg.n_heads * slots * 2}, std::move(bias)));
  store.add(prefix + ".attn.weight", Tensor::zeros({d, cfg.n_heads * slots}));
  store.add(prefix + ".attn.bias", Tensor::zeros({cfg.n_heads * slots}));
  store.add(prefix + ".out_proj.weight", Tensor::zeros({d, d}));
  store.add(prefix + ".out_proj.bias", Tensor::zeros({d}));
  (void)rng;
}

struct DmscResult {
  FeatureMap fused;
  Tensor attention;  // N x (heads * levels * points), normalized per head
  Tensor offsets;    // N x (heads * levels * points * 2)
};

/// F_fused = context + out_proj(deformable attention of context queries over
/// the height value pyramid).
inline DmscResult dmsc_forward(Tape& tape, const FeatureMap& context, const HeightPrediction& h,
                               const DmscConfig& cfg, const ParameterStore& p, const std::string& prefix = "dmsc") {
  cfg.validate();
  if (context.channels() != cfg.d_model) {
    throw DimensionError("dmsc: context has " + std::to_string(context.channels()) + " channels, d_model is " +
                         std::to_string(cfg.d_model));
  }
  if (h.logits.dim(1) != context.height() || h.logits.dim(2) != context.width()) {
    throw DimensionError("dmsc: height prediction " + shape_str(h.logits.shape()) + " not aligned with context " +
                         shape_str(context.data.shape()));
  }
  const std::size_t hh = context.height(), ww = context.width(), n = hh * ww, d = cfg.d_model;
  const auto pyramid = build_value_pyramid(tape, h, cfg.n_levels, p, prefix);
  std::vector<Tensor> values;
  for (const auto& lvl : pyramid) values.push_back(lvl.data);

  Tensor queries = transpose(tape, reshape(tape, context.data, {d, n}));
  Tensor offsets = linear(tape, queries, p.get(prefix + ".offsets.weight"), p.get(prefix + ".offsets.bias"));
  Tensor logits = linear(tape, queries, p.get(prefix + ".attn.weight"), p.get(prefix + ".attn.bias"));
  Tensor attention =
      reshape(tape, softmax(tape, reshape(tape, logits, {n * cfg.n_heads, cfg.slots()}), 1), {n, cfg.n_heads * cfg.slots()});

  Tensor sampled = deformable_gather(tape, values, reference_points(hh, ww), offsets, attention, cfg);
  Tensor projected = linear(tape, sampled, p.get(prefix + ".out_proj.weight"), p.get(prefix + ".out_proj.bias"));
  Tensor residual = reshape(tape, transpose(tape, projected), {d, hh, ww});
  return {{add(tape, context.data, residual), context.stride}, attention, offsets};
}

}  // namespace hf
