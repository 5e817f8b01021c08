#pragma once

// Differentiable primitives. Every op takes the tape first; outputs record
// a backward rule only when some input requires grad.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "heightformer/errors.hpp"
#include "heightformer/tensor.hpp"

namespace hf {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_matrix(std::span<const double> v, std::size_t rows, std::size_t cols) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline MutMap as_matrix(std::span<double> v, std::size_t rows, std::size_t cols) {
  return MutMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

inline void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

}  // namespace detail

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n);
  detail::as_matrix(std::span<double>(c), m, n).noalias() =
      detail::as_matrix(a.values(), m, k) * detail::as_matrix(b.values(), k, n);
  const bool rg = a.requires_grad() || b.requires_grad();
  Tensor out({m, n}, std::move(c), rg);
  if (rg) {
    tape.record("matmul", {a, b}, out, [a, b, out, m, k, n] {
      auto dc = detail::as_matrix(out.grad(), m, n);
      if (a.requires_grad()) {
        detail::as_matrix(a.grad_buffer(), m, k).noalias() +=
            dc * detail::as_matrix(b.values(), k, n).transpose();
      }
      if (b.requires_grad()) {
        detail::as_matrix(b.grad_buffer(), k, n).noalias() +=
            detail::as_matrix(a.values(), m, k).transpose() * dc;
      }
    });
  }
  return out;
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> t(m * n);
  detail::as_matrix(std::span<double>(t), n, m) = detail::as_matrix(a.values(), m, n).transpose();
  Tensor out({n, m}, std::move(t), a.requires_grad());
  if (a.requires_grad()) {
    tape.record("transpose", {a}, out, [a, out, m, n] {
      detail::as_matrix(a.grad_buffer(), m, n) += detail::as_matrix(out.grad(), n, m).transpose();
    });
  }
  return out;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  const bool rg = a.requires_grad() || b.requires_grad();
  Tensor out(a.shape(), std::move(v), rg);
  if (rg) {
    tape.record("add", {a, b}, out, [a, b, out] {
      auto g = out.grad();
      for (const auto* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = t->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  const bool rg = a.requires_grad() || b.requires_grad();
  Tensor out(a.shape(), std::move(v), rg);
  if (rg) {
    tape.record("sub", {a, b}, out, [a, b, out] {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

/// Elementwise product.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  const bool rg = a.requires_grad() || b.requires_grad();
  Tensor out(a.shape(), std::move(v), rg);
  if (rg) {
    tape.record("mul", {a, b}, out, [a, b, out] {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double factor) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * factor;
  Tensor out(a.shape(), std::move(v), a.requires_grad());
  if (a.requires_grad()) {
    tape.record("scale", {a}, out, [a, out, factor] {
      auto g = out.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

/// x + bias broadcast along the last axis (bias length = last extent).
inline Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.shape().back();
  if (bias.size() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / n;
  std::vector<double> v(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) v[r * n + j] = x[r * n + j] + bias[j];
  }
  const bool rg = x.requires_grad() || bias.requires_grad();
  Tensor out(x.shape(), std::move(v), rg);
  if (rg) {
    tape.record("add_bias", {x, bias}, out, [x, bias, out, rows, n] {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
      }
    });
  }
  return out;
}

/// x[c, ...] + bias[c] (bias length = first extent).
inline Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  const std::size_t c = x.dim(0);
  if (bias.size() != c) {
    throw DimensionError("add_channel_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const std::size_t inner = x.size() / c;
  std::vector<double> v(x.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < inner; ++i) v[ch * inner + i] = x[ch * inner + i] + bias[ch];
  }
  const bool rg = x.requires_grad() || bias.requires_grad();
  Tensor out(x.shape(), std::move(v), rg);
  if (rg) {
    tape.record("add_channel_bias", {x, bias}, out, [x, bias, out, c, inner] {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch) {
          double s = 0.0;
          for (std::size_t i = 0; i < inner; ++i) s += g[ch * inner + i];
          gb[ch] += s;
        }
      }
    });
  }
  return out;
}

/// x[c, ...] * s[c].
inline Tensor scale_channels(Tape& tape, const Tensor& x, const Tensor& s) {
  const std::size_t c = x.dim(0);
  if (s.size() != c) {
    throw DimensionError("scale_channels: scale " + shape_str(s.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const std::size_t inner = x.size() / c;
  std::vector<double> v(x.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < inner; ++i) v[ch * inner + i] = x[ch * inner + i] * s[ch];
  }
  const bool rg = x.requires_grad() || s.requires_grad();
  Tensor out(x.shape(), std::move(v), rg);
  if (rg) {
    tape.record("scale_channels", {x, s}, out, [x, s, out, c, inner] {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t i = 0; i < inner; ++i) gx[ch * inner + i] += g[ch * inner + i] * s[ch];
        }
      }
      if (s.requires_grad()) {
        auto gs = s.grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (std::size_t i = 0; i < inner; ++i) acc += g[ch * inner + i] * x[ch * inner + i];
          gs[ch] += acc;
        }
      }
    });
  }
  return out;
}

inline Tensor relu(Tape& tape, const Tensor& x) {
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] > 0.0 ? x[i] : 0.0;
  Tensor out(x.shape(), std::move(v), x.requires_grad());
  if (x.requires_grad()) {
    tape.record("relu", {x}, out, [x, out] {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > 0.0) gx[i] += g[i];
      }
    });
  }
  return out;
}

inline double sigmoid_value(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Tensor sigmoid(Tape& tape, const Tensor& x) {
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = sigmoid_value(x[i]);
  Tensor out(x.shape(), std::move(v), x.requires_grad());
  if (x.requires_grad()) {
    tape.record("sigmoid", {x}, out, [x, out] {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * out[i] * (1.0 - out[i]);
    });
  }
  return out;
}

/// Sum of all elements as a scalar.
inline Tensor sum(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s, x.requires_grad());
  if (x.requires_grad()) {
    tape.record("sum", {x}, out, [x, out] {
      const double g = out.grad()[0];
      for (auto& gx : x.grad_buffer()) gx += g;
    });
  }
  return out;
}

inline Tensor mean(Tape& tape, const Tensor& x) {
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.size()));
}

/// Softmax along `axis`, stabilized by subtracting the slice maximum.
inline Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];

  std::vector<double> y(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(x[base + k * inner] - mx);
        y[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < n; ++k) y[base + k * inner] /= z;
    }
  }
  Tensor out(s, std::move(y), x.requires_grad());
  if (x.requires_grad()) {
    tape.record("softmax", {x}, out, [x, out, outer, inner, n] {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          double dot = 0.0;
          for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * out[base + k * inner];
          for (std::size_t k = 0; k < n; ++k) {
            const std::size_t i = base + k * inner;
            gx[i] += out[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row over the last axis, then applies gamma/beta.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::size_t n = x.shape().back();
  if (gamma.size() != n || beta.size() != n) {
    throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " vs last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / n;
  std::vector<double> xhat(x.size()), inv_std(rows), y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.values().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (row[j] - mu) * inv_std[r];
      y[r * n + j] = gamma[j] * xhat[r * n + j] + beta[j];
    }
  }
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  Tensor out(x.shape(), std::move(y), rg);
  if (rg) {
    tape.record("layer_norm", {x, gamma, beta}, out,
                [x, gamma, beta, out, rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
                  auto g = out.grad();
                  if (gamma.requires_grad() || beta.requires_grad()) {
                    auto gg = gamma.requires_grad() ? gamma.grad_buffer() : std::span<double>{};
                    auto gb = beta.requires_grad() ? beta.grad_buffer() : std::span<double>{};
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t j = 0; j < n; ++j) {
                        if (!gg.empty()) gg[j] += g[r * n + j] * xhat[r * n + j];
                        if (!gb.empty()) gb[j] += g[r * n + j];
                      }
                    }
                  }
                  if (!x.requires_grad()) return;
                  auto gx = x.grad_buffer();
                  const double inv_n = 1.0 / static_cast<double>(n);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                      const double dxh = g[r * n + j] * gamma[j];
                      m1 += dxh;
                      m2 += dxh * xhat[r * n + j];
                    }
                    m1 *= inv_n;
                    m2 *= inv_n;
                    for (std::size_t j = 0; j < n; ++j) {
                      const double dxh = g[r * n + j] * gamma[j];
                      gx[r * n + j] += inv_std[r] * (dxh - m1 - xhat[r * n + j] * m2);
                    }
                  }
                });
  }
  return out;
}

/// Cross-correlation of a C_in x H x W map with a C_out x C_in x kh x kw kernel.
inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, std::size_t stride,
                     std::size_t pad) {
  detail::require_rank("conv2d", x, 3);
  detail::require_rank("conv2d", kernel, 4);
  if (kernel.dim(1) != x.dim(0)) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " expects " +
                         std::to_string(kernel.dim(1)) + " input channels, input is " +
                         shape_str(x.shape()));
  }
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (h + 2 * pad < kh || w + 2 * pad < kw) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel " +
                         shape_str(kernel.shape()));
  }
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
  const std::size_t patch = cin * kh * kw, npix = ho * wo;

  // im2col: row = (ci, ky, kx), column = output pixel.
  std::vector<double> cols(patch * npix, 0.0);
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        double* dst = cols.data() + ((ci * kh + ky) * kw + kx) * npix;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            dst[oy * wo + ox] = x[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
  std::vector<double> y(cout * npix);
  detail::as_matrix(std::span<double>(y), cout, npix).noalias() =
      detail::as_matrix(kernel.values(), cout, patch) *
      detail::as_matrix(std::span<const double>(cols), patch, npix);

  const bool rg = x.requires_grad() || kernel.requires_grad();
  Tensor out({cout, ho, wo}, std::move(y), rg);
  if (rg) {
    tape.record("conv2d", {x, kernel}, out,
                [x, kernel, out, cols = std::move(cols), cin, h, w, cout, kh, kw, ho, wo, stride, pad,
                 patch, npix] {
                  auto dy = detail::as_matrix(out.grad(), cout, npix);
                  if (kernel.requires_grad()) {
                    detail::as_matrix(kernel.grad_buffer(), cout, patch).noalias() +=
                        dy * detail::as_matrix(std::span<const double>(cols), patch, npix).transpose();
                  }
                  if (!x.requires_grad()) return;
                  detail::RowMat dcols = detail::as_matrix(kernel.values(), cout, patch).transpose() * dy;
                  auto gx = x.grad_buffer();
                  for (std::size_t ci = 0; ci < cin; ++ci) {
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                      for (std::size_t kx = 0; kx < kw; ++kx) {
                        const double* src = dcols.data() + ((ci * kh + ky) * kw + kx) * npix;
                        for (std::size_t oy = 0; oy < ho; ++oy) {
                          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                          static_cast<std::ptrdiff_t>(pad);
                          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                          for (std::size_t ox = 0; ox < wo; ++ox) {
                            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                            static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            gx[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] +=
                                src[oy * wo + ox];
                          }
                        }
                      }
                    }
                  }
                });
  }
  return out;
}

namespace detail {

/// Corner weights of a bilinear tap. `valid` false outside [0,W-1]x[0,H-1].
struct BilinearTap {
  bool valid = false;
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double fx = 0.0, fy = 0.0;
};

inline BilinearTap bilinear_tap(double u, double v, std::size_t h, std::size_t w) {
  BilinearTap t;
  if (!(u >= 0.0 && v >= 0.0 && u <= static_cast<double>(w - 1) && v <= static_cast<double>(h - 1))) {
    return t;
  }
  t.valid = true;
  t.x0 = std::min(static_cast<std::size_t>(std::floor(u)), w - 1);
  t.y0 = std::min(static_cast<std::size_t>(std::floor(v)), h - 1);
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.fx = u - static_cast<double>(t.x0);
  t.fy = v - static_cast<double>(t.y0);
  return t;
}

}  // namespace detail

/// Samples a C x H x W map at continuous (u, v) = (column, row) points given
/// as an N x 2 tensor. Returns N x C; points outside the lattice hull yield 0.
inline Tensor bilinear_sample(Tape& tape, const Tensor& map, const Tensor& points) {
  detail::require_rank("bilinear_sample", map, 3);
  if (points.rank() != 2 || points.dim(1) != 2) {
    throw DimensionError("bilinear_sample: points must be N x 2, got " + shape_str(points.shape()));
  }
  const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2), n = points.dim(0);
  const auto m = map.values();
  std::vector<double> y(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto t = detail::bilinear_tap(points[2 * i], points[2 * i + 1], h, w);
    if (!t.valid) continue;
    const double w00 = (1 - t.fx) * (1 - t.fy), w01 = t.fx * (1 - t.fy);
    const double w10 = (1 - t.fx) * t.fy, w11 = t.fx * t.fy;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = m.data() + ch * h * w;
      y[i * c + ch] = w00 * p[t.y0 * w + t.x0] + w01 * p[t.y0 * w + t.x1] + w10 * p[t.y1 * w + t.x0] +
                      w11 * p[t.y1 * w + t.x1];
    }
  }
  const bool rg = map.requires_grad() || points.requires_grad();
  Tensor out({n, c}, std::move(y), rg);
  if (rg) {
    tape.record("bilinear_sample", {map, points}, out, [map, points, out, c, h, w, n] {
      auto g = out.grad();
      auto gm = map.requires_grad() ? map.grad_buffer() : std::span<double>{};
      auto gp = points.requires_grad() ? points.grad_buffer() : std::span<double>{};
      const auto mv = map.values();
      for (std::size_t i = 0; i < n; ++i) {
        const auto t = detail::bilinear_tap(points[2 * i], points[2 * i + 1], h, w);
        if (!t.valid) continue;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double go = g[i * c + ch];
          const std::size_t off = ch * h * w;
          if (!gm.empty()) {
            gm[off + t.y0 * w + t.x0] += go * (1 - t.fx) * (1 - t.fy);
            gm[off + t.y0 * w + t.x1] += go * t.fx * (1 - t.fy);
            gm[off + t.y1 * w + t.x0] += go * (1 - t.fx) * t.fy;
            gm[off + t.y1 * w + t.x1] += go * t.fx * t.fy;
          }
          if (!gp.empty()) {
            const double v00 = mv[off + t.y0 * w + t.x0], v01 = mv[off + t.y0 * w + t.x1];
            const double v10 = mv[off + t.y1 * w + t.x0], v11 = mv[off + t.y1 * w + t.x1];
            gp[2 * i] += go * ((1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
            gp[2 * i + 1] += go * ((1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
          }
        }
      }
    });
  }
  return out;
}

/// 2x2 average pooling of a C x H x W map (H, W even).
inline Tensor avg_pool2(Tape& tape, const Tensor& x) {
  detail::require_rank("avg_pool2", x, 3);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2) throw DimensionError("avg_pool2: odd spatial dims " + shape_str(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<double> y(c * ho * wo);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j) {
        const std::size_t b = (ch * h + 2 * i) * w + 2 * j;
        y[(ch * ho + i) * wo + j] = 0.25 * (x[b] + x[b + 1] + x[b + w] + x[b + w + 1]);
      }
    }
  }
  Tensor out({c, ho, wo}, std::move(y), x.requires_grad());
  if (x.requires_grad()) {
    tape.record("avg_pool2", {x}, out, [x, out, c, h, w, ho, wo] {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < ho; ++i) {
          for (std::size_t j = 0; j < wo; ++j) {
            const double q = 0.25 * g[(ch * ho + i) * wo + j];
            const std::size_t b = (ch * h + 2 * i) * w + 2 * j;
            gx[b] += q;
            gx[b + 1] += q;
            gx[b + w] += q;
            gx[b + w + 1] += q;
          }
        }
      }
    });
  }
  return out;
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor out(std::move(shape), x.vec(), x.requires_grad());
  if (x.requires_grad()) {
    tape.record("reshape", {x}, out, [x, out] {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

/// out.flat[i] = x.flat[index[i]]; gradients scatter back additively.
inline Tensor gather(Tape& tape, const Tensor& x, std::vector<std::size_t> index, Shape shape) {
  if (shape_numel(shape) != index.size()) {
    throw DimensionError("gather: " + std::to_string(index.size()) + " indices for shape " +
                         shape_str(shape));
  }
  std::vector<double> y(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.size()) throw DimensionError("gather: index out of range");
    y[i] = x[index[i]];
  }
  Tensor out(std::move(shape), std::move(y), x.requires_grad());
  if (x.requires_grad()) {
    tape.record("gather", {x}, out, [x, out, index = std::move(index)] {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += g[i];
    });
  }
  return out;
}

/// Selected rows of an N x C matrix, in the given order.
inline Tensor gather_rows(Tape& tape, const Tensor& x, const std::vector<std::size_t>& rows) {
  detail::require_rank("gather_rows", x, 2);
  const std::size_t c = x.dim(1);
  std::vector<std::size_t> index;
  index.reserve(rows.size() * c);
  for (auto r : rows) {
    if (r >= x.dim(0)) throw DimensionError("gather_rows: row out of range");
    for (std::size_t j = 0; j < c; ++j) index.push_back(r * c + j);
  }
  return gather(tape, x, std::move(index), {rows.size(), c});
}

/// Columns [begin, end) of a 2-D tensor.
inline Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank("slice_cols", x, 2);
  if (begin >= end || end > x.dim(1)) {
    throw DimensionError("slice_cols: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") for " + shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0), n = x.dim(1), k = end - begin;
  std::vector<double> y(rows * k);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.values().data() + r * n + begin, k, y.data() + r * k);
  }
  Tensor out({rows, k}, std::move(y), x.requires_grad());
  if (x.requires_grad()) {
    tape.record("slice_cols", {x}, out, [x, out, rows, n, k, begin] {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < k; ++j) gx[r * n + begin + j] += g[r * k + j];
      }
    });
  }
  return out;
}

/// Horizontal concatenation of 2-D tensors with equal row counts.
inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts.front().dim(0);
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_rank("concat_cols", p, 2);
    if (p.dim(0) != rows) throw DimensionError("concat_cols: row counts differ");
    total += p.dim(1);
    rg = rg || p.requires_grad();
  }
  std::vector<double> y(rows * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t k = p.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.values().data() + r * k, k, y.data() + r * total + off);
    }
    off += k;
  }
  Tensor out({rows, total}, std::move(y), rg);
  if (rg) {
    tape.record("concat_cols", parts, out, [parts, out, rows, total] {
      auto g = out.grad();
      std::size_t off = 0;
      for (const auto& p : parts) {
        const std::size_t k = p.dim(1);
        if (p.requires_grad()) {
          auto gp = p.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < k; ++j) gp[r * k + j] += g[r * total + off + j];
          }
        }
        off += k;
      }
    });
  }
  return out;
}

/// x W + b for x: N x in, W: in x out, b: out.
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(tape, matmul(tape, x, weight), bias);
}

}  // namespace hf
