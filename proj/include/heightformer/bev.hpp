#pragma once

// Voxel (pillar) pooling of the feature point cloud into a BEV grid, and the
// Voxel Pooling Former: patchify -> self-attention block(s) -> depatchify.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "heightformer/errors.hpp"
#include "heightformer/frustum.hpp"
#include "heightformer/ops.hpp"
#include "heightformer/params.hpp"
#include "heightformer/random.hpp"
#include "heightformer/tensor.hpp"

namespace hf {

struct BevGridSpec {
  double x_min = 0.0, x_max = 51.2;
  double y_min = -25.6, y_max = 25.6;
  double resolution = 0.8;
  std::size_t channels = 32;

  std::size_t cells_x() const { return cells_along(x_min, x_max); }
  std::size_t cells_y() const { return cells_along(y_min, y_max); }
  std::size_t cell_count() const { return cells_x() * cells_y(); }

  void validate() const {
    if (!(resolution > 0.0)) throw ConfigError("bev grid: resolution must be positive");
    if (channels == 0) throw ConfigError("bev grid: channels must be positive");
    (void)cells_x();
    (void)cells_y();
  }

  /// Flat cell index (iy * cells_x + ix), empty outside the extent.
  std::optional<std::size_t> cell_of(double x, double y) const {
    const double fx = std::floor((x - x_min) / resolution);
    const double fy = std::floor((y - y_min) / resolution);
    if (!(fx >= 0.0 && fy >= 0.0)) return std::nullopt;
    if (fx >= static_cast<double>(cells_x()) || fy >= static_cast<double>(cells_y())) return std::nullopt;
    return static_cast<std::size_t>(fy) * cells_x() + static_cast<std::size_t>(fx);
  }

 private:
  std::size_t cells_along(double lo, double hi) const {
    const double n = (hi - lo) / resolution;
    const double r = std::round(n);
    if (!(hi > lo) || r < 1.0 || std::abs(n - r) > 1e-9 * std::max(1.0, r)) {
      throw ConfigError("bev grid: extent [" + std::to_string(lo) + ", " + std::to_string(hi) +
                        "] is not a positive multiple of the resolution");
    }
    return static_cast<std::size_t>(r);
  }
};

struct BevFeatureMap {
  BevGridSpec spec;
  Tensor data;  // C x cells_y x cells_x
};

/// Sum-pools point features into their (x, y) cells; z is ignored and points
/// outside the extent are dropped.
inline BevFeatureMap voxel_pool(Tape& tape, const FeaturePointCloud& cloud, const BevGridSpec& spec) {
  spec.validate();
  const std::size_t ncell = spec.cell_count(), c = spec.channels;
  std::vector<double> grid(c * ncell, 0.0);
  if (cloud.size() == 0) return {spec, Tensor({c, spec.cells_y(), spec.cells_x()}, std::move(grid))};
  const Tensor& f = cloud.features;
  if (f.rank() != 2 || f.dim(0) != cloud.size() || f.dim(1) != c) {
    throw DimensionError("voxel_pool: features " + shape_str(f.shape()) + " vs " + std::to_string(cloud.size()) +
                         " points of " + std::to_string(c) + " channels");
  }
  std::vector<std::ptrdiff_t> cell(cloud.size(), -1);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (auto k = spec.cell_of(cloud.xyz[i].x(), cloud.xyz[i].y())) cell[i] = static_cast<std::ptrdiff_t>(*k);
  }
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cell[i] < 0) continue;
    const auto k = static_cast<std::size_t>(cell[i]);
    for (std::size_t ch = 0; ch < c; ++ch) grid[ch * ncell + k] += f[i * c + ch];
  }
  Tensor out({c, spec.cells_y(), spec.cells_x()}, std::move(grid), f.requires_grad());
  if (f.requires_grad()) {
    tape.record("voxel_pool", {f}, out, [f, out, cell = std::move(cell), c, ncell] {
      auto g = out.grad();
      auto gf = f.grad_buffer();
      for (std::size_t i = 0; i < cell.size(); ++i) {
        if (cell[i] < 0) continue;
        const auto k = static_cast<std::size_t>(cell[i]);
        for (std::size_t ch = 0; ch < c; ++ch) gf[i * c + ch] += g[ch * ncell + k];
      }
    });
  }
  return {spec, out};
}

struct PatchSequence {
  Tensor tokens;  // n_patches x (C * patch_size^2)
  std::size_t patch_size = 1;
  std::size_t channels = 0, cells_y = 0, cells_x = 0;

  std::size_t n_patches() const { return tokens.dim(0); }
  std::size_t patch_dim() const { return tokens.dim(1); }
};

namespace detail {

/// Flat index into C x H x W for element e of token t.
inline std::vector<std::size_t> patch_index(std::size_t c, std::size_t h, std::size_t w, std::size_t ps) {
  const std::size_t py = h / ps, px = w / ps, dim = c * ps * ps;
  std::vector<std::size_t> idx(py * px * dim);
  for (std::size_t ty = 0; ty < py; ++ty) {
    for (std::size_t tx = 0; tx < px; ++tx) {
      const std::size_t t = ty * px + tx;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t dy = 0; dy < ps; ++dy) {
          for (std::size_t dx = 0; dx < ps; ++dx) {
            const std::size_t e = (ch * ps + dy) * ps + dx;
            idx[t * dim + e] = (ch * h + ty * ps + dy) * w + tx * ps + dx;
          }
        }
      }
    }
  }
  return idx;
}

}  // namespace detail

/// Row-major patches; each token is the flattened C x ps x ps block.
inline PatchSequence patchify(Tape& tape, const Tensor& grid, std::size_t patch_size) {
  if (grid.rank() != 3) throw DimensionError("patchify: expected C x H x W, got " + shape_str(grid.shape()));
  const std::size_t c = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
  if (patch_size == 0 || h % patch_size || w % patch_size) {
    throw DimensionError("patchify: " + shape_str(grid.shape()) + " not divisible by patch " + std::to_string(patch_size));
  }
  const std::size_t n = (h / patch_size) * (w / patch_size), dim = c * patch_size * patch_size;
  Tensor tokens = gather(tape, grid, detail::patch_index(c, h, w, patch_size), {n, dim});
  return {tokens, patch_size, c, h, w};
}

inline Tensor depatchify(Tape& tape, const PatchSequence& seq) {
  const std::size_t c = seq.channels, h = seq.cells_y, w = seq.cells_x, ps = seq.patch_size;
  const auto fwd = detail::patch_index(c, h, w, ps);
  if (seq.tokens.size() != fwd.size()) throw DimensionError("depatchify: token count does not match source dims");
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
  return gather(tape, seq.tokens, std::move(inv), {c, h, w});
}

struct VpfConfig {
  std::size_t patch_size = 4;
  std::size_t n_heads = 4;
  std::size_t depth = 1;
  std::size_t mlp_ratio = 4;
};

/// Q/K/V and the MLP input layer start random; the attention output
/// projection, the MLP output layer and the positional embedding start at
/// zero, so every block is initially the identity.
inline void init_mhsa_block(ParameterStore& store, Rng& rng, std::size_t n_tokens, std::size_t dim,
                            std::size_t mlp_ratio, const std::string& prefix) {
  const std::size_t hidden = mlp_ratio * dim;
  store.add(prefix + ".pos_embed", Tensor::zeros({n_tokens, dim}));
  store.add(prefix + ".ln1.gamma", Tensor::full({dim}, 1.0));
  store.add(prefix + ".ln1.beta", Tensor::zeros({dim}));
  for (const char* name : {"q", "k", "v"}) {
    store.add(prefix + ".attn." + name + ".weight", init_uniform(rng, {dim, dim}, dim));
    store.add(prefix + ".attn." + name + ".bias", Tensor::zeros({dim}));
  }
  store.add(prefix + ".attn.o.weight", Tensor::zeros({dim, dim}));
  store.add(prefix + ".attn.o.bias", Tensor::zeros({dim}));
  store.add(prefix + ".ln2.gamma", Tensor::full({dim}, 1.0));
  store.add(prefix + ".ln2.beta", Tensor::zeros({dim}));
  store.add(prefix + ".mlp.fc1.weight", init_uniform(rng, {dim, hidden}, dim, std::sqrt(6.0)));
  store.add(prefix + ".mlp.fc1.bias", Tensor::zeros({hidden}));
  store.add(prefix + ".mlp.fc2.weight", Tensor::zeros({hidden, dim}));
  store.add(prefix + ".mlp.fc2.bias", Tensor::zeros({dim}));
}

struct MhsaResult {
  PatchSequence out;
  std::vector<Tensor> attention;  // per head, n x n, rows sum to 1
};

/// u = t + pos; y = u + MHSA(LN(u)); z = y + MLP(LN(y)).
inline MhsaResult mhsa_block(Tape& tape, const PatchSequence& seq, std::size_t n_heads, const ParameterStore& p,
                             const std::string& prefix) {
  const std::size_t dim = seq.patch_dim();
  if (n_heads == 0 || dim % n_heads) {
    throw ConfigError("mhsa: patch_dim " + std::to_string(dim) + " not divisible by " + std::to_string(n_heads) +
                      " heads");
  }
  const std::size_t dh = dim / n_heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor u = add(tape, seq.tokens, p.get(prefix + ".pos_embed"));
  Tensor x = layer_norm(tape, u, p.get(prefix + ".ln1.gamma"), p.get(prefix + ".ln1.beta"));
  Tensor q = linear(tape, x, p.get(prefix + ".attn.q.weight"), p.get(prefix + ".attn.q.bias"));
  Tensor k = linear(tape, x, p.get(prefix + ".attn.k.weight"), p.get(prefix + ".attn.k.bias"));
  Tensor v = linear(tape, x, p.get(prefix + ".attn.v.weight"), p.get(prefix + ".attn.v.bias"));

  MhsaResult result;
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(tape, q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(tape, k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(tape, v, h * dh, (h + 1) * dh);
    Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), scale_factor);
    Tensor attn = softmax(tape, scores, 1);
    result.attention.push_back(attn);
    heads.push_back(matmul(tape, attn, vh));
  }
  Tensor attended = linear(tape, concat_cols(tape, heads), p.get(prefix + ".attn.o.weight"), p.get(prefix + ".attn.o.bias"));
  Tensor y = add(tape, u, attended);

  Tensor z = layer_norm(tape, y, p.get(prefix + ".ln2.gamma"), p.get(prefix + ".ln2.beta"));
  z = relu(tape, linear(tape, z, p.get(prefix + ".mlp.fc1.weight"), p.get(prefix + ".mlp.fc1.bias")));
  z = linear(tape, z, p.get(prefix + ".mlp.fc2.weight"), p.get(prefix + ".mlp.fc2.bias"));

  result.out = seq;
  result.out.tokens = add(tape, y, z);
  return result;
}

inline void init_vpf(ParameterStore& store, Rng& rng, const BevGridSpec& spec, const VpfConfig& cfg,
                     const std::string& prefix = "vpf") {
  spec.validate();
  if (cfg.patch_size == 0 || spec.cells_x() % cfg.patch_size || spec.cells_y() % cfg.patch_size) {
    throw ConfigError("vpf: BEV grid not divisible by patch size " + std::to_string(cfg.patch_size));
  }
  const std::size_t n = (spec.cells_x() / cfg.patch_size) * (spec.cells_y() / cfg.patch_size);
  const std::size_t dim = spec.channels * cfg.patch_size * cfg.patch_size;
  if (dim % cfg.n_heads) throw ConfigError("vpf: patch_dim not divisible by n_heads");
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    init_mhsa_block(store, rng, n, dim, cfg.mlp_ratio, prefix + ".block" + std::to_string(b));
  }
}

/// F_BEV = depatchify(blocks(patchify(F_Pooling))).
inline BevFeatureMap vpf_forward(Tape& tape, const BevFeatureMap& pooled, const VpfConfig& cfg, const ParameterStore& p,
                                 const std::string& prefix = "vpf") {
  PatchSequence seq = patchify(tape, pooled.data, cfg.patch_size);
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    seq = mhsa_block(tape, seq, cfg.n_heads, p, prefix + ".block" + std::to_string(b)).out;
  }
  return {pooled.spec, depatchify(tape, seq)};
}

}  // namespace hf
