#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "heightformer/bev.hpp"
#include "heightformer/grad_check.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace hf {
namespace {

using test::random_tensor;

BevGridSpec small_spec(std::size_t channels) { return {0.0, 4.0, -2.0, 2.0, 1.0, channels}; }

FeaturePointCloud random_cloud(std::size_t n, std::size_t c, std::uint64_t seed, const BevGridSpec& spec,
                               double margin) {
  Rng rng(seed);
  FeaturePointCloud cloud;
  for (std::size_t i = 0; i < n; ++i) {
    cloud.xyz.push_back(Vec3(rng.uniform(spec.x_min - margin, spec.x_max + margin),
                             rng.uniform(spec.y_min - margin, spec.y_max + margin), rng.uniform(0, 3)));
  }
  cloud.features = random_tensor({n, c}, seed + 1, -1, 1, false);
  return cloud;
}

TEST(BevGridSpec, CellsAndValidation) {
  const BevGridSpec d;
  EXPECT_EQ(d.cells_x(), 64u);
  EXPECT_EQ(d.cells_y(), 64u);
  EXPECT_THROW((BevGridSpec{0, 1, 0, 1, 0.3, 1}.validate()), ConfigError);
  EXPECT_THROW((BevGridSpec{0, 1, 0, 1, 0.0, 1}.validate()), ConfigError);
  EXPECT_THROW((BevGridSpec{1, 0, 0, 1, 0.5, 1}.validate()), ConfigError);
  EXPECT_FALSE(d.cell_of(-0.1, 0).has_value());
  EXPECT_FALSE(d.cell_of(51.2, 0).has_value());
  EXPECT_EQ(*d.cell_of(0.0, -25.6), 0u);
}

TEST(VoxelPool, SinglePointAndSameCellSum) {
  Tape tape;
  const auto spec = small_spec(2);
  FeaturePointCloud one{{Vec3(1.5, 0.5, 7.0)}, Tensor({1, 2}, {1, 2})};
  const auto a = voxel_pool(tape, one, spec);
  const std::size_t k = 2 * 4 + 1;
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(a.data[i], i == k ? 1.0 : 0.0);
    EXPECT_EQ(a.data[16 + i], i == k ? 2.0 : 0.0);
  }
  FeaturePointCloud two{{Vec3(1.2, 0.3, 0), Vec3(1.9, 0.9, 5)}, Tensor({2, 2}, {1, 0, 0, 3})};
  const auto b = voxel_pool(tape, two, spec);
  EXPECT_EQ(b.data[k], 1.0);
  EXPECT_EQ(b.data[16 + k], 3.0);
}

TEST(VoxelPool, MatchesScatterOracle) {
  Tape tape;
  const auto spec = small_spec(3);
  const auto cloud = random_cloud(500, 3, 7, spec, 1.0);
  EXPECT_EQ(voxel_pool(tape, cloud, spec).data.vec(), oracle::scatter(cloud, spec));
}

TEST(VoxelPool, LinearityAndConservation) {
  Tape tape;
  const BevGridSpec spec{0, 8, -4, 4, 0.5, 2};
  // Integer-valued features keep every sum exact.
  auto integral = [](FeaturePointCloud c) {
    for (auto& v : c.features.mutable_values()) v = std::round(v * 100);
    return c;
  };
  const auto a = integral(random_cloud(300, 2, 11, spec, 0.0));
  const auto b = integral(random_cloud(200, 2, 12, spec, 0.0));
  FeaturePointCloud ab;
  ab.xyz = a.xyz;
  ab.xyz.insert(ab.xyz.end(), b.xyz.begin(), b.xyz.end());
  std::vector<double> f = a.features.vec();
  f.insert(f.end(), b.features.vec().begin(), b.features.vec().end());
  ab.features = Tensor({500, 2}, f);

  const auto pa = voxel_pool(tape, a, spec), pb = voxel_pool(tape, b, spec), pab = voxel_pool(tape, ab, spec);
  for (std::size_t i = 0; i < pab.data.size(); ++i) EXPECT_EQ(pab.data[i], pa.data[i] + pb.data[i]);

  const std::size_t n = spec.cell_count();
  for (std::size_t ch = 0; ch < 2; ++ch) {
    double grid_sum = 0, point_sum = 0;
    for (std::size_t i = 0; i < n; ++i) grid_sum += pab.data[ch * n + i];
    for (std::size_t i = 0; i < 500; ++i) point_sum += ab.features[i * 2 + ch];
    EXPECT_NEAR(grid_sum, point_sum, 1e-9);
  }
}

TEST(VoxelPool, EmptyCloudAndGradient) {
  Tape tape;
  const auto spec = small_spec(2);
  const auto empty = voxel_pool(tape, FeaturePointCloud{}, spec);
  EXPECT_EQ(empty.data.shape(), (Shape{2, 4, 4}));
  auto cloud = random_cloud(40, 2, 13, spec, 0.5);
  cloud.features.set_requires_grad(true);
  EXPECT_LT(grad_check([&](Tape& t) { return random_projection(t, voxel_pool(t, cloud, spec).data, 14); }, {cloud.features}),
            1e-6);
}

TEST(Patchify, CountsAndRoundTrip) {
  Tape tape;
  const Tensor x = random_tensor({3, 4, 4}, 20, -1, 1, false);
  const auto seq = patchify(tape, x, 2);
  EXPECT_EQ(seq.n_patches(), 4u);
  EXPECT_EQ(seq.patch_dim(), 12u);
  EXPECT_EQ(depatchify(tape, seq).vec(), x.vec());
  const auto cells = patchify(tape, x, 1);
  EXPECT_EQ(cells.n_patches(), 16u);
  for (std::size_t t = 0; t < 16; ++t) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(cells.tokens[t * 3 + c], x[c * 16 + t]);
  }
  // Token 1 is the top-right 2x2 block.
  EXPECT_EQ(seq.tokens[12 + 0], x[2]);
  EXPECT_EQ(seq.tokens[12 + 3], x[4 + 3]);
  EXPECT_THROW(patchify(tape, x, 3), DimensionError);
  for (std::size_t ps : {1, 2, 3, 6}) {
    const Tensor y = random_tensor({2, 6, 12}, 21 + ps, -1, 1, false);
    EXPECT_EQ(depatchify(tape, patchify(tape, y, ps)).vec(), y.vec());
  }
}

ParameterStore block_params(std::size_t n, std::size_t dim, std::uint64_t seed, bool randomize_all) {
  ParameterStore p;
  Rng rng(seed);
  init_mhsa_block(p, rng, n, dim, 4, "blk");
  if (randomize_all) {
    Rng r2(seed + 1);
    for (const auto& [name, t] : p) {
      if (name.find("pos_embed") != std::string::npos) continue;
      for (auto& v : Tensor(t).mutable_values()) v = r2.uniform(-0.4, 0.4);
    }
  }
  return p;
}

TEST(Mhsa, SingleTokenIsInputPlusPosition) {
  auto p = block_params(1, 8, 30, false);
  Rng rng(31);
  for (auto& v : Tensor(p.get("blk.pos_embed")).mutable_values()) v = rng.uniform(-1, 1);
  Tape tape;
  PatchSequence seq{random_tensor({1, 8}, 32, -1, 1, false), 1, 8, 1, 1};
  const auto r = mhsa_block(tape, seq, 2, p, "blk");
  for (const auto& a : r.attention) EXPECT_EQ(a[0], 1.0);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(r.out.tokens[i], seq.tokens[i] + p.get("blk.pos_embed")[i]);
}

TEST(Mhsa, AttentionRowsSumToOne) {
  const auto p = block_params(6, 8, 33, true);
  Tape tape;
  PatchSequence seq{random_tensor({6, 8}, 34, -2, 2, false), 1, 8, 2, 3};
  for (const auto& a : mhsa_block(tape, seq, 4, p, "blk").attention) {
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 6; ++c) s += a[r * 6 + c];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
  EXPECT_THROW(mhsa_block(tape, seq, 3, p, "blk"), ConfigError);
}

TEST(Mhsa, PermutationEquivarianceDependsOnPositions) {
  const std::size_t n = 6, dim = 8;
  auto p = block_params(n, dim, 35, true);
  const Tensor tokens = random_tensor({n, dim}, 36, -1, 1, false);
  auto run = [&](const std::vector<std::size_t>& perm) {
    Tape tape;
    PatchSequence seq{gather_rows(tape, tokens, perm), 1, dim, 2, 3};
    return mhsa_block(tape, seq, 2, p, "blk").out.tokens;
  };
  std::vector<std::size_t> id(n);
  std::iota(id.begin(), id.end(), 0);
  const Tensor base = run(id);
  Rng rng(37);
  for (int trial = 0; trial < 10; ++trial) {
    auto perm = id;
    rng.shuffle(perm);
    const Tensor out = run(perm);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < dim; ++k) EXPECT_NEAR(out[i * dim + k], base[perm[i] * dim + k], 1e-12);
    }
  }

  for (auto& v : Tensor(p.get("blk.pos_embed")).mutable_values()) v = rng.uniform(-1, 1);
  const Tensor base2 = run(id);
  const std::vector<std::size_t> swap{1, 0, 2, 3, 4, 5};
  const Tensor out = run(swap);
  double diff = 0;
  for (std::size_t k = 0; k < dim; ++k) diff = std::max(diff, std::abs(out[k] - base2[dim + k]));
  EXPECT_GT(diff, 1e-6);
}

TEST(Vpf, NeutralAtInitAndShapes) {
  const BevGridSpec spec{0, 6.4, -3.2, 3.2, 0.8, 4};
  const VpfConfig cfg{2, 4, 1, 4};
  ParameterStore p;
  Rng rng(40);
  init_vpf(p, rng, spec, cfg);
  Tape tape;
  const BevFeatureMap pooled{spec, random_tensor({4, 8, 8}, 41)};
  const auto out = vpf_forward(tape, pooled, cfg, p);
  EXPECT_EQ(out.data.shape(), pooled.data.shape());
  EXPECT_EQ(out.data.vec(), pooled.data.vec());
  EXPECT_THROW(init_vpf(p, rng, spec, VpfConfig{3, 4, 1, 4}), ConfigError);
}

TEST(Vpf, GradientCheck) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const BevGridSpec spec{0, 4, -2, 2, 1, 2};
    const VpfConfig cfg{2, 2, 1, 2};
    ParameterStore p;
    Rng rng(50 + seed);
    init_vpf(p, rng, spec, cfg);
    Rng r2(60 + seed);
    for (const auto& [_, t] : p) {
      for (auto& v : Tensor(t).mutable_values()) v = r2.uniform(-0.4, 0.4);
    }
    Tensor x = random_tensor({2, 4, 4}, 70 + seed);
    std::vector<Tensor> in{x};
    for (const auto& [_, t] : p) in.push_back(t);
    EXPECT_LT(grad_check([&](Tape& t) { return random_projection(t, vpf_forward(t, {spec, x}, cfg, p).data, seed); }, in), 1e-3);
  }
}

}  // namespace
}  // namespace hf
