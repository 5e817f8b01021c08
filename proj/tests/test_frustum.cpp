#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "heightformer/frustum.hpp"
#include "heightformer/grad_check.hpp"
#include "test_util.hpp"

namespace hf {
namespace {

using test::random_tensor;

VirtualCameraFrame desk_camera(double pitch_deg = 10.0, double height = 6.0) {
  return make_camera_frame(ground_plane_for(pitch_deg * std::numbers::pi / 180.0, height), {80, 80, 48, 32});
}

TEST(OuterProductLift, SingleBinPassesThrough) {
  Tape tape;
  const FeatureMap f{random_tensor({3, 2, 4}, 1, -1, 1, false), 4};
  const Tensor out = outer_product_lift(tape, f, {random_tensor({1, 2, 4}, 2, -1, 1, false), {}});
  ASSERT_EQ(out.shape(), (Shape{8, 3}));
  for (std::size_t p = 0; p < 8; ++p) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out[p * 3 + c], f.data[c * 8 + p]);
  }
}

TEST(OuterProductLift, UniformSplitsEvenly) {
  Tape tape;
  const FeatureMap f{random_tensor({2, 3, 3}, 3, -1, 1, false), 4};
  const Tensor out = outer_product_lift(tape, f, {Tensor::zeros({4, 3, 3}), {4, 0, 4}});
  for (std::size_t p = 0; p < 9; ++p) {
    for (std::size_t b = 0; b < 4; ++b) {
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(out[(p * 4 + b) * 2 + c], f.data[c * 9 + p] / 4, 1e-15);
    }
  }
}

TEST(OuterProductLift, BinsSumToFusedFeature) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tape tape;
    const FeatureMap f{random_tensor({5, 4, 6}, 10 + seed, -3, 3, false), 4};
    const Tensor out = outer_product_lift(tape, f, {random_tensor({7, 4, 6}, 20 + seed, -4, 4, false), {7, 0, 4}});
    for (std::size_t p = 0; p < 24; ++p) {
      for (std::size_t c = 0; c < 5; ++c) {
        double s = 0;
        for (std::size_t b = 0; b < 7; ++b) s += out[(p * 7 + b) * 5 + c];
        EXPECT_NEAR(s, f.data[c * 24 + p], 1e-12);
      }
    }
  }
}

TEST(OuterProductLift, MisalignedAndGradient) {
  Tape tape;
  EXPECT_THROW(outer_product_lift(tape, {Tensor::zeros({2, 3, 3}), 4}, {Tensor::zeros({4, 3, 2}), {4, 0, 4}}),
               DimensionError);
  Tensor feat = random_tensor({2, 2, 3}, 30), logits = random_tensor({3, 2, 3}, 31);
  EXPECT_LT(grad_check([&](Tape& t) { return random_projection(t, outer_product_lift(t, {feat, 4}, {logits, {3, 0, 4}}), 32); },
                       {feat, logits}),
            1e-5);
}

TEST(FrustumToEgo, HeightsEqualBinCenters) {
  const HeightBinSpec bins{16, -0.5, 6.0};
  for (double pitch : {5.0, 10.0, 15.0}) {
    const auto f = desk_camera(pitch, 7.0);
    const auto grid = frustum_to_ego(bins, f, 4, 16, 24);
    EXPECT_GT(grid.valid_count(), 0u);
    for (std::size_t r = 0; r < 16; ++r) {
      for (std::size_t c = 0; c < 24; ++c) {
        for (std::size_t b = 0; b < 16; ++b) {
          const auto i = grid.index(r, c, b);
          if (grid.valid[i]) {
            EXPECT_NEAR(grid.points[i].z(), bin_center(bins, b), 1e-9);
          }
        }
      }
    }
  }
}

TEST(FrustumToEgo, MasksRowsAboveHorizon) {
  const auto f = desk_camera(5.0, 6.0);
  const auto grid = frustum_to_ego({4, 0, 4}, f, 4, 16, 24);
  // Horizon sits at v = cy - fy tan(pitch); rows above it never hit the ground.
  const double horizon = 32 - 80 * std::tan(5.0 * std::numbers::pi / 180.0);
  for (std::size_t r = 0; r < 16; ++r) {
    const double v = (r + 0.5) * 4;
    for (std::size_t b = 0; b < 4; ++b) {
      EXPECT_EQ(grid.valid[grid.index(r, 0, b)] != 0, v > horizon + 1e-6) << "row " << r;
    }
  }
}

TEST(FrustumToEgo, BinsAtOrAboveCameraMasked) {
  const auto f = desk_camera(10.0, 4.0);
  const auto grid = frustum_to_ego({8, 0, 8}, f, 4, 16, 24);
  for (std::size_t i = 0; i < grid.points.size(); ++i) {
    if (i % 8 >= 4) {
      EXPECT_EQ(grid.valid[i], 0);
    }
  }
}

TEST(FrustumToEgo, MatchesPerSampleComposition) {
  const HeightBinSpec bins{6, 0, 3};
  const auto f = desk_camera(12.0, 6.5);
  const auto grid = frustum_to_ego(bins, f, 4, 16, 24);
  for (std::size_t r = 0; r < 16; ++r) {
    for (std::size_t c = 0; c < 24; ++c) {
      for (std::size_t b = 0; b < 6; ++b) {
        const PixelHeightSample s{(c + 0.5) * 4, (r + 0.5) * 4, bin_center(bins, b)};
        const auto i = grid.index(r, c, b);
        try {
          const Vec3 p = lift_pixel(s, f);
          ASSERT_TRUE(grid.valid[i]);
          EXPECT_EQ((grid.points[i] - p).cwiseAbs().maxCoeff(), 0.0);
        } catch (const HorizonError&) {
          EXPECT_FALSE(grid.valid[i]);
        }
      }
    }
  }
}

TEST(FrustumToEgo, AllInvalidIsDegenerate) {
  // Camera pitched upward: every ray climbs.
  const auto f = make_camera_frame(ground_plane_for(-40.0 * std::numbers::pi / 180.0, 6.0), {80, 80, 48, 32});
  EXPECT_THROW(frustum_to_ego({4, 0, 4}, f, 4, 16, 24), DegenerateCameraError);
}

TEST(BuildPointCloud, OrderAndMask) {
  Tape tape;
  FrustumGrid grid;
  grid.height = 2;
  grid.width = 2;
  grid.n_bins = 2;
  for (int i = 0; i < 8; ++i) grid.points.push_back(Vec3(i, 0, 0));
  grid.valid.assign(8, 1);
  Tensor lifted = random_tensor({8, 3}, 40, -1, 1, false);
  const auto all = build_point_cloud(tape, lifted, grid);
  ASSERT_EQ(all.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(all.xyz[i].x(), static_cast<double>(i));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(all.features[i * 3 + c], lifted[i * 3 + c]);
  }

  grid.valid = {1, 0, 0, 1, 1, 0, 0, 1};
  const auto half = build_point_cloud(tape, lifted, grid);
  const std::vector<std::size_t> kept{0, 3, 4, 7};
  ASSERT_EQ(half.size(), 4u);
  std::vector<double> mass(3, 0.0), want(3, 0.0);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(half.xyz[j].x(), static_cast<double>(kept[j]));
    for (std::size_t c = 0; c < 3; ++c) {
      mass[c] += half.features[j * 3 + c];
      want[c] += lifted[kept[j] * 3 + c];
    }
  }
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(mass[c], want[c], 1e-12);
  EXPECT_THROW(build_point_cloud(tape, Tensor::zeros({7, 3}), grid), DimensionError);
}

TEST(BuildPointCloud, DeterministicAndHeightsFromBins) {
  const HeightBinSpec bins{8, -0.5, 6};
  const auto f = desk_camera();
  const auto grid = frustum_to_ego(bins, f, 4, 16, 24);
  Tape tape;
  Tensor lifted = random_tensor({grid.points.size(), 2}, 41, -1, 1, false);
  const auto a = build_point_cloud(tape, lifted, grid);
  const auto b = build_point_cloud(tape, lifted, grid);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(a.features.vec(), b.features.vec());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.xyz[i], b.xyz[i]);
    bool on_bin = false;
    for (std::size_t k = 0; k < bins.n_bins; ++k) on_bin = on_bin || std::abs(a.xyz[i].z() - bin_center(bins, k)) < 1e-9;
    EXPECT_TRUE(on_bin);
  }
}

}  // namespace
}  // namespace hf
