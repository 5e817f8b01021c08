#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "heightformer/grad_check.hpp"
#include "heightformer/head.hpp"
#include "heightformer/pipeline.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace hf {
namespace {

using test::random_tensor;
constexpr double kPi = std::numbers::pi;

BevGridSpec grid16() { return {0.0, 12.8, -6.4, 6.4, 0.8, 4}; }

/// Head outputs that reproduce the targets exactly.
HeadOutput exact_output(const DetectionTargets& t) { return {t.heatmap, t.heatmap, t.regression}; }

Box3D random_box(Rng& rng, const BevGridSpec& spec) {
  return {rng.uniform(spec.x_min + 0.5, spec.x_max - 0.5),
          rng.uniform(spec.y_min + 0.5, spec.y_max - 0.5),
          rng.uniform(0.3, 2.0),
          rng.uniform(0.5, 6.0),
          rng.uniform(0.5, 3.0),
          rng.uniform(0.8, 3.5),
          rng.uniform(-kPi + 1e-6, kPi)};
}

TEST(HeadForward, ZeroWeightsAndShapes) {
  ParameterStore p;
  Rng rng(1);
  init_head(p, rng, 4, 3);
  for (const auto& [_, t] : p) {
    for (auto& v : Tensor(t).mutable_values()) v = 0.0;
  }
  Tape tape;
  const auto out = head_forward(tape, {grid16(), random_tensor({4, 16, 16}, 2, -1, 1, false)}, p);
  EXPECT_EQ(out.heatmap.shape(), (Shape{3, 16, 16}));
  EXPECT_EQ(out.regression.shape(), (Shape{8, 16, 16}));
  for (double v : out.heatmap.vec()) EXPECT_EQ(v, 0.5);
  for (double v : out.regression.vec()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(head_forward(tape, {grid16(), Tensor::zeros({5, 16, 16})}, p), DimensionError);
}

TEST(HeadForward, InitialScoreIsPrior) {
  ParameterStore p;
  Rng rng(3);
  init_head(p, rng, 4, 3);
  for (auto& v : Tensor(p.get("head.heatmap.kernel")).mutable_values()) v = 0.0;
  Tape tape;
  const auto out = head_forward(tape, {grid16(), random_tensor({4, 16, 16}, 4, -1, 1, false)}, p);
  for (double v : out.heatmap.vec()) EXPECT_NEAR(v, 0.1, 1e-3);
}

TEST(HeadForward, GradientCheck) {
  ParameterStore p;
  Rng rng(5);
  init_head(p, rng, 3, 2);
  Tensor x = random_tensor({3, 4, 4}, 6);
  std::vector<Tensor> in{x};
  for (const auto& [_, t] : p) in.push_back(t);
  const BevGridSpec spec{0, 4, 0, 4, 1, 3};
  EXPECT_LT(grad_check(
                [&](Tape& t) {
                  const auto o = head_forward(t, {spec, x}, p);
                  return add(t, random_projection(t, o.heatmap, 7), random_projection(t, o.regression, 8));
                },
                in),
            1e-4);
}

TEST(EncodeTargets, CellCenteredBox) {
  const auto spec = grid16();
  const Box3D b{0.8 * 5 + 0.4, -6.4 + 0.8 * 9 + 0.4, 1.0, 4.0, 1.8, 1.5, 0.0};
  const auto t = encode_targets({{b, Category::Car}}, spec);
  const std::size_t k = 9 * 16 + 5;
  EXPECT_EQ(t.heatmap[k], 1.0);
  EXPECT_NEAR(t.regression[kDx * 256 + k], 0.5, 1e-12);
  EXPECT_NEAR(t.regression[kDy * 256 + k], 0.5, 1e-12);
  EXPECT_EQ(t.regression[kSinYaw * 256 + k], 0.0);
  EXPECT_EQ(t.regression[kCosYaw * 256 + k], 1.0);
  EXPECT_EQ(t.mask[k], 1.0);
  EXPECT_EQ(t.supervised, 1u);
  for (std::size_t i = 0; i < 256; ++i) {
    EXPECT_EQ(t.heatmap[256 + i], 0.0);
    if (i != k) {
      EXPECT_LT(t.heatmap[i], 1.0);
    }
  }
}

TEST(EncodeTargets, DisjointPeaksAndMaxCombine) {
  const auto spec = grid16();
  const Box3D a{2.0, -4.0, 1, 2, 1, 1, 0}, b{10.0, 4.0, 1, 2, 1, 1, 0};
  const auto t = encode_targets({{a, Category::Car}, {b, Category::Car}}, spec);
  const auto ta = encode_targets({{a, Category::Car}}, spec), tb = encode_targets({{b, Category::Car}}, spec);
  for (std::size_t i = 0; i < 256; ++i) {
    EXPECT_FALSE(ta.heatmap[i] > 0 && tb.heatmap[i] > 0);
    EXPECT_EQ(t.heatmap[i], std::max(ta.heatmap[i], tb.heatmap[i]));
  }
  const Box3D c{2.8, -4.0, 1, 2, 1, 1, 0};
  const auto tc = encode_targets({{c, Category::Car}}, spec), tac = encode_targets({{a, Category::Car}, {c, Category::Car}}, spec);
  bool overlap = false;
  for (std::size_t i = 0; i < 256; ++i) {
    overlap = overlap || (ta.heatmap[i] > 0 && tc.heatmap[i] > 0);
    EXPECT_EQ(tac.heatmap[i], std::max(ta.heatmap[i], tc.heatmap[i]));
  }
  EXPECT_TRUE(overlap);
}

TEST(EncodeTargets, OutsideBoxesSkipped) {
  const auto t = encode_targets({{Box3D{-3, 0, 1, 2, 1, 1, 0}, Category::Car}}, grid16());
  EXPECT_EQ(t.skipped, 1u);
  EXPECT_EQ(t.supervised, 0u);
}

TEST(Decode, InvertsEncoding) {
  const auto spec = grid16();
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const Box3D b = random_box(rng, spec);
    const auto dets = decode_boxes(exact_output(encode_targets({{b, Category::Cyclist}}, spec)), spec, 10, 0.99);
    ASSERT_EQ(dets.size(), 1u);
    const Box3D& d = dets[0].box;
    EXPECT_EQ(dets[0].category, Category::Cyclist);
    EXPECT_NEAR(d.cx, b.cx, 1e-12);
    EXPECT_NEAR(d.cy, b.cy, 1e-12);
    EXPECT_NEAR(d.cz, b.cz, 1e-12);
    EXPECT_NEAR(d.length, b.length, 1e-12);
    EXPECT_NEAR(d.width, b.width, 1e-12);
    EXPECT_NEAR(d.height, b.height, 1e-12);
    EXPECT_NEAR(d.yaw, b.yaw, 1e-12);
  }
}

TEST(Decode, YawFromSinCos) {
  const BevGridSpec spec{0, 1, 0, 1, 1, 1};
  auto yaw_of = [&](double s, double c) {
    Tensor reg({8, 1, 1}, {0.5, 0.5, 0, 0, 0, 0, s, c});
    return box_at_cell(reg, spec, 0, 0).yaw;
  };
  EXPECT_EQ(yaw_of(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(yaw_of(1, 0), kPi / 2);
  EXPECT_DOUBLE_EQ(yaw_of(0, -1), kPi);
  EXPECT_DOUBLE_EQ(yaw_of(-0.0, -1), kPi);
  Rng rng(10);
  for (int i = 0; i < 1000; ++i) {
    const double y = yaw_of(rng.uniform(-1, 1), rng.uniform(-1, 1));
    EXPECT_GT(y, -kPi);
    EXPECT_LE(y, kPi);
  }
}

TEST(Decode, ThresholdAndMaxDets) {
  const auto spec = grid16();
  const auto t = encode_targets({{Box3D{2, -4, 1, 2, 1, 1, 0}, Category::Car}, {Box3D{10, 4, 1, 2, 1, 1, 0}, Category::Car}}, spec);
  HeadOutput out = exact_output(t);
  EXPECT_EQ(decode_boxes(out, spec, 10, 0.5).size(), 2u);
  EXPECT_EQ(decode_boxes(out, spec, 1, 0.5).size(), 1u);
  out.heatmap = Tensor::full({3, 16, 16}, 0.05);
  EXPECT_TRUE(decode_boxes(out, spec, 10, 0.1).empty());
}

TEST(Nms, DuplicatesAndDisjoint) {
  const Box3D b{5, 0, 1, 4, 2, 1.5, 0.3};
  const auto kept = rotated_nms({{b, Category::Car, 0.8}, {b, Category::Car, 0.9}}, 0.2);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].score, 0.9);
  Box3D far = b;
  far.cx += 10;
  EXPECT_EQ(rotated_nms({{b, Category::Car, 0.8}, {far, Category::Car, 0.9}}, 0.2).size(), 2u);
  EXPECT_EQ(rotated_nms({{b, Category::Car, 0.8}, {b, Category::Cyclist, 0.9}}, 0.2).size(), 2u);
  EXPECT_THROW(rotated_nms({}, 0.0), ContractError);
  EXPECT_THROW(rotated_nms({}, 1.0), ContractError);
}

TEST(Nms, MatchesBruteForceAndLeavesNoOverlap) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Detection> dets;
    for (int i = 0; i < 20; ++i) {
      Box3D b{rng.uniform(0, 8), rng.uniform(0, 8), 1, rng.uniform(1, 4), rng.uniform(1, 2), 1.5, rng.uniform(-3, 3)};
      dets.push_back({b, static_cast<Category>(rng.index(2)), rng.uniform()});
    }
    const double thr = rng.uniform(0.1, 0.6);
    const auto kept = rotated_nms(dets, thr);
    const auto want = oracle::nms_keep(dets, thr);
    ASSERT_EQ(kept.size(), want.size());
    for (std::size_t i = 0; i < kept.size(); ++i) EXPECT_EQ(kept[i].score, dets[want[i]].score);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      for (std::size_t j = i + 1; j < kept.size(); ++j) {
        if (kept[i].category == kept[j].category) {
          EXPECT_LT(bev_iou(kept[i].box, kept[j].box), thr);
        }
      }
    }
  }
}

TEST(Loss, PerfectPredictionNearZero) {
  const auto spec = grid16();
  const auto t = encode_targets({{Box3D{5, 1, 1, 3, 1.5, 1.5, 0.4}, Category::Car}}, spec);
  std::vector<double> logits(t.heatmap.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double y = std::clamp(t.heatmap[i], 1e-4, 1.0 - 1e-4);
    logits[i] = std::log(y / (1.0 - y));
  }
  Tape tape;
  const Tensor z(t.heatmap.shape(), logits);
  const double loss = detection_loss(tape, {z, sigmoid(tape, z), t.regression}, t).item();
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-2);
}

TEST(Loss, NonNegativeAndHeatmapOnlyWithoutTargets) {
  Rng rng(12);
  const auto spec = grid16();
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<LabeledBox> gt;
    for (int i = 0; i < trial % 4; ++i) gt.push_back({random_box(rng, spec), Category::Car});
    const auto t = encode_targets(gt, spec);
    Tape tape;
    const Tensor z = random_tensor({3, 16, 16}, 100 + trial, -6, 6, false);
    const Tensor reg = random_tensor({8, 16, 16}, 200 + trial, -2, 2, false);
    const HeadOutput out{z, sigmoid(tape, z), reg};
    const double total = detection_loss(tape, out, t).item();
    EXPECT_GE(total, 0.0);
    if (t.supervised == 0) {
      EXPECT_EQ(total, focal_loss(tape, z, t.heatmap).item());
    }
  }
}

TEST(Loss, GradientCheck) {
  const BevGridSpec spec{0, 4, 0, 4, 1, 2};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const auto t = encode_targets({{Box3D{rng.uniform(0.2, 3.8), rng.uniform(0.2, 3.8), 1, 2, 1, 1, 0.3}, Category::Car}}, spec);
    Tensor z = random_tensor({3, 4, 4}, 20 + seed, -3, 3);
    Tensor reg = random_tensor({8, 4, 4}, 30 + seed, -2, 2);
    EXPECT_LT(grad_check([&](Tape& tp) { return detection_loss(tp, {z, sigmoid(tp, z), reg}, t); }, {z, reg}), 1e-3);
  }
}

TEST(Loss, DecreasesWhenOverfittingOneScene) {
  PipelineConfig cfg;
  cfg.finalize();
  const auto scene = synthesize(cfg, 7, 1).front();
  const auto sample = make_sample(cfg, scene.annotation, scene.image);
  Model model(cfg);
  const double before = evaluate_losses(model, {sample}).front();
  const auto log = train(model, {sample}, 50);
  const double after = evaluate_losses(model, {sample}).front();
  EXPECT_LT(after, before);
  EXPECT_LT(log.step_losses.back(), log.step_losses.front());
}

}  // namespace
}  // namespace hf
