#pragma once

// Detection metrics: greedy matching, AP over 40 recall points, the
// similarity components and the Rope score, and the per-class report.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "heightformer/box.hpp"
#include "heightformer/errors.hpp"
#include "heightformer/iou.hpp"
#include "json.hpp"

namespace hf {

struct MatchPair {
  std::size_t pred = 0, gt = 0;
  double iou = 0.0;
};

struct MatchSet {
  std::vector<MatchPair> pairs;
  std::vector<std::size_t> unmatched_preds;  // false positives
  std::vector<std::size_t> unmatched_gts;    // false negatives
};

/// Prediction indices by descending score; ties keep input order.
inline std::vector<std::size_t> score_order(const std::vector<Detection>& preds) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
  return order;
}

/// Greedy single-class matching: each prediction, best score first, takes the
/// unmatched gt of highest 3D IoU if that IoU >= iou_thr.
inline MatchSet match_detections(const std::vector<Detection>& preds, const std::vector<Box3D>& gts, double iou_thr) {
  MatchSet m;
  std::vector<bool> used(gts.size(), false);
  for (std::size_t pi : score_order(preds)) {
    std::optional<std::size_t> best;
    double best_iou = iou_thr;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double iou = rotated_iou_3d(preds[pi].box, gts[g]);
      if (iou >= best_iou && (!best || iou > best_iou)) {
        best = g;
        best_iou = iou;
      }
    }
    if (best) {
      used[*best] = true;
      m.pairs.push_back({pi, *best, best_iou});
    } else {
      m.unmatched_preds.push_back(pi);
    }
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (!used[g]) m.unmatched_gts.push_back(g);
  }
  return m;
}

inline constexpr int kRecallPoints = 40;

struct RankedPrediction {
  double score = 0.0;
  bool true_positive = false;
};

/// Interpolated AP over recall points 1/40 .. 40/40. Thresholds sweep the
/// distinct scores, so equal scores enter together. Empty when n_gt == 0.
inline std::optional<double> ap_r40(std::vector<RankedPrediction> ranked, std::size_t n_gt) {
  if (n_gt == 0) return std::nullopt;
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const RankedPrediction& a, const RankedPrediction& b) { return a.score > b.score; });
  // (true positives, precision) at each threshold
  std::vector<std::pair<std::size_t, double>> curve;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    tp += ranked[i].true_positive;
    if (i + 1 < ranked.size() && ranked[i + 1].score == ranked[i].score) continue;
    curve.emplace_back(tp, static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  double total = 0.0;
  for (int k = 1; k <= kRecallPoints; ++k) {
    double best = 0.0;
    for (const auto& [t, precision] : curve) {
      if (t * kRecallPoints >= static_cast<std::size_t>(k) * n_gt) best = std::max(best, precision);
    }
    total += best;
  }
  return total / kRecallPoints;
}

struct EvalFrame {
  std::vector<Detection> preds;
  std::vector<Box3D> gts;
};

/// Single-class AP over several frames, matching within each frame.
inline std::optional<double> ap_r40(const std::vector<EvalFrame>& frames, double iou_thr) {
  std::vector<RankedPrediction> ranked;
  std::size_t n_gt = 0;
  for (const auto& f : frames) {
    const MatchSet m = match_detections(f.preds, f.gts, iou_thr);
    for (const auto& p : m.pairs) ranked.push_back({f.preds[p.pred].score, true});
    for (std::size_t i : m.unmatched_preds) ranked.push_back({f.preds[i].score, false});
    n_gt += f.gts.size();
  }
  return ap_r40(std::move(ranked), n_gt);
}

inline std::optional<double> ap_r40(const std::vector<Detection>& preds, const std::vector<Box3D>& gts,
                                    double iou_thr) {
  return ap_r40(std::vector<EvalFrame>{{preds, gts}}, iou_thr);
}

// ------------------------------------------------------------ similarities

inline constexpr double kCenterTolerance = 2.0;  // meters
inline constexpr double kGroundTolerance = 2.0;  // meters

struct SimilarityComponents {
  double acs = 0.0;  // ground center
  double aos = 0.0;  // orientation
  double ags = 0.0;  // four ground points
  double aas = 0.0;  // footprint area
  double agd = 0.0;  // mean ground corner distance, meters
};

/// Mean corner distance between two footprints under the best of the four
/// cyclic correspondences.
inline double ground_corner_distance(const Box3D& a, const Box3D& b) {
  const Footprint fa = bev_footprint(a), fb = bev_footprint(b);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t shift = 0; shift < 4; ++shift) {
    double d = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      const Point2& p = fa[i];
      const Point2& q = fb[(i + shift) % 4];
      d += std::hypot(p.x - q.x, p.y - q.y);
    }
    best = std::min(best, d / 4.0);
  }
  return best;
}

/// Components averaged over (prediction, gt) pairs; all zero for no pairs.
inline SimilarityComponents similarity_components(const std::vector<std::pair<Box3D, Box3D>>& pairs) {
  SimilarityComponents s;
  if (pairs.empty()) return s;
  for (const auto& [p, g] : pairs) {
    s.acs += std::max(0.0, 1.0 - std::hypot(p.cx - g.cx, p.cy - g.cy) / kCenterTolerance);
    s.aos += 0.5 * (1.0 + std::cos(p.yaw - g.yaw));
    const double gd = ground_corner_distance(p, g);
    s.agd += gd;
    s.ags += std::max(0.0, 1.0 - gd / kGroundTolerance);
    const double ap = p.length * p.width, ag = g.length * g.width;
    s.aas += std::min(ap, ag) / std::max(ap, ag);
  }
  const double n = static_cast<double>(pairs.size());
  s.acs /= n;
  s.aos /= n;
  s.ags /= n;
  s.aas /= n;
  s.agd /= n;
  return s;
}

inline SimilarityComponents similarity_components(const MatchSet& m, const std::vector<Detection>& preds,
                                                  const std::vector<Box3D>& gts) {
  std::vector<std::pair<Box3D, Box3D>> pairs;
  for (const auto& p : m.pairs) pairs.emplace_back(preds.at(p.pred).box, gts.at(p.gt));
  return similarity_components(pairs);
}

struct RopeWeights {
  double ap = 8.0;
  double similarity = 2.0;
};

/// Which component fills the fourth slot of S next to ACS, AOS and AGS.
enum class FourthComponent { AreaSimilarity, GroundPointSimilarity };

inline double similarity_score(const SimilarityComponents& c, FourthComponent fourth = FourthComponent::AreaSimilarity) {
  const double last = fourth == FourthComponent::AreaSimilarity ? c.aas : c.ags;
  return (c.acs + c.aos + last + c.ags) / 4.0;
}

inline double rope_score(double ap, double similarity, const RopeWeights& w = {}) {
  if (!(w.ap > 0.0 && w.similarity > 0.0)) throw ConfigError("rope_score: weights must be positive");
  return (w.ap * ap + w.similarity * similarity) / (w.ap + w.similarity);
}

inline double rope_score(double ap, const SimilarityComponents& c, const RopeWeights& w = {},
                         FourthComponent fourth = FourthComponent::AreaSimilarity) {
  return rope_score(ap, similarity_score(c, fourth), w);
}

// --------------------------------------------------------------- difficulty

enum class DifficultyLevel : int { Easy = 0, Mid = 1, Hard = 2 };

inline constexpr std::array<const char*, 3> kDifficultyNames = {"Easy", "Mid", "Hard"};

/// Occlusion code 0 -> Easy, 1 -> Mid, anything else -> Hard.
inline DifficultyLevel difficulty_bin(int occlusion_code) {
  if (occlusion_code == 0) return DifficultyLevel::Easy;
  if (occlusion_code == 1) return DifficultyLevel::Mid;
  return DifficultyLevel::Hard;
}

// ------------------------------------------------------------------- report

struct EvalGt {
  LabeledBox box;
  DifficultyLevel difficulty = DifficultyLevel::Easy;
};

struct EvalScene {
  std::vector<Detection> preds;
  std::vector<EvalGt> gts;
};

struct EvalOptions {
  double iou_thr = 0.5;
  std::vector<Category> classes = {Category::Car, Category::BigVehicle, Category::Cyclist};
  RopeWeights weights;
  FourthComponent fourth = FourthComponent::AreaSimilarity;
};

struct LevelMetrics {
  std::optional<double> ap;
  std::optional<double> rope;
  SimilarityComponents sim;
  std::size_t n_gt = 0, n_pred = 0;
};

namespace detail {

inline nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

/// Metrics for one class restricted to gts passing `keep`. Predictions
/// matched to a gt outside the subset are ignored.
template <typename Keep>
LevelMetrics evaluate_subset(const std::vector<EvalScene>& scenes, Category cls, const EvalOptions& opt, Keep keep) {
  LevelMetrics lm;
  std::vector<RankedPrediction> ranked;
  std::vector<std::pair<Box3D, Box3D>> pairs;
  for (const auto& scene : scenes) {
    std::vector<Detection> preds;
    std::vector<Box3D> gts;
    std::vector<bool> kept;
    for (const auto& d : scene.preds) {
      if (d.category == cls) preds.push_back(d);
    }
    for (const auto& g : scene.gts) {
      if (g.box.category != cls) continue;
      gts.push_back(g.box.box);
      kept.push_back(keep(g));
    }
    const MatchSet m = match_detections(preds, gts, opt.iou_thr);
    for (const auto& p : m.pairs) {
      if (!kept[p.gt]) continue;
      ranked.push_back({preds[p.pred].score, true});
      pairs.emplace_back(preds[p.pred].box, gts[p.gt]);
    }
    for (std::size_t i : m.unmatched_preds) ranked.push_back({preds[i].score, false});
    lm.n_gt += static_cast<std::size_t>(std::count(kept.begin(), kept.end(), true));
  }
  lm.n_pred = ranked.size();
  lm.sim = similarity_components(pairs);
  lm.ap = ap_r40(std::move(ranked), lm.n_gt);
  if (lm.ap) lm.rope = rope_score(*lm.ap, lm.sim, opt.weights, opt.fourth);
  return lm;
}

inline nlohmann::json to_json(const LevelMetrics& m) {
  return {{"ap_r40", optional_json(m.ap)}, {"rope_score", optional_json(m.rope)},
          {"acs", m.sim.acs},              {"aos", m.sim.aos},
          {"ags", m.sim.ags},              {"aas", m.sim.aas},
          {"agd", m.sim.agd},              {"n_gt", m.n_gt},
          {"n_pred", m.n_pred}};
}

}  // namespace detail

/// {class -> {Easy|Mid|Hard|Overall -> metrics}}; ap_r40 and rope_score are
/// null where the subset has no gts.
inline nlohmann::json evaluate(const std::vector<EvalScene>& scenes, const EvalOptions& opt = {}) {
  nlohmann::json report = nlohmann::json::object();
  for (Category cls : opt.classes) {
    nlohmann::json per_level = nlohmann::json::object();
    for (std::size_t lvl = 0; lvl < kDifficultyNames.size(); ++lvl) {
      const auto level = static_cast<DifficultyLevel>(lvl);
      per_level[kDifficultyNames[lvl]] =
          detail::to_json(detail::evaluate_subset(scenes, cls, opt, [level](const EvalGt& g) { return g.difficulty == level; }));
    }
    per_level["Overall"] = detail::to_json(detail::evaluate_subset(scenes, cls, opt, [](const EvalGt&) { return true; }));
    report[std::string(category_name(cls))] = per_level;
  }
  return report;
}

}  // namespace hf
