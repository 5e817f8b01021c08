#pragma once

// End-to-end model: configuration, forward pass, training loop, inference,
// and on-disk datasets and detections.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "heightformer/bev.hpp"
#include "heightformer/box.hpp"
#include "heightformer/errors.hpp"
#include "heightformer/frustum.hpp"
#include "heightformer/geometry.hpp"
#include "heightformer/head.hpp"
#include "heightformer/height_dmsc.hpp"
#include "heightformer/metrics.hpp"
#include "heightformer/optim.hpp"
#include "heightformer/params.hpp"
#include "heightformer/random.hpp"
#include "heightformer/render.hpp"
#include "heightformer/scene_io.hpp"
#include "heightformer/synth.hpp"

namespace hf {

struct PipelineConfig {
  std::size_t image_width = 96, image_height = 64;
  std::size_t d_model = 32;
  HeightBinSpec bins{16, -0.5, 6.0};
  bool dmsc_enabled = true;
  DmscConfig dmsc;
  BevGridSpec bev{0.0, 51.2, -25.6, 25.6, 0.8, 32};
  bool vpf_enabled = true;
  VpfConfig vpf;
  double score_thr = 0.1, nms_iou = 0.2;
  std::size_t max_dets = 128;
  LossWeights loss;
  AdamWConfig optim;
  std::size_t steps = 300;
  std::uint64_t seed = 7;
  double eval_iou = 0.5;
  std::string rope_fourth = "aas";

  /// Calls f(key, field) for every configurable field.
  template <typename Self, typename F>
  static void visit(Self& c, F&& f) {
    f("image.width", c.image_width);
    f("image.height", c.image_height);
    f("model.d_model", c.d_model);
    f("height.n_bins", c.bins.n_bins);
    f("height.min", c.bins.h_min);
    f("height.max", c.bins.h_max);
    f("dmsc.enabled", c.dmsc_enabled);
    f("dmsc.heads", c.dmsc.n_heads);
    f("dmsc.levels", c.dmsc.n_levels);
    f("dmsc.points", c.dmsc.n_points);
    f("bev.x_min", c.bev.x_min);
    f("bev.x_max", c.bev.x_max);
    f("bev.y_min", c.bev.y_min);
    f("bev.y_max", c.bev.y_max);
    f("bev.resolution", c.bev.resolution);
    f("vpf.enabled", c.vpf_enabled);
    f("vpf.patch_size", c.vpf.patch_size);
    f("vpf.heads", c.vpf.n_heads);
    f("vpf.depth", c.vpf.depth);
    f("vpf.mlp_ratio", c.vpf.mlp_ratio);
    f("head.score_thr", c.score_thr);
    f("head.nms_iou", c.nms_iou);
    f("head.max_dets", c.max_dets);
    f("loss.heatmap_weight", c.loss.heatmap);
    f("loss.regression_weight", c.loss.regression);
    f("train.lr", c.optim.lr);
    f("train.weight_decay", c.optim.weight_decay);
    f("train.beta1", c.optim.beta1);
    f("train.beta2", c.optim.beta2);
    f("train.steps", c.steps);
    f("train.seed", c.seed);
    f("eval.iou", c.eval_iou);
    f("eval.rope_fourth", c.rope_fourth);
  }

  /// Derived fields and cross-module consistency.
  void finalize() {
    dmsc.d_model = d_model;
    bev.channels = d_model;
    bins.validate();
    dmsc.validate();
    bev.validate();
    if (image_width % 4 || image_height % 4 || image_width == 0 || image_height == 0) {
      throw ConfigError("image dims must be positive multiples of 4");
    }
    if (vpf.patch_size == 0 || bev.cells_x() % vpf.patch_size || bev.cells_y() % vpf.patch_size) {
      throw ConfigError("bev grid not divisible by vpf.patch_size");
    }
    if ((d_model * vpf.patch_size * vpf.patch_size) % vpf.n_heads) throw ConfigError("vpf patch dim not divisible by vpf.heads");
    if (!(nms_iou > 0.0 && nms_iou < 1.0)) throw ConfigError("head.nms_iou must lie in (0, 1)");
    if (!(eval_iou > 0.0 && eval_iou <= 1.0)) throw ConfigError("eval.iou must lie in (0, 1]");
    fourth();
  }

  FourthComponent fourth() const {
    if (rope_fourth == "aas") return FourthComponent::AreaSimilarity;
    if (rope_fourth == "ags") return FourthComponent::GroundPointSimilarity;
    throw ConfigError("eval.rope_fourth must be \"aas\" or \"ags\"");
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    visit(*this, [&](const char* key, const auto& v) { j[key] = v; });
    return j;
  }

  /// Overrides defaults from a flat object of dotted keys; unknown keys and
  /// mistyped values are rejected.
  static PipelineConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    PipelineConfig c;
    std::size_t used = 0;
    visit(c, [&](const char* key, auto& v) {
      auto it = j.find(key);
      if (it == j.end()) return;
      ++used;
      using T = std::decay_t<decltype(v)>;
      const bool ok = std::is_same_v<T, bool>          ? it->is_boolean()
                      : std::is_same_v<T, std::string> ? it->is_string()
                      : std::is_floating_point_v<T>    ? it->is_number()
                                                       : it->is_number_unsigned() || (it->is_number_integer() && it->template get<long long>() >= 0);
      if (!ok) throw ConfigError(std::string("config key '") + key + "' has the wrong type");
      v = it->template get<T>();
    });
    if (used != j.size()) {
      for (const auto& [k, _] : j.items()) {
        bool known = false;
        visit(c, [&](const char* key, auto&) { known = known || k == key; });
        if (!known) throw ConfigError("unknown config key '" + k + "'");
      }
    }
    c.finalize();
    return c;
  }

  static PipelineConfig load(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
    return from_json(j);
  }

  SyntheticSceneSpec synth_spec(std::uint64_t scene_seed) const {
    SyntheticSceneSpec s;
    s.seed = scene_seed;
    s.image_width = image_width;
    s.image_height = image_height;
    s.bev = bev;
    return s;
  }
};

// ------------------------------------------------------------------ scenes

/// Everything the model needs for one scene, precomputed once.
struct SceneSample {
  std::string name;
  Tensor image;  // 3 x H x W in [0, 1]
  CameraIntrinsics intrinsics;
  VirtualCameraFrame frame;
  FrustumGrid grid;
  std::vector<EgoLabel> labels;
  DetectionTargets targets;

  std::vector<LabeledBox> gt_boxes() const {
    std::vector<LabeledBox> out;
    for (const auto& l : labels) out.push_back(l.labeled);
    return out;
  }
  std::vector<EvalGt> eval_gts() const {
    std::vector<EvalGt> out;
    for (const auto& l : labels) out.push_back({l.labeled, difficulty_bin(l.occlusion)});
    return out;
  }
};

inline SceneSample make_sample(const PipelineConfig& cfg, const SceneAnnotation& a, const Image8& image) {
  if (image.width != cfg.image_width || image.height != cfg.image_height) {
    throw DimensionError("scene " + a.name + ": image is " + std::to_string(image.width) + "x" +
                         std::to_string(image.height) + ", config expects " + std::to_string(cfg.image_width) + "x" +
                         std::to_string(cfg.image_height));
  }
  SceneSample s;
  s.name = a.name;
  s.image = image_to_tensor(image);
  s.intrinsics = a.intrinsics;
  s.frame = a.frame();
  constexpr std::size_t stride = 4;
  s.grid = frustum_to_ego(cfg.bins, s.frame, stride, cfg.image_height / stride, cfg.image_width / stride);
  s.labels = gt_to_ego_boxes(a.labels, s.frame).boxes;
  s.targets = encode_targets(s.gt_boxes(), cfg.bev);
  return s;
}

inline SceneSample load_sample(const PipelineConfig& cfg, const std::filesystem::path& dir) {
  const SceneAnnotation a = load_annotation(dir);
  const Image8 img = parse_file(dir / kImageFile, [](const std::string& t) { return decode_ppm(t); });
  return make_sample(cfg, a, img);
}

inline std::vector<SceneSample> load_dataset(const PipelineConfig& cfg, const std::filesystem::path& dir) {
  std::vector<SceneSample> out;
  for (const auto& d : list_scene_dirs(dir)) out.push_back(load_sample(cfg, d));
  if (out.empty()) throw Error("no scenes under " + dir.string());
  return out;
}

/// Scenes 0 .. count-1 of the synthetic dataset for `seed`.
inline std::vector<SyntheticScene> synthesize(const PipelineConfig& cfg, std::uint64_t seed, std::size_t count) {
  std::vector<SyntheticScene> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(cfg.synth_spec(scene_seed(seed, i)), scene_name(i)));
  return out;
}

// ------------------------------------------------------------------- model

struct ForwardResult {
  FeatureMap context;
  HeightPrediction height;
  FeatureMap fused;
  BevFeatureMap pooled;
  BevFeatureMap bev;
  HeadOutput head;
};

/// Typical car box as the regression prior: centered in the cell, on the
/// ground, heading along x.
inline std::array<double, kRegressionChannels> regression_prior() {
  return {0.5, 0.5, 0.75, std::log(4.3), std::log(1.8), std::log(1.55), 0.0, 1.0};
}

class Model {
 public:
  explicit Model(PipelineConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.finalize();
    // one stream per module, so shared modules initialize identically
    // whichever optional blocks are enabled
    auto stream = [&](std::uint64_t k) { return Rng(cfg_.seed * 0x9E3779B97F4A7C15ULL + k); };
    Rng r1 = stream(1), r2 = stream(2), r3 = stream(3), r4 = stream(4), r5 = stream(5), r6 = stream(6);
    init_backbone(params_, r1, cfg_.d_model);
    init_camera_modulation(params_, r2, cfg_.d_model);
    init_height_net(params_, r3, cfg_.d_model, cfg_.bins.n_bins);
    if (cfg_.dmsc_enabled) init_dmsc(params_, r4, cfg_.dmsc, cfg_.bins.n_bins);
    if (cfg_.vpf_enabled) init_vpf(params_, r5, cfg_.bev, cfg_.vpf);
    init_head(params_, r6, cfg_.d_model, kNumCategories, regression_prior());
  }

  const PipelineConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  ForwardResult forward(Tape& tape, const SceneSample& s) const {
    ForwardResult r;
    FeatureMap base = backbone_forward(tape, s.image, params_);
    r.context = camera_modulation(tape, base, s.intrinsics, cfg_.image_width, cfg_.image_height, params_);
    r.height = height_net_forward(tape, r.context, cfg_.bins, params_);
    r.fused = cfg_.dmsc_enabled ? dmsc_forward(tape, r.context, r.height, cfg_.dmsc, params_).fused : r.context;
    Tensor lifted = outer_product_lift(tape, r.fused, r.height);
    r.pooled = voxel_pool(tape, build_point_cloud(tape, lifted, s.grid), cfg_.bev);
    r.bev = cfg_.vpf_enabled ? vpf_forward(tape, r.pooled, cfg_.vpf, params_) : r.pooled;
    r.head = head_forward(tape, r.bev, params_);
    return r;
  }

  Tensor loss(Tape& tape, const SceneSample& s) const {
    return detection_loss(tape, forward(tape, s).head, s.targets, cfg_.loss);
  }

  std::vector<Detection> detect(const SceneSample& s) const {
    Tape tape;
    const ForwardResult r = forward(tape, s);
    return rotated_nms(decode_boxes(r.head, cfg_.bev, cfg_.max_dets, cfg_.score_thr), cfg_.nms_iou);
  }

  void save(const std::filesystem::path& path) const { params_.save(path); }
  void load(const std::filesystem::path& path) { params_.load(path); }

 private:
  PipelineConfig cfg_;
  ParameterStore params_;
};

/// Loss on every scene without recording gradients.
inline std::vector<double> evaluate_losses(const Model& m, const std::vector<SceneSample>& scenes) {
  std::vector<double> out;
  for (const auto& s : scenes) {
    Tape tape;
    out.push_back(m.loss(tape, s).item());
  }
  return out;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

struct TrainLog {
  std::vector<double> step_losses;
};

/// One scene per step, cycling through the scenes in order.
inline TrainLog train(Model& m, const std::vector<SceneSample>& scenes, std::size_t steps,
                      const std::function<void(std::size_t, double)>& on_step = {}) {
  if (scenes.empty()) throw ContractError("train: no scenes");
  AdamW opt(m.params(), m.config().optim);
  TrainLog log;
  for (std::size_t step = 0; step < steps; ++step) {
    Tape tape;
    m.params().zero_grad();
    Tensor loss = m.loss(tape, scenes[step % scenes.size()]);
    if (auto bad = tape.first_non_finite()) throw Error("non-finite value in " + *bad + " at step " + std::to_string(step));
    tape.backward(loss);
    opt.step();
    log.step_losses.push_back(loss.item());
    if (on_step) on_step(step, loss.item());
  }
  return log;
}

// -------------------------------------------------------------- detections

struct SceneDetections {
  std::string scene;
  std::vector<Detection> detections;
};

/// One JSON object per line: {scene, class, score, box: [cx, cy, cz, L, W, H, yaw]}.
inline std::string serialize_detections(const std::vector<SceneDetections>& all) {
  std::string out;
  for (const auto& sd : all) {
    for (const auto& d : sd.detections) {
      const Box3D& b = d.box;
      nlohmann::json j = {{"scene", sd.scene},
                          {"class", category_name(d.category)},
                          {"score", d.score},
                          {"box", {b.cx, b.cy, b.cz, b.length, b.width, b.height, b.yaw}}};
      out += j.dump() + '\n';
    }
  }
  return out;
}

/// Detections grouped by scene, in order of first appearance.
inline std::vector<SceneDetections> parse_detections(std::string_view text) {
  std::vector<SceneDetections> out;
  for (const auto& [n, line] : io::content_lines(text)) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      const auto cls = category_from_name(j.at("class").get<std::string>());
      if (!cls) throw ParseError("unknown class " + j.at("class").dump(), n);
      const auto box = j.at("box").get<std::vector<double>>();
      if (box.size() != 7) throw ParseError("box needs 7 values", n);
      Detection d{{box[0], box[1], box[2], box[3], box[4], box[5], box[6]}, *cls, j.at("score").get<double>()};
      const std::string scene = j.value("scene", std::string());
      auto it = std::find_if(out.begin(), out.end(), [&](const SceneDetections& s) { return s.scene == scene; });
      if (it == out.end()) {
        out.push_back({scene, {}});
        it = std::prev(out.end());
      }
      it->detections.push_back(d);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), n);
    }
  }
  return out;
}

/// Pairs detections with ground truth by scene name; a scene with no
/// detections has none. Detections for unknown scenes are an error.
inline std::vector<EvalScene> pair_for_eval(const std::vector<SceneDetections>& dets,
                                            const std::vector<std::pair<std::string, std::vector<EvalGt>>>& gts) {
  std::vector<EvalScene> out;
  for (const auto& [name, g] : gts) {
    EvalScene s;
    s.gts = g;
    for (const auto& d : dets) {
      if (d.scene == name) s.preds.insert(s.preds.end(), d.detections.begin(), d.detections.end());
    }
    out.push_back(std::move(s));
  }
  for (const auto& d : dets) {
    const bool known = std::any_of(gts.begin(), gts.end(), [&](const auto& g) { return g.first == d.scene; });
    if (!known) throw Error("detections reference unknown scene '" + d.scene + "'");
  }
  return out;
}

}  // namespace hf
