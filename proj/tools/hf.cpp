// hf: synthesize scenes, train, run inference, evaluate, and render BEV views.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "heightformer/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kUsageError = 1;
constexpr int kDataError = 2;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t count = 20;
  std::string scenes, out, model, preds, gts, classes;
  std::optional<std::size_t> steps;
  std::optional<double> lr, iou;
};

hf::PipelineConfig load_config(const Options& o) {
  nlohmann::json j = nlohmann::json::object();
  if (!o.config.empty()) {
    try {
      j = nlohmann::json::parse(hf::io::read_file(o.config));
    } catch (const nlohmann::json::parse_error& e) {
      throw hf::ConfigError(o.config + ": " + e.what());
    }
  }
  if (o.seed) j["train.seed"] = *o.seed;
  if (o.steps) j["train.steps"] = *o.steps;
  if (o.lr) j["train.lr"] = *o.lr;
  if (o.iou) j["eval.iou"] = *o.iou;
  return hf::PipelineConfig::from_json(j);
}

std::vector<hf::Category> parse_classes(const std::string& list) {
  if (list.empty()) return {hf::Category::Car, hf::Category::BigVehicle, hf::Category::Cyclist};
  std::vector<hf::Category> out;
  std::stringstream ss(list);
  std::string name;
  while (std::getline(ss, name, ',')) {
    const auto c = hf::category_from_name(name);
    if (!c) throw hf::ConfigError("unknown class '" + name + "'");
    out.push_back(*c);
  }
  return out;
}

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
  } else {
    hf::io::write_file(path, text);
  }
}

int run_synth(const Options& o) {
  const auto cfg = load_config(o);
  fs::create_directories(o.out);
  const auto scenes = hf::synthesize(cfg, cfg.seed, o.count);
  for (const auto& s : scenes) hf::save_scene(s, fs::path(o.out) / s.annotation.name);
  std::cout << "wrote " << scenes.size() << " scenes to " << o.out << "\n";
  return 0;
}

int run_train(const Options& o) {
  const auto cfg = load_config(o);
  const auto data = hf::load_dataset(cfg, o.scenes);
  hf::Model model(cfg);
  const double initial = hf::mean(hf::evaluate_losses(model, data));
  hf::train(model, data, cfg.steps, [&](std::size_t step, double loss) {
    if ((step + 1) % 50 == 0 || step + 1 == cfg.steps) std::cout << "step " << step + 1 << " loss " << loss << "\n";
  });
  const double final_loss = hf::mean(hf::evaluate_losses(model, data));
  model.save(o.out);
  std::cout << "mean loss " << initial << " -> " << final_loss << "; model written to " << o.out << "\n";
  return 0;
}

int run_infer(const Options& o) {
  const auto cfg = load_config(o);
  const auto data = hf::load_dataset(cfg, o.scenes);
  hf::Model model(cfg);
  model.load(o.model);
  std::vector<hf::SceneDetections> all;
  for (const auto& s : data) all.push_back({s.name, model.detect(s)});
  write_or_print(o.out, hf::serialize_detections(all));
  return 0;
}

std::vector<std::pair<std::string, std::vector<hf::EvalGt>>> load_gts(const fs::path& dir) {
  std::vector<std::pair<std::string, std::vector<hf::EvalGt>>> out;
  for (const auto& d : hf::list_scene_dirs(dir)) {
    const auto a = hf::load_annotation(d);
    std::vector<hf::EvalGt> gts;
    for (const auto& l : hf::gt_to_ego_boxes(a.labels, a.frame()).boxes) {
      gts.push_back({l.labeled, hf::difficulty_bin(l.occlusion)});
    }
    out.emplace_back(a.name, std::move(gts));
  }
  return out;
}

int run_eval(const Options& o) {
  const auto cfg = load_config(o);
  const auto dets = hf::parse_detections(hf::io::read_file(o.preds));
  hf::EvalOptions opt;
  opt.iou_thr = cfg.eval_iou;
  opt.classes = parse_classes(o.classes);
  opt.fourth = cfg.fourth();
  const auto report = hf::evaluate(hf::pair_for_eval(dets, load_gts(o.gts)), opt);
  write_or_print(o.out, report.dump(2) + "\n");
  return 0;
}

int run_render(const Options& o) {
  const auto cfg = load_config(o);
  fs::create_directories(o.out);
  std::optional<hf::Model> model;
  if (!o.model.empty()) {
    model.emplace(cfg);
    model->load(o.model);
  }
  std::vector<hf::SceneDetections> dets;
  if (!o.preds.empty()) dets = hf::parse_detections(hf::io::read_file(o.preds));
  for (const auto& d : hf::list_scene_dirs(o.scenes)) {
    const auto s = hf::load_sample(cfg, d);
    std::vector<hf::Detection> shown;
    std::optional<hf::BevFeatureMap> bev;
    for (const auto& sd : dets) {
      if (sd.scene == s.name) shown.insert(shown.end(), sd.detections.begin(), sd.detections.end());
    }
    if (model) {
      hf::Tape tape;
      const auto r = model->forward(tape, s);
      bev = r.bev;
      if (o.preds.empty()) shown = hf::rotated_nms(hf::decode_boxes(r.head, cfg.bev, cfg.max_dets, cfg.score_thr), cfg.nms_iou);
      hf::io::write_file(fs::path(o.out) / (s.name + "_features.ppm"), hf::encode_ppm(hf::render_feature_map(*bev)));
    }
    const auto img = hf::render_detections(cfg.bev, s.gt_boxes(), shown, cfg.eval_iou, 4, bev ? &*bev : nullptr);
    hf::io::write_file(fs::path(o.out) / (s.name + "_boxes.ppm"), hf::encode_ppm(img));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Height-based monocular BEV 3D detection"};
  app.require_subcommand(1);
  Options o;

  auto* synth = app.add_subcommand("synth", "Generate synthetic scene folders");
  synth->add_option("--seed", o.seed, "Dataset seed");
  synth->add_option("--count", o.count, "Number of scenes")->check(CLI::PositiveNumber);
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--config", o.config, "Config JSON");

  auto* train = app.add_subcommand("train", "Train a model on scene folders");
  train->add_option("--scenes", o.scenes, "Scene directory")->required();
  train->add_option("--out", o.out, "Model JSON to write")->required();
  train->add_option("--steps", o.steps, "Optimizer steps");
  train->add_option("--lr", o.lr, "Learning rate (default 2e-4)");
  train->add_option("--seed", o.seed, "Initialization seed");
  train->add_option("--config", o.config, "Config JSON");

  auto* infer = app.add_subcommand("infer", "Write detections as JSON lines");
  infer->add_option("--scenes", o.scenes, "Scene directory")->required();
  infer->add_option("--model", o.model, "Model JSON")->required();
  infer->add_option("--out", o.out, "Detections file (stdout if omitted)");
  infer->add_option("--config", o.config, "Config JSON");

  auto* eval = app.add_subcommand("eval", "Evaluate detections against labels");
  eval->add_option("--preds", o.preds, "Detections JSON lines")->required();
  eval->add_option("--gts", o.gts, "Scene directory with labels")->required();
  eval->add_option("--iou", o.iou, "3D IoU threshold");
  eval->add_option("--classes", o.classes, "Comma-separated classes");
  eval->add_option("--out", o.out, "Report file (stdout if omitted)");
  eval->add_option("--config", o.config, "Config JSON");

  auto* render = app.add_subcommand("render-bev", "Render BEV features and boxes as PPM");
  render->add_option("--scenes", o.scenes, "Scene directory")->required();
  render->add_option("--out", o.out, "Output directory")->required();
  render->add_option("--model", o.model, "Model JSON (adds features and its detections)");
  render->add_option("--preds", o.preds, "Detections JSON lines");
  render->add_option("--config", o.config, "Config JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*synth) return run_synth(o);
    if (*train) return run_train(o);
    if (*infer) return run_infer(o);
    if (*eval) return run_eval(o);
    if (*render) return run_render(o);
  } catch (const hf::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  }
  return kUsageError;
}
