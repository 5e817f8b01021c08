#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "heightformer/pipeline.hpp"
#include "test_util.hpp"

namespace hf {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code;
  std::string output;
};

Run hf_cli(const std::string& args, const fs::path& work) {
  const fs::path log = work / "cli.log";
  const std::string cmd = std::string(HF_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, fs::exists(log) ? io::read_file(log) : ""};
}

std::string dir_digest(const fs::path& dir) {
  std::string all;
  for (const auto& d : list_scene_dirs(dir)) {
    for (const char* f : {kLabelFile, kCalibFile, kGroundFile, kImageFile}) all += io::read_file(d / f);
  }
  return all;
}

TEST(Cli, SynthIsDeterministic) {
  const auto w = test::scratch_dir("cli_synth");
  ASSERT_EQ(hf_cli("synth --seed 7 --count 20 --out " + (w / "a").string(), w).code, 0);
  ASSERT_EQ(hf_cli("synth --seed 7 --count 20 --out " + (w / "b").string(), w).code, 0);
  EXPECT_EQ(list_scene_dirs(w / "a").size(), 20u);
  EXPECT_EQ(dir_digest(w / "a"), dir_digest(w / "b"));
  ASSERT_EQ(hf_cli("synth --seed 8 --count 20 --out " + (w / "c").string(), w).code, 0);
  EXPECT_NE(dir_digest(w / "a"), dir_digest(w / "c"));
}

TEST(Cli, TrainInferEvalRender) {
  const auto w = test::scratch_dir("cli_pipeline");
  const std::string scenes = (w / "scenes").string();
  ASSERT_EQ(hf_cli("synth --seed 3 --count 2 --out " + scenes, w).code, 0);
  const auto tr = hf_cli("train --scenes " + scenes + " --steps 3 --out " + (w / "model.json").string(), w);
  ASSERT_EQ(tr.code, 0) << tr.output;
  EXPECT_NE(tr.output.find("mean loss"), std::string::npos);
  const auto model = nlohmann::json::parse(io::read_file(w / "model.json"));
  EXPECT_TRUE(model.is_object());

  const auto inf = hf_cli("infer --scenes " + scenes + " --model " + (w / "model.json").string() + " --out " +
                              (w / "preds.jsonl").string(),
                          w);
  ASSERT_EQ(inf.code, 0) << inf.output;
  EXPECT_NO_THROW(parse_detections(io::read_file(w / "preds.jsonl")));

  const auto ev = hf_cli("eval --preds " + (w / "preds.jsonl").string() + " --gts " + scenes + " --iou 0.5 --out " +
                             (w / "report.json").string(),
                         w);
  ASSERT_EQ(ev.code, 0) << ev.output;
  const auto report = nlohmann::json::parse(io::read_file(w / "report.json"));
  EXPECT_TRUE(report["Car"]["Overall"].contains("ap_r40"));

  const auto rb = hf_cli("render-bev --scenes " + scenes + " --model " + (w / "model.json").string() + " --out " +
                             (w / "render").string(),
                         w);
  ASSERT_EQ(rb.code, 0) << rb.output;
  const std::string ppm = io::read_file(w / "render" / "scene_0000_boxes.ppm");
  EXPECT_EQ(ppm.substr(0, 13), "P6\n256 256\n25");
  EXPECT_TRUE(fs::exists(w / "render" / "scene_0001_features.ppm"));
}

TEST(Cli, PerfectPredictionsScoreOne) {
  const auto w = test::scratch_dir("cli_perfect");
  const std::string scenes = (w / "scenes").string();
  ASSERT_EQ(hf_cli("synth --seed 11 --count 3 --out " + scenes, w).code, 0);
  std::vector<SceneDetections> all;
  for (const auto& d : list_scene_dirs(scenes)) {
    const auto a = load_annotation(d);
    SceneDetections sd{a.name, {}};
    for (const auto& l : gt_to_ego_boxes(a.labels, a.frame()).boxes) sd.detections.push_back({l.labeled.box, l.labeled.category, 1.0});
    all.push_back(sd);
  }
  io::write_file(w / "preds.jsonl", serialize_detections(all));
  const auto ev = hf_cli("eval --preds " + (w / "preds.jsonl").string() + " --gts " + scenes + " --iou 0.5 --out " +
                             (w / "report.json").string(),
                         w);
  ASSERT_EQ(ev.code, 0) << ev.output;
  const auto report = nlohmann::json::parse(io::read_file(w / "report.json"));
  EXPECT_EQ(report["Car"]["Overall"]["ap_r40"].get<double>(), 1.0);
  EXPECT_EQ(report["Car"]["Overall"]["rope_score"].get<double>(), 1.0);
  EXPECT_EQ(report["Big_vehicle"]["Overall"]["ap_r40"].get<double>(), 1.0);
}

TEST(Cli, ExitCodes) {
  const auto w = test::scratch_dir("cli_errors");
  const auto unknown = hf_cli("synth --out " + (w / "x").string() + " --bogus 1", w);
  EXPECT_EQ(unknown.code, 1);
  EXPECT_FALSE(unknown.output.empty());
  EXPECT_EQ(hf_cli("", w).code, 1);
  EXPECT_EQ(hf_cli("frobnicate", w).code, 1);
  EXPECT_EQ(hf_cli("train --out m.json", w).code, 1);
  EXPECT_EQ(hf_cli("--help", w).code, 0);
  io::write_file(w / "bad.json", "{\"train.stepz\": 1}");
  EXPECT_EQ(hf_cli("synth --count 1 --out " + (w / "y").string() + " --config " + (w / "bad.json").string(), w).code, 1);
  EXPECT_EQ(hf_cli("train --scenes " + (w / "missing").string() + " --out m.json", w).code, 2);
  io::write_file(w / "preds.jsonl", "garbage\n");
  fs::create_directories(w / "gts");
  EXPECT_EQ(hf_cli("eval --preds " + (w / "preds.jsonl").string() + " --gts " + (w / "gts").string(), w).code, 2);
}

}  // namespace
}  // namespace hf
