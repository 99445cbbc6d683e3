#include "../tools/commands.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace unibev;
using namespace unibev::cli;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& s) const { return (path / s).string(); }
};

std::string slurp(const std::string& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Cli, FormattingHelpers) {
  EXPECT_EQ(fmt4(0.5), "0.5000");
  EXPECT_EQ(fmt4(1142.4814), "1142.4814");
  EXPECT_EQ(step_name(7), "step_007");
  EXPECT_EQ(frame_file(3, 2), "step_003_cam_2.ubt");
}

TEST(Cli, PipelineWritesExpectedArtifacts) {
  TempDir tmp("unibev_cli_test");
  GenOptions gen;
  gen.seed = 3;
  gen.count = 2;
  gen.params.num_steps = 3;
  gen.params.image_width = 64;
  gen.params.image_height = 32;
  gen.out = tmp / "data";
  const auto dirs = cmd_gen(gen);
  ASSERT_EQ(dirs.size(), 2u);
  EXPECT_TRUE(fs::exists(fs::path(dirs[1]) / "frames" / "step_002_cam_5.ubt"));
  const Tensor<float> lab = read_ubt1((fs::path(dirs[0]) / "labels" / "step_001.ubt").string());
  EXPECT_EQ(lab.shape, (std::vector<std::size_t>{64, 32}));
  EXPECT_EQ(read_json_file((fs::path(dirs[0]) / "scene.json").string())["setting"], "desk");

  TrainOptions tr;
  tr.data = tmp / "data";
  tr.val_data = dirs[1];
  tr.out = tmp / "ckpt";
  tr.channels = 4;
  tr.layers = 1;
  tr.train.epochs = 1;
  std::ostringstream log;
  cmd_train(tr, &log);
  EXPECT_NE(log.str().find("epoch 1 loss"), std::string::npos);
  const auto rec = read_json_file(tmp / "ckpt/record.json");
  EXPECT_EQ(rec["epochs"].size(), 1u);
  EXPECT_TRUE(rec["epochs"][0]["miou"].contains("desk"));
  EXPECT_TRUE(fs::exists(tmp / "ckpt/index.json"));

  InferOptions inf;
  inf.checkpoint = tmp / "ckpt";
  inf.scene = dirs[1];
  inf.out = tmp / "pred";
  inf.p_infer = 2;
  EXPECT_EQ(cmd_infer(inf).size(), 3u);
  const Tensor<float> prob = read_ubt1(tmp / "pred/prob/step_002.ubt");
  EXPECT_EQ(prob.shape, (std::vector<std::size_t>{64, 32, 3}));
  EXPECT_NEAR(prob[0] + prob[1] + prob[2], 1.0f, 1e-5f);

  EvalOptions ev;
  ev.pred = tmp / "pred";
  ev.gt = (fs::path(dirs[1]) / "labels").string();
  ev.out = tmp / "metrics";
  const EvalSummary s = cmd_eval(ev);
  EXPECT_EQ(s.frames.size(), 3u);
  const std::string csv = slurp(tmp / "metrics/metrics.csv");
  EXPECT_EQ(csv.rfind("frame_id,class,iou\nstep_000,divider,", 0), 0u);
  EXPECT_EQ(read_json_file(tmp / "metrics/summary.json")["frames"], 3);

  // Evaluating ground truth against itself is perfect.
  ev.pred = ev.gt;
  ev.out.clear();
  EXPECT_EQ(cmd_eval(ev).overall.mean, 1.0);

  CoverageOptions cov;
  cov.scene = dirs[0];
  cov.p_max = 2;
  std::ostringstream cs;
  const auto rows = cmd_coverage(cov, cs);
  EXPECT_EQ(rows.size(), 3u);
  EXPECT_EQ(cs.str().rfind("P,unified,warp\n0,", 0), 0u);

  PlotOptions plot;
  plot.gt = (fs::path(dirs[1]) / "labels" / "step_000.ubt").string();
  plot.pred = tmp / "pred/step_000.ubt";
  plot.out = tmp / "fig.ppm";
  cmd_plot(plot);
  EXPECT_EQ(slurp(tmp / "fig.ppm").rfind("P6\n", 0), 0u);
}

TEST(Cli, ErrorsAreDescriptive) {
  TempDir tmp("unibev_cli_err");
  EXPECT_THROW(list_scene_dirs(tmp / "missing"), std::invalid_argument);
  EXPECT_THROW(list_scene_dirs(tmp.path.string()), std::invalid_argument);
  EvalOptions ev;
  ev.pred = tmp.path.string();
  ev.gt = tmp.path.string();
  EXPECT_THROW(cmd_eval(ev), std::invalid_argument);
  GenOptions gen;
  EXPECT_THROW(cmd_gen(gen), std::invalid_argument);
}
