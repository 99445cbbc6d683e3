#include "commands.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <string>

namespace {

using namespace unibev;
using namespace unibev::cli;

void add_setting(CLI::App* cmd, std::string& setting) {
  cmd->add_option("--setting", setting, "evaluation setting")
      ->check(CLI::IsMember(setting_names()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unified multi-view BEV fusion toolkit"};
  app.require_subcommand(1);

  GenOptions gen;
  std::string layout = "straight";
  auto* c_gen = app.add_subcommand("gen", "generate synthetic scenes with frames and labels");
  c_gen->add_option("--seed", gen.seed, "scene seed (scene k uses seed + k)");
  c_gen->add_option("--count", gen.count, "number of scenes");
  add_setting(c_gen, gen.setting);
  c_gen->add_option("--layout", layout, "straight, curved or crossing");
  c_gen->add_option("--lanes", gen.params.num_lanes, "travel lanes");
  c_gen->add_option("--steps", gen.params.num_steps, "trajectory length");
  c_gen->add_option("--speed", gen.params.speed, "meters per step");
  c_gen->add_option("--occluders", gen.params.num_occluders, "occluder boxes");
  c_gen->add_option("--occluder-steps", gen.params.occluder_active_steps, "final steps with occluders active");
  c_gen->add_option("--occluder-flicker", gen.params.occluder_flicker, "occluder probability on earlier steps");
  c_gen->add_option("--width", gen.params.image_width, "image width (multiple of 32)");
  c_gen->add_option("--height", gen.params.image_height, "image height (multiple of 32)");
  c_gen->add_option("--out", gen.out, "output root")->required();

  TrainOptions tr;
  std::string tr_mode = "unified", tr_region = "full";
  auto* c_train = app.add_subcommand("train", "train a model on generated scenes");
  c_train->add_option("--data", tr.data, "scene directory or root of scenes")->required();
  c_train->add_option("--val-data", tr.val_data, "validation scenes");
  add_setting(c_train, tr.setting);
  c_train->add_option("--region", tr_region, "full, easy or hard")->check(CLI::IsMember({"full", "easy", "hard"}));
  c_train->add_option("--p-train", tr.train.p_train, "temporal depth during training");
  c_train->add_option("--p-infer", tr.train.p_infer, "temporal depth for validation");
  c_train->add_option("--layers", tr.layers, "transformer layers N");
  c_train->add_option("--channels", tr.channels, "feature width C");
  c_train->add_option("--self-regression", tr.self_regression, "rerun the transformer on [output, queries]");
  c_train->add_option("--fusion-mode", tr_mode, "unified, equal_weight or no_temporal");
  c_train->add_option("--epochs", tr.train.epochs, "training epochs");
  c_train->add_option("--lr", tr.train.learning_rate, "learning rate");
  c_train->add_option("--weight-decay", tr.train.weight_decay, "decoupled weight decay");
  c_train->add_option("--lr-drop-epoch", tr.train.lr_drop_epoch, "epoch from which lr is scaled by 0.1");
  c_train->add_option("--bg-weight", tr.loss.background_weight, "background class loss weight");
  c_train->add_option("--seed", tr.train.seed, "initialization and shuffling seed");
  c_train->add_option("--out", tr.out, "checkpoint directory")->required();

  InferOptions inf;
  std::string inf_mode = "unified";
  auto* c_infer = app.add_subcommand("infer", "predict label grids for a scene");
  c_infer->add_option("--checkpoint", inf.checkpoint, "checkpoint directory")->required();
  c_infer->add_option("--scene", inf.scene, "scene directory")->required();
  c_infer->add_option("--step", inf.step, "step to predict (default: all)");
  c_infer->add_option("--p-infer", inf.p_infer, "temporal depth");
  c_infer->add_option("--fusion-mode", inf_mode, "unified, equal_weight or no_temporal");
  add_setting(c_infer, inf.setting);
  c_infer->add_option("--out", inf.out, "prediction directory")->required();

  EvalOptions ev;
  std::string ev_region = "full";
  auto* c_eval = app.add_subcommand("eval", "mIoU of predictions against ground truth");
  c_eval->add_option("--pred", ev.pred, "prediction directory")->required();
  c_eval->add_option("--gt", ev.gt, "ground-truth label directory")->required();
  add_setting(c_eval, ev.setting);
  c_eval->add_option("--region", ev_region, "full, easy or hard")->check(CLI::IsMember({"full", "easy", "hard"}));
  c_eval->add_option("--out", ev.out, "metrics directory");

  CoverageOptions cov;
  auto* c_cov = app.add_subcommand("coverage", "unified vs warp fusion footprint per P");
  c_cov->add_option("--scene", cov.scene, "scene directory")->required();
  c_cov->add_option("--p-max", cov.p_max, "largest P");
  c_cov->add_option("--step", cov.step, "current step (default: last)");
  add_setting(c_cov, cov.setting);
  c_cov->add_option("--out", cov.out, "CSV path (default: stdout)");

  int vr_res = 1600, vr_n = 32;
  double vr_fov = 70.0, vr_lane = 3.0;
  auto* c_vr = app.add_subcommand("visible-range", "focal length and visible limit");
  c_vr->add_option("resolution", vr_res, "image resolution in pixels")->required();
  c_vr->add_option("fov", vr_fov, "field of view in degrees")->required();
  c_vr->add_option("n_pixel", vr_n, "pixels a lane must cover")->required();
  c_vr->add_option("lane_width", vr_lane, "lane width in meters")->required();

  PlotOptions plot;
  auto* c_plot = app.add_subcommand("plot", "write PPM/PGM figures");
  c_plot->add_option("--pred", plot.pred, "predicted label grid");
  c_plot->add_option("--gt", plot.gt, "ground-truth label grid");
  c_plot->add_option("--image", plot.image, "rendered frame");
  c_plot->add_option("--prob", plot.prob, "class-probability grid");
  c_plot->add_option("--class", plot.class_id, "class channel for --prob");
  c_plot->add_option("--out", plot.out, "output image")->required();

  std::string split_data, split_out;
  auto* c_split = app.add_subcommand("split", "city-based train/val split of scenes");
  c_split->add_option("--data", split_data, "root of scenes")->required();
  c_split->add_option("--out", split_out, "split manifest JSON (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "unibev: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*c_gen) {
      gen.params.layout = parse_layout(layout);
      for (const auto& d : cmd_gen(gen)) std::cout << d << "\n";
    } else if (*c_train) {
      tr.train.mode = parse_fusion_mode(tr_mode);
      tr.region = parse_region(tr_region);
      const TrainResult r = cmd_train(tr, &std::cout);
      std::cout << "checkpoint " << r.checkpoint << "\n";
    } else if (*c_infer) {
      inf.mode = parse_fusion_mode(inf_mode);
      for (const auto& p : cmd_infer(inf)) std::cout << p << "\n";
    } else if (*c_eval) {
      ev.region = parse_region(ev_region);
      const EvalSummary s = cmd_eval(ev);
      for (std::size_t k = 0; k < s.overall.iou.size(); ++k) {
        std::cout << s.overall.class_names[k] << ","
                  << (std::isnan(s.overall.iou[k]) ? std::string("nan") : fmt4(s.overall.iou[k])) << "\n";
      }
      std::cout << "mean," << fmt4(s.overall.mean) << "\n";
    } else if (*c_cov) {
      if (cov.out.empty()) {
        cmd_coverage(cov, std::cout);
      } else {
        std::ofstream f(cov.out);
        if (!f) throw std::runtime_error("cannot write " + cov.out);
        cmd_coverage(cov, f);
      }
    } else if (*c_vr) {
      const double f = focal_from_fov(vr_res, vr_fov);
      std::cout << "focal," << fmt4(f) << "\n" << "visible_limit," << fmt4(visible_limit(f, vr_n, vr_lane)) << "\n";
    } else if (*c_plot) {
      cmd_plot(plot);
    } else if (*c_split) {
      std::vector<SceneLocation> scenes;
      for (const auto& d : list_scene_dirs(split_data)) {
        scenes.push_back({std::filesystem::path(d).filename().string(), read_scene(d).location});
      }
      const nlohmann::json j = split_to_json(city_split(scenes));
      if (split_out.empty()) std::cout << j.dump(2) << "\n";
      else write_json_file(split_out, j);
    }
  } catch (const std::exception& e) {
    std::cerr << "unibev: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
