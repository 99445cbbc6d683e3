#pragma once

// Command implementations behind the `unibev` executable. Each command reads
// and writes plain files: scene.json, UBT1 tensors, CSV/JSON metrics and
// PPM/PGM images.

#include "unibev/coverage.hpp"
#include "unibev/evalkit.hpp"
#include "unibev/geometry.hpp"
#include "unibev/simulator.hpp"
#include "unibev/tensor.hpp"
#include "unibev/training.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <locale>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace unibev::cli {

namespace fs = std::filesystem;

/// Fixed 4-decimal formatting with '.' as separator regardless of locale.
inline std::string fmt4(double v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

inline std::string step_name(int step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%03d", step);
  return buf;
}

inline std::string frame_file(int step, int camera) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "step_%03d_cam_%d.ubt", step, camera);
  return buf;
}

// Label grids and images as UBT1 tensors.

inline void write_labels(const std::string& path, const LabelGrid& g) {
  std::vector<float> v(g.labels.begin(), g.labels.end());
  write_ubt1(path, {static_cast<std::size_t>(g.height), static_cast<std::size_t>(g.width)}, v);
}

inline LabelGrid read_labels(const std::string& path, const EvalSetting& setting) {
  const Tensor<float> t = read_ubt1(path);
  LabelGrid g = LabelGrid::for_setting(setting);
  if (t.shape.size() != 2 || t.shape[0] != static_cast<std::size_t>(g.height) ||
      t.shape[1] != static_cast<std::size_t>(g.width)) {
    throw std::runtime_error(path + ": label grid shape does not match setting " + setting.name);
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float v = t[i];
    if (!(v >= 0.0f && v < 256.0f) || v != static_cast<float>(static_cast<int>(v))) {
      throw std::runtime_error(path + ": label values must be non-negative integers");
    }
    g.labels[i] = static_cast<std::uint8_t>(v);
  }
  return g;
}

inline void write_map(const std::string& path, const FeatureMap<float>& m) {
  write_ubt1(path, {static_cast<std::size_t>(m.height), static_cast<std::size_t>(m.width),
                    static_cast<std::size_t>(m.channels)},
             m.data);
}

inline Image read_image(const std::string& path) {
  const Tensor<float> t = read_ubt1(path);
  if (t.shape.size() != 3) throw std::runtime_error(path + ": expected an H x W x C tensor");
  Image img(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]), static_cast<int>(t.shape[2]));
  img.data = t.data;
  return img;
}

// Scene directories: scene.json, frames/step_XXX_cam_K.ubt, labels/step_XXX.ubt.

struct GenOptions {
  std::uint64_t seed = 0;
  int count = 1;
  std::string setting = "desk";
  SceneParams params;
  std::string out;
};

inline std::string scene_dir_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%04d", k);
  return buf;
}

inline void write_scene_dir(const std::string& dir, const SceneSpec& scene, const EvalSetting& setting) {
  fs::create_directories(fs::path(dir) / "frames");
  fs::create_directories(fs::path(dir) / "labels");
  nlohmann::json j = scene_to_json(scene);
  j["setting"] = setting.name;
  write_json_file((fs::path(dir) / "scene.json").string(), j);
  for (int t = 0; t < scene.num_steps(); ++t) {
    const RenderedFrame f = render_frame(scene, t);
    for (std::size_t c = 0; c < f.images.size(); ++c) {
      write_map((fs::path(dir) / "frames" / frame_file(t, static_cast<int>(c))).string(), f.images[c]);
    }
    write_labels((fs::path(dir) / "labels" / (step_name(t) + ".ubt")).string(), gt_raster(scene, t, setting));
  }
}

/// Writes `count` scenes with seeds seed, seed+1, ... into out/scene_XXXX.
inline std::vector<std::string> cmd_gen(const GenOptions& o) {
  if (o.out.empty()) throw std::invalid_argument("--out is required");
  if (o.count < 1) throw std::invalid_argument("--count must be >= 1");
  const EvalSetting setting = setting_by_name(o.setting);
  std::vector<std::string> dirs;
  for (int k = 0; k < o.count; ++k) {
    const std::string dir = (fs::path(o.out) / scene_dir_name(k)).string();
    write_scene_dir(dir, gen_scene(o.seed + static_cast<std::uint64_t>(k), o.params), setting);
    dirs.push_back(dir);
  }
  return dirs;
}

inline SceneSpec read_scene(const std::string& dir) {
  return scene_from_json(read_json_file((fs::path(dir) / "scene.json").string()));
}

inline SceneData load_scene_dir(const std::string& dir, const EvalSetting& setting) {
  SceneData d;
  d.scene = read_scene(dir);
  d.rig = std::make_shared<const CameraRig>(d.scene.rig);
  for (int t = 0; t < d.scene.num_steps(); ++t) {
    std::vector<Image> cams;
    for (std::size_t c = 0; c < d.scene.rig.size(); ++c) {
      cams.push_back(read_image((fs::path(dir) / "frames" / frame_file(t, static_cast<int>(c))).string()));
    }
    d.frames.push_back(std::move(cams));
    d.labels.push_back(read_labels((fs::path(dir) / "labels" / (step_name(t) + ".ubt")).string(), setting));
  }
  return d;
}

/// A directory is either one scene (has scene.json) or a root of scene_* dirs.
inline std::vector<std::string> list_scene_dirs(const std::string& root) {
  if (!fs::is_directory(root)) throw std::invalid_argument("not a directory: " + root);
  if (fs::exists(fs::path(root) / "scene.json")) return {root};
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && fs::exists(e.path() / "scene.json")) out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw std::invalid_argument("no scenes under " + root);
  return out;
}

// Training.

struct TrainOptions {
  std::string data, val_data, out;
  std::string setting = "desk";
  RegionMode region = RegionMode::kFull;
  int channels = 16;
  int layers = 2;
  bool self_regression = false;
  TrainConfig train;
  LossConfig loss;
};

struct TrainResult {
  TrainRecord record;
  std::string checkpoint;
};

inline TrainResult cmd_train(const TrainOptions& o, std::ostream* log = nullptr) {
  if (o.data.empty() || o.out.empty()) throw std::invalid_argument("--data and --out are required");
  const EvalSetting setting = setting_by_name(o.setting, o.region);
  std::vector<SceneData> train, val;
  for (const auto& d : list_scene_dirs(o.data)) train.push_back(load_scene_dir(d, setting));
  if (!o.val_data.empty()) {
    for (const auto& d : list_scene_dirs(o.val_data)) val.push_back(load_scene_dir(d, setting));
  }
  ModelConfig mc = ModelConfig::for_setting(setting, o.channels, o.layers);
  mc.fusion.self_regression = o.self_regression;
  Model<float> model = init_model<float>(mc, o.train.seed);
  LossConfig loss = o.loss;
  loss.num_classes = setting.num_classes();
  TrainResult r;
  r.record = train_loop(model, train, val, setting, o.train, loss, [&](const EpochRecord& e) {
    if (log) {
      *log << "epoch " << e.epoch << " loss " << fmt4(e.loss);
      if (!std::isnan(e.miou)) *log << " miou " << fmt4(e.miou);
      *log << "\n";
    }
  });
  save_model(o.out, model);
  nlohmann::json rec = record_to_json(r.record, setting.name);
  rec["config"] = {{"p_train", o.train.p_train},
                   {"p_infer", o.train.p_infer},
                   {"learning_rate", o.train.learning_rate},
                   {"weight_decay", o.train.weight_decay},
                   {"epochs", o.train.epochs},
                   {"seed", o.train.seed},
                   {"fusion_mode", fusion_mode_name(o.train.mode)},
                   {"setting", setting.name},
                   {"background_weight", loss.background_weight}};
  write_json_file((fs::path(o.out) / "record.json").string(), rec);
  r.checkpoint = o.out;
  return r;
}

// Inference.

struct InferOptions {
  std::string checkpoint, scene, out;
  std::string setting = "desk";
  int step = -1;  // -1: every step
  int p_infer = 6;
  FusionMode mode = FusionMode::kUnified;
};

/// Writes out/step_XXX.ubt (labels) and out/prob/step_XXX.ubt (H x W x K).
inline std::vector<std::string> cmd_infer(const InferOptions& o) {
  if (o.checkpoint.empty() || o.scene.empty() || o.out.empty()) {
    throw std::invalid_argument("--checkpoint, --scene and --out are required");
  }
  if (o.p_infer < 0 || o.p_infer > kMaxPastSteps) throw std::invalid_argument("--p-infer out of range");
  const EvalSetting setting = setting_by_name(o.setting);
  const Model<float> model = load_model(o.checkpoint);
  const BevGridSpec spec = model.config.grid_spec(setting);
  const SceneData data = load_scene_dir(o.scene, setting);
  const int n = data.scene.num_steps();
  if (o.step >= n) throw std::invalid_argument("--step outside the scene trajectory");
  fs::create_directories(fs::path(o.out) / "prob");
  const int first = o.step < 0 ? 0 : std::max(0, o.step - o.p_infer);
  const int last = o.step < 0 ? n - 1 : o.step;
  FeatureQueue<float> queue(kMaxPastSteps + 1);
  std::vector<std::string> written;
  for (int t = first; t <= last; ++t) {
    queue.push(QueueEntry<float>{t, encode_frame(model, data.frames[static_cast<std::size_t>(t)]), data.scene.ego(t),
                                 data.rig});
    if (o.step >= 0 && t != o.step) continue;
    const FeatureMap<float> logits = forward_fusion(model, queue.window(o.p_infer), spec, o.mode);
    const std::string path = (fs::path(o.out) / (step_name(t) + ".ubt")).string();
    write_labels(path, argmax_labels(logits, setting));
    write_map((fs::path(o.out) / "prob" / (step_name(t) + ".ubt")).string(), softmax_probabilities(logits));
    written.push_back(path);
  }
  return written;
}

// Evaluation.

struct EvalOptions {
  std::string pred, gt, out;
  std::string setting = "desk";
  RegionMode region = RegionMode::kFull;
};

struct EvalSummary {
  IouResult overall;
  std::vector<std::pair<std::string, IouResult>> frames;
};

/// Pairs every step_XXX.ubt in the prediction directory with the same file
/// in the ground-truth directory. Writes metrics.csv and summary.json.
inline EvalSummary cmd_eval(const EvalOptions& o) {
  if (o.pred.empty() || o.gt.empty()) throw std::invalid_argument("--pred and --gt are required");
  const EvalSetting setting = setting_by_name(o.setting, o.region);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(o.pred)) {
    if (e.is_regular_file() && e.path().extension() == ".ubt") names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw std::invalid_argument("no predictions in " + o.pred);
  IouAccumulator all(setting);
  EvalSummary s;
  for (const auto& name : names) {
    const fs::path gt_path = fs::path(o.gt) / name;
    if (!fs::exists(gt_path)) throw std::invalid_argument("missing ground truth " + gt_path.string());
    const LabelGrid pred = read_labels((fs::path(o.pred) / name).string(), setting);
    const LabelGrid gt = read_labels(gt_path.string(), setting);
    all.add(pred, gt);
    s.frames.emplace_back(fs::path(name).stem().string(), miou(pred, gt, setting));
  }
  s.overall = all.result();
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    std::ofstream csv(fs::path(o.out) / "metrics.csv");
    csv << "frame_id,class,iou\n";
    for (const auto& [id, r] : s.frames) {
      for (std::size_t k = 0; k < r.iou.size(); ++k) {
        csv << id << "," << r.class_names[k] << "," << (std::isnan(r.iou[k]) ? std::string("nan") : fmt4(r.iou[k]))
            << "\n";
      }
      csv << id << ",mean," << fmt4(r.mean) << "\n";
    }
    nlohmann::json per_class = nlohmann::json::object();
    for (std::size_t k = 0; k < s.overall.iou.size(); ++k) {
      per_class[s.overall.class_names[k]] = std::isnan(s.overall.iou[k]) ? nlohmann::json() : nlohmann::json(s.overall.iou[k]);
    }
    write_json_file((fs::path(o.out) / "summary.json").string(),
                    {{"setting", setting.name},
                     {"region", region_name(o.region)},
                     {"frames", s.frames.size()},
                     {"miou", s.overall.mean},
                     {"iou", per_class}});
  }
  return s;
}

// Coverage.

struct CoverageOptions {
  std::string scene, out;
  std::string setting = "100x100";
  int p_max = 10;
  int step = -1;
};

inline std::vector<CoverageRow> cmd_coverage(const CoverageOptions& o, std::ostream& csv) {
  if (o.scene.empty()) throw std::invalid_argument("--scene is required");
  const EvalSetting setting = setting_by_name(o.setting);
  const SceneSpec scene = read_scene(o.scene);
  const auto rows = coverage_analysis(scene, o.p_max, setting.grid_spec(), o.step);
  csv << "P,unified,warp\n";
  for (const auto& r : rows) csv << r.past_steps << "," << fmt4(r.unified) << "," << fmt4(r.warp) << "\n";
  return rows;
}

// Images.

/// Binary PPM (P6) or PGM (P5) with 8-bit samples.
inline void write_pnm(const std::string& path, int height, int width, int channels, const std::vector<std::uint8_t>& px) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("PNM supports 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << (channels == 3 ? "P6" : "P5") << "\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

struct PlotOptions {
  std::string pred, gt, image, prob, out;
  int class_id = 1;
};

/// Label overlay: ground truth white, prediction red on top; image: RGB
/// frame; prob: one class channel as grayscale.
inline void cmd_plot(const PlotOptions& o) {
  if (o.out.empty()) throw std::invalid_argument("--out is required");
  if (!o.image.empty()) {
    const Image img = read_image(o.image);
    if (img.channels != 3 && img.channels != 1) throw std::invalid_argument("image must have 1 or 3 channels");
    std::vector<std::uint8_t> px(img.data.size());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_byte(img.data[i]);
    write_pnm(o.out, img.height, img.width, img.channels, px);
    return;
  }
  if (!o.prob.empty()) {
    const Tensor<float> t = read_ubt1(o.prob);
    if (t.shape.size() != 3) throw std::invalid_argument("probability grid must be H x W x K");
    const std::size_t h = t.shape[0], w = t.shape[1], k = t.shape[2];
    if (o.class_id < 0 || static_cast<std::size_t>(o.class_id) >= k) throw std::invalid_argument("--class out of range");
    std::vector<std::uint8_t> px(h * w);
    for (std::size_t i = 0; i < h * w; ++i) px[i] = to_byte(t[i * k + static_cast<std::size_t>(o.class_id)]);
    write_pnm(o.out, static_cast<int>(h), static_cast<int>(w), 1, px);
    return;
  }
  if (o.pred.empty() && o.gt.empty()) throw std::invalid_argument("plot needs --pred/--gt, --image or --prob");
  auto load = [](const std::string& path) {
    const Tensor<float> t = read_ubt1(path);
    if (t.shape.size() != 2) throw std::invalid_argument(path + ": expected an H x W label grid");
    return t;
  };
  Tensor<float> pred, gt;
  if (!o.pred.empty()) pred = load(o.pred);
  if (!o.gt.empty()) gt = load(o.gt);
  if (!o.pred.empty() && !o.gt.empty() && pred.shape != gt.shape) throw std::invalid_argument("grid shapes differ");
  const auto& shape = o.pred.empty() ? gt.shape : pred.shape;
  const std::size_t n = shape[0] * shape[1];
  std::vector<std::uint8_t> px(n * 3, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!o.gt.empty() && gt[i] > 0.0f) px[3 * i] = px[3 * i + 1] = px[3 * i + 2] = 255;
    if (!o.pred.empty() && pred[i] > 0.0f) {
      px[3 * i] = 255;
      px[3 * i + 1] = px[3 * i + 2] = 0;
    }
  }
  write_pnm(o.out, static_cast<int>(shape[0]), static_cast<int>(shape[1]), 3, px);
}

}  // namespace unibev::cli
