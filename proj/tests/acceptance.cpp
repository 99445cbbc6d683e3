// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
// failure.

#include "oracles.hpp"

#include "../tools/commands.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <iostream>
#include <sstream>

using namespace unibev;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

// 1. Focal length and visible range.
Outcome focal_and_range() {
  const double f70 = focal_from_fov(1600, 70.0), f110 = focal_from_fov(1600, 110.0);
  const double r70 = visible_limit(f70, 32, 3.0), r110 = visible_limit(f110, 32, 3.0);
  const bool ok = std::abs(f70 - 1142.5) <= 0.1 && std::abs(f110 - 560.2) <= 0.1 && std::abs(r70 - 107.1) <= 0.1 &&
                  std::abs(r110 - 52.5) <= 0.1;
  return {ok, "f70=" + cli::fmt4(f70) + " f110=" + cli::fmt4(f110) + " range70=" + cli::fmt4(r70) +
                  " range110=" + cli::fmt4(r110)};
}

// 2. Virtual view composition.
Outcome virtual_views() {
  std::mt19937_64 rng(2);
  double collapse = 0.0, pixel = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const Pose cam = oracle::random_pose(rng, 2.0), ego = oracle::random_pose(rng, 50.0);
    const VirtualView v = compose_virtual_view(cam, Intrinsics{}, ego, ego, 0);
    const Mat3 ri_inv = cam.rotation.matrix().transpose();
    collapse = std::max(collapse, (v.rotation.matrix() - ri_inv).cwiseAbs().maxCoeff());
    collapse = std::max(collapse, (v.translation + ri_inv * cam.translation).cwiseAbs().maxCoeff());
  }
  std::uniform_real_distribution<double> uu(0.0, 1600.0), vv(0.0, 900.0), dd(1.0, 60.0);
  const Intrinsics in{1142.5, 1142.5, 800.0, 450.0, 1600, 900};
  for (int k = 0; k < 1000; ++k) {
    const Pose cam = oracle::random_pose(rng, 2.0), past = oracle::random_pose(rng, 30.0),
               now = oracle::random_pose(rng, 30.0);
    // A point in front of the past camera, expressed in the current ego frame.
    const double u = uu(rng), v = vv(rng), d = dd(rng);
    const Vec3 pc(d * (u - in.cx) / in.fx, d * (v - in.cy) / in.fy, d);
    const Eigen::Vector4d ph = now.homogeneous().inverse() * past.homogeneous() * cam.homogeneous() *
                               Eigen::Vector4d(pc.x(), pc.y(), pc.z(), 1.0);
    const Vec3 p = ph.head<3>();
    const Projection pr = project_point(compose_virtual_view(cam, in, past, now, 1), p);
    const auto ref = oracle::project_homogeneous(cam.homogeneous(), in.matrix(), past.homogeneous(),
                                                 now.homogeneous(), p);
    pixel = std::max({pixel, std::abs(pr.u - ref.u), std::abs(pr.v - ref.v)});
    if (!pr.valid) pixel = std::max(pixel, 1.0);
  }
  return {collapse <= 1e-9 && pixel <= 1e-7,
          "collapse_max=" + num(collapse, 3) + " chain_max_px=" + num(pixel, 3) + " (1000 chains)"};
}

// 3. Unified softmax normalization and brute-force agreement.
Outcome softmax_oracle() {
  std::mt19937_64 rng(3);
  double sum_err = 0.0, out_err = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const oracle::DenseInstance d = oracle::random_instance(rng);
    const auto li = oracle::to_library(d);
    const auto ref = oracle::brute_attention(d);
    CrossAttentionCache<double> cache;
    const RowMat<double> delta = cross_attention_delta(li.x, li.table, li.params, li.pos, &cache);
    for (int q = 0; q < d.queries; ++q) {
      if (li.table.valid_count(q) == 0) continue;
      double s = 0.0;
      for (int e = li.table.query_begin[q]; e < li.table.query_begin[q + 1]; ++e) {
        const double a = cache.attention[static_cast<std::size_t>(e)];
        s += a;
        out_err = std::max(out_err, std::abs(a - ref.weights[q][static_cast<std::size_t>(li.table.entry_flat[e])]));
      }
      sum_err = std::max(sum_err, std::abs(s - 1.0));
      for (int c = 0; c < d.channels; ++c) {
        out_err = std::max(out_err, std::abs(li.x(q, c) + delta(q, c) - ref.out[q][c]));
      }
    }
  }
  return {sum_err <= 1e-6 && out_err <= 1e-6,
          "max|sum-1|=" + num(sum_err, 3) + " max|out-ref|=" + num(out_err, 3) + " (1000 instances)"};
}

// 4. Analytic gradients vs central differences.
Outcome gradient_check() {
  Model<double> m = oracle::small_model(oracle::tiny_setting(), 8, 2, true, 4);
  const oracle::GradProblem g = oracle::make_grad_problem(m, 2, 41);
  const auto checks = oracle::gradient_check(m, g, 50, 4);
  int checked = 0, excluded = 0, failures = 0, short_tensors = 0, floor_only = 0;
  double worst = 0.0;
  std::string worst_name;
  for (std::size_t k = 0; k < checks.size(); ++k) {
    const auto& c = checks[k];
    checked += c.checked;
    excluded += c.excluded;
    failures += c.failures;
    floor_only += c.floor_only;
    const std::size_t size = m.tensors()[k]->size();
    if (static_cast<std::size_t>(c.checked) < std::min<std::size_t>(50, size - static_cast<std::size_t>(c.excluded))) {
      ++short_tensors;
    }
    if (c.worst > worst) worst = c.worst, worst_name = c.name;
  }
  return {failures == 0 && short_tensors == 0 && checked > 0,
          std::to_string(checks.size()) + " tensors, " + std::to_string(checked) + " coords, " +
              std::to_string(excluded) + " kink-excluded, " + std::to_string(floor_only) +
              " below 1e-5, failures=" + std::to_string(failures) + ", worst_rel=" + num(worst, 3) + " (" + worst_name + ")"};
}

// 5. Coverage: unified reachability dominates warping.
Outcome coverage() {
  const BevGridSpec spec = settings::s100x100().grid_spec();
  int violations = 0, moving = 0, strict = 0;
  const LaneLayout layouts[] = {LaneLayout::kStraight, LaneLayout::kCurved, LaneLayout::kCrossing};
  for (int k = 0; k < 100; ++k) {
    SceneParams p;
    p.layout = layouts[k % 3];
    p.speed = k % 10 == 9 ? 0.0 : 0.5 + 0.25 * (k % 9);
    p.image_width = 64;
    p.image_height = 32;
    const auto rows = coverage_analysis(gen_scene(500 + static_cast<std::uint64_t>(k), p), 10, spec);
    for (const auto& r : rows) violations += r.unified < r.warp;
    if (p.speed > 0.0) {
      ++moving;
      strict += rows[6].unified > rows[6].warp;
    }
  }
  const double frac = static_cast<double>(strict) / moving;
  return {violations == 0 && frac >= 0.9, "violations=" + std::to_string(violations) + " strict_at_P6=" +
                                              std::to_string(strict) + "/" + std::to_string(moving)};
}

// 6-8. Occlusion-scenario training runs, shared across criteria.
struct OcclusionRuns {
  std::vector<std::vector<double>> unified_p6;  // [seed][P]
  std::vector<double> unified_p1_at6, equal_p6;
};

OcclusionRuns occlusion_runs() {
  const EvalSetting st = settings::desk();
  const SceneParams sp = oracle::occlusion_scenario();
  std::vector<SceneData> train, val;
  for (int i = 0; i < 20; ++i) train.push_back(build_scene_data(gen_scene(1000 + static_cast<std::uint64_t>(i), sp), st));
  for (int i = 0; i < 30; ++i) val.push_back(build_scene_data(gen_scene(5000 + static_cast<std::uint64_t>(i), sp), st));
  const LossConfig loss{0.4, st.num_classes()};
  auto run = [&](std::uint64_t seed, int p_train, FusionMode mode) {
    Model<float> m = init_model<float>(ModelConfig::for_setting(st, 16, 2), seed);
    TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.epochs = 10;
    tc.p_train = p_train;
    tc.seed = seed;
    tc.mode = mode;
    train_loop(m, train, {}, st, tc, loss);
    return m;
  };
  auto score = [&](const Model<float>& m, int p, FusionMode mode) {
    return evaluate(m, val, st, EvalConfig{p, mode, EvalSteps::kLast}).mean;
  };
  OcclusionRuns r;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Model<float> u6 = run(seed, 6, FusionMode::kUnified);
    std::vector<double> curve;
    for (int p = 0; p <= 6; ++p) curve.push_back(score(u6, p, FusionMode::kUnified));
    r.unified_p6.push_back(curve);
    r.unified_p1_at6.push_back(score(run(seed, 1, FusionMode::kUnified), 6, FusionMode::kUnified));
    r.equal_p6.push_back(score(run(seed, 6, FusionMode::kEqualWeight), 6, FusionMode::kEqualWeight));
    std::cerr << "  seed " << seed << ": unified P0..6 =";
    for (double v : curve) std::cerr << " " << cli::fmt4(v);
    std::cerr << " | p_train=1 @P6 " << cli::fmt4(r.unified_p1_at6.back()) << " | equal @P6 "
              << cli::fmt4(r.equal_p6.back()) << "\n";
  }
  return r;
}

Outcome temporal_gain(const OcclusionRuns& r) {
  std::vector<double> mean(7, 0.0);
  bool each_gap = true;
  for (const auto& c : r.unified_p6) {
    for (int p = 0; p <= 6; ++p) mean[static_cast<std::size_t>(p)] += c[static_cast<std::size_t>(p)] / 3.0;
    each_gap = each_gap && c[6] - c[0] >= 0.05;
  }
  double worst_drop = 0.0;
  for (int p = 1; p <= 6; ++p) worst_drop = std::max(worst_drop, mean[static_cast<std::size_t>(p) - 1] - mean[static_cast<std::size_t>(p)]);
  std::string curve;
  for (double v : mean) curve += (curve.empty() ? "" : ",") + cli::fmt4(v);
  return {each_gap && mean[6] - mean[0] >= 0.05 && worst_drop <= 0.02,
          "mean mIoU P0..6=[" + curve + "] gap=" + cli::fmt4(mean[6] - mean[0]) +
              " worst_drop=" + cli::fmt4(worst_drop) + (each_gap ? " (gap>=0.05 on every seed)" : " (a seed misses the gap)")};
}

Outcome depth_generalization(const OcclusionRuns& r) {
  double diff = 0.0;
  std::string per;
  for (std::size_t s = 0; s < 3; ++s) {
    const double d = r.unified_p1_at6[s] - r.unified_p6[s][6];
    diff += d / 3.0;
    per += (per.empty() ? "" : ",") + cli::fmt4(d);
  }
  return {std::abs(diff) <= 0.05, "mean(p_train1 - p_train6)@P6=" + cli::fmt4(diff) + " per_seed=[" + per + "]"};
}

Outcome unified_vs_equal(const OcclusionRuns& r) {
  double diff = 0.0;
  std::string per;
  for (std::size_t s = 0; s < 3; ++s) {
    const double d = r.unified_p6[s][6] - r.equal_p6[s];
    diff += d / 3.0;
    per += (per.empty() ? "" : ",") + cli::fmt4(d);
  }
  return {diff >= 0.0, "mean(unified - equal)@P6=" + cli::fmt4(diff) + " per_seed=[" + per + "]"};
}

// 9. Self-regression layer count.
Outcome self_regression() {
  auto count = [](int layers, bool sr) {
    FusionConfig cfg;
    cfg.channels = 4;
    cfg.layers = layers;
    cfg.query_x = 3;
    cfg.query_y = 2;
    cfg.upsample = 1;
    cfg.head_hidden = 4;
    cfg.self_regression = sr;
    std::mt19937_64 rng(9);
    const auto p = init_fusion<double>(cfg, rng);
    SampledValueTable<double> table;
    table.begin(TableLayout{3, 2, 1, 4, 4, 1}, 4);
    for (int q = 0; q < 6; ++q) table.end_query();
    const RowMat<double> q0 = ConstMatMap<double>(p.queries.ptr(), 6, 4);
    TransformerStats stats;
    run_transformer<double>(q0, 3, 2, table, p, sr, nullptr, &stats);
    return stats.layer_applications;
  };
  bool ok = true;
  for (int n = 1; n <= 6; ++n) ok = ok && count(n, true) == 2 * n && count(n, false) == n;
  const long long sr6 = count(6, true), plain12 = count(12, false);
  return {ok && sr6 == plain12, "SR(N) = 2N for N=1..6; SR(6)=" + std::to_string(sr6) + " plain(12)=" +
                                    std::to_string(plain12)};
}

// 10. Evaluation kit.
Outcome evalkit() {
  std::mt19937_64 rng(10);
  int miou_bad = 0;
  for (int k = 0; k < 1000; ++k) {
    EvalSetting s;
    s.front = 1.0 + static_cast<double>(rng() % 8), s.rear = 1.0 + static_cast<double>(rng() % 8);
    s.left = 1.0 + static_cast<double>(rng() % 8), s.right = 1.0 + static_cast<double>(rng() % 8);
    s.meters_per_pixel = 1.0;
    const int classes = 1 + static_cast<int>(rng() % 4);
    for (int c = 0; c < classes; ++c) s.classes.push_back({"c" + std::to_string(c), {}, false});
    LabelGrid p = LabelGrid::for_setting(s), g = p;
    std::uniform_int_distribution<int> lab(0, classes);
    for (auto& v : p.labels) v = static_cast<std::uint8_t>(lab(rng));
    for (auto& v : g.labels) v = static_cast<std::uint8_t>(lab(rng));
    const auto r = miou(p, g, s);
    const auto ref = oracle::brute_iou(p.labels, g.labels, std::vector<std::uint8_t>(p.labels.size(), 1), classes);
    miou_bad += r.intersection != ref.inter || r.union_count != ref.uni || std::abs(r.mean - ref.mean) > 1e-12;
  }
  int raster_bad = 0;
  std::uniform_real_distribution<double> u(-8.0, 24.0);
  for (int k = 0; k < 300; ++k) {
    const LabelGrid g(25, 30, 0.5, -2.0, -3.0);
    std::vector<Vec2> pts;
    for (int n = 0; n < 2 + k % 3; ++n) pts.emplace_back(u(rng), u(rng));
    for (int w : {1, 3, 5}) raster_bad += rasterize_polyline(pts, g, w).bits != oracle::dilated_bresenham(pts, g, w).bits;
  }
  const EvalSetting s = settings::s160x100();
  const Mask easy = region_mask(s, RegionMode::kEasy), hard = region_mask(s, RegionMode::kHard),
             full = region_mask(s, RegionMode::kFull);
  bool partition = full.count() == full.bits.size();
  for (std::size_t i = 0; i < full.bits.size(); ++i) partition = partition && easy.bits[i] + hard.bits[i] == 1;
  return {miou_bad == 0 && raster_bad == 0 && partition,
          "miou_mismatch=" + std::to_string(miou_bad) + "/1000 raster_mismatch=" + std::to_string(raster_bad) +
              "/900 partition=" + (partition ? "ok" : "broken") + " easy=" + std::to_string(easy.count()) +
              " hard=" + std::to_string(hard.count())};
}

// 11. End-to-end pipeline through the command layer.
std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string tree_bytes(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, root).string() + "\n" + file_bytes(f);
  return all;
}

Outcome end_to_end(const fs::path& work) {
  fs::remove_all(work);
  auto pipeline = [&](const fs::path& dir) {
    SceneParams sp;
    sp.layout = LaneLayout::kStraight;
    cli::GenOptions gen;
    gen.params = sp;
    gen.seed = 1000;
    gen.count = 20;
    gen.out = (dir / "train").string();
    cli::cmd_gen(gen);
    gen.seed = 9000;
    gen.count = 4;
    gen.out = (dir / "test").string();
    const auto test_dirs = cli::cmd_gen(gen);
    cli::TrainOptions tr;
    tr.data = (dir / "train").string();
    tr.out = (dir / "ckpt").string();
    cli::cmd_train(tr);
    IouAccumulator acc(settings::desk());
    for (const auto& scene : test_dirs) {
      const std::string name = fs::path(scene).filename().string();
      cli::InferOptions inf;
      inf.checkpoint = tr.out;
      inf.scene = scene;
      inf.out = (dir / "pred" / name).string();
      cli::cmd_infer(inf);
      cli::EvalOptions ev;
      ev.pred = inf.out;
      ev.gt = (fs::path(scene) / "labels").string();
      ev.out = (dir / "metrics" / name).string();
      cli::cmd_eval(ev);
      for (const auto& e : fs::directory_iterator(ev.pred)) {
        if (e.path().extension() != ".ubt") continue;
        acc.add(cli::read_labels(e.path().string(), settings::desk()),
                cli::read_labels((fs::path(ev.gt) / e.path().filename()).string(), settings::desk()));
      }
    }
    return acc.result().mean;
  };
  const auto t0 = std::chrono::steady_clock::now();
  const double m1 = pipeline(work / "a");
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  const double m2 = pipeline(work / "b");
  const bool same = tree_bytes(work / "a") == tree_bytes(work / "b");
  fs::remove_all(work);
  return {same && m1 >= 0.5 && minutes < 20.0, "mIoU=" + cli::fmt4(m1) + " rerun_mIoU=" + cli::fmt4(m2) +
                                                   " byte_identical=" + (same ? "yes" : "no") +
                                                   " pipeline_minutes=" + num(minutes, 3)};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "unibev_acceptance";
  int failures = 0;
  auto report = [&](int id, const std::string& title, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::printf("%s %2d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, title.c_str(), o.detail.c_str(), sec);
    std::fflush(stdout);
  };
  report(1, "focal length and visible range", focal_and_range);
  report(2, "virtual view composition", virtual_views);
  report(3, "unified softmax", softmax_oracle);
  report(4, "gradient check", gradient_check);
  report(5, "coverage dominance", coverage);
  std::optional<OcclusionRuns> runs;
  std::string run_error;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    runs = occlusion_runs();
  } catch (const std::exception& e) {
    run_error = e.what();
  }
  std::printf("     occlusion training runs: %.1fs\n", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  auto with_runs = [&](Outcome (*fn)(const OcclusionRuns&)) {
    return [&, fn]() { return runs ? fn(*runs) : Outcome{false, "training failed: " + run_error}; };
  };
  report(6, "temporal gain under occlusion", with_runs(temporal_gain));
  report(7, "train/infer depth generalization", with_runs(depth_generalization));
  report(8, "unified vs equal-weight", with_runs(unified_vs_equal));
  report(9, "self-regression", self_regression);
  report(10, "evaluation kit", evalkit);
  report(11, "end-to-end pipeline", [&] { return end_to_end(work); });
  std::printf("%s: %d failing criteria\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
