#include "oracles.hpp"

#include "unibev/coverage.hpp"
#include "unibev/simulator.hpp"

#include <gtest/gtest.h>

#include <functional>

using namespace unibev;

namespace {

SceneParams params(LaneLayout layout, int width = 128, int height = 64) {
  SceneParams p;
  p.layout = layout;
  p.image_width = width;
  p.image_height = height;
  return p;
}

double color_distance(const float* px, const std::array<float, 3>& c) {
  double d = 0;
  for (int k = 0; k < 3; ++k) d = std::max(d, static_cast<double>(std::abs(px[k] - c[k])));
  return d;
}

}  // namespace

TEST(Scene, DeterministicUnderSeed) {
  for (auto layout : {LaneLayout::kStraight, LaneLayout::kCurved, LaneLayout::kCrossing}) {
    SceneParams p = params(layout);
    p.num_occluders = 3;
    p.occluder_flicker = 0.5;
    EXPECT_EQ(scene_to_json(gen_scene(5, p)).dump(), scene_to_json(gen_scene(5, p)).dump());
    EXPECT_NE(scene_to_json(gen_scene(5, p)).dump(), scene_to_json(gen_scene(6, p)).dump());
  }
  const SceneSpec s = gen_scene(5, params(LaneLayout::kStraight, 64, 32));
  EXPECT_EQ(render_frame(s, 3).images[2].data, render_frame(s, 3).images[2].data);
}

TEST(Scene, StraightTrajectoryIsCollinearWithConstantSpeed) {
  const SceneSpec s = gen_scene(9, params(LaneLayout::kStraight));
  ASSERT_EQ(s.num_steps(), 11);
  const Vec3 d = s.ego(10).translation - s.ego(0).translation;
  for (int t = 1; t < 11; ++t) {
    const Vec3 step = s.ego(t).translation - s.ego(t - 1).translation;
    EXPECT_NEAR(step.norm(), 2.0, 1e-9);
    EXPECT_NEAR(step.normalized().cross(d.normalized()).norm(), 0.0, 1e-9);
    EXPECT_NEAR(s.ego(t).rotation.yaw(), s.ego(0).rotation.yaw(), 1e-12);
    EXPECT_NEAR(s.ego(t).translation.z(), kEgoHeight, 1e-12);
  }
}

TEST(Scene, CurvedTrajectoryTurnsAtConstantRate) {
  const SceneSpec s = gen_scene(10, params(LaneLayout::kCurved));
  const double rate = s.ego(1).rotation.yaw() - s.ego(0).rotation.yaw();
  EXPECT_GT(std::abs(rate), 0.0);
  for (int t = 1; t < 11; ++t) {
    EXPECT_NEAR(s.ego(t).rotation.yaw() - s.ego(t - 1).rotation.yaw(), rate, 1e-9);
    EXPECT_NEAR((s.ego(t).translation - s.ego(t - 1).translation).norm(), 2.0, 1e-3);
  }
}

TEST(Scene, OccludersActiveOnFinalSteps) {
  SceneParams p = params(LaneLayout::kStraight);
  p.num_occluders = 5;
  p.occluder_active_steps = 3;
  const SceneSpec s = gen_scene(11, p);
  ASSERT_EQ(s.occluders.size(), 5u);
  for (const auto& o : s.occluders) {
    EXPECT_EQ(o.active_steps, (std::vector<int>{8, 9, 10}));
    const Vec3 local = s.ego(10).inverse().apply(Vec3(o.center.x(), o.center.y(), 0.0));
    EXPECT_GE(std::hypot(local.x(), local.y()), p.occluder_min_distance - 1e-9);
    EXPECT_LE(std::hypot(local.x(), local.y()), p.occluder_max_distance + 1e-9);
  }
}

TEST(Scene, JsonRoundTrip) {
  SceneParams p = params(LaneLayout::kCrossing);
  p.num_occluders = 2;
  const SceneSpec s = gen_scene(12, p);
  const SceneSpec back = scene_from_json(nlohmann::json::parse(scene_to_json(s).dump()));
  // Rotations are re-orthonormalized on load, so compare numerically.
  std::function<void(const nlohmann::json&, const nlohmann::json&)> same = [&](const nlohmann::json& a,
                                                                               const nlohmann::json& b) {
    ASSERT_EQ(a.type(), b.type());
    if (a.is_number_float()) {
      EXPECT_NEAR(a.get<double>(), b.get<double>(), 1e-12);
    } else if (a.is_structured()) {
      ASSERT_EQ(a.size(), b.size());
      for (auto it = a.begin(); it != a.end(); ++it) {
        if (a.is_object()) {
          ASSERT_TRUE(b.contains(it.key()));
          same(*it, b.at(it.key()));
        } else {
          same(*it, b[static_cast<std::size_t>(it - a.begin())]);
        }
      }
    } else {
      EXPECT_EQ(a, b);
    }
  };
  same(scene_to_json(back), scene_to_json(s));
  EXPECT_EQ(back.occluders[1].active_steps, s.occluders[1].active_steps);
}

TEST(Render, PaintedLineAndSkyPixels) {
  SceneParams p = params(LaneLayout::kStraight);
  p.heading_noise = 0.0;
  const SceneSpec s = gen_scene(13, p);
  const RenderedFrame f = render_frame(s, 0);
  const Camera& front = s.rig[0];
  const VirtualView v = compose_virtual_view(front.extrinsic, front.intrinsics, s.ego(0), s.ego(0), 0);
  int checked = 0;
  for (const auto& e : s.elements) {
    if (e.closed) continue;
    const double y = e.points.front().y();
    // A point on the line 12 m ahead, on the ground (ego z = -1).
    const Projection pr = project_point(v, Vec3(12.0, y, -kEgoHeight));
    if (!pr.valid) continue;
    const float* px = f.images[0].at(static_cast<int>(pr.v), static_cast<int>(pr.u));
    EXPECT_LT(color_distance(px, e.kind == "divider" ? shade::kDivider : shade::kBoundary), 0.1) << e.kind;
    ++checked;
  }
  EXPECT_GE(checked, 2);
  EXPECT_LT(color_distance(f.images[0].at(0, 64), shade::kSky), 1e-6);
}

TEST(Render, ActiveOccluderCoversItsPixels) {
  SceneParams p = params(LaneLayout::kStraight);
  p.heading_noise = 0.0;
  SceneSpec s = gen_scene(14, p);
  Occluder box;
  box.center = s.ego(10).apply(Vec3(6.0, 0.0, 0.0));
  box.size = Vec3(2.0, 2.0, 3.0);
  box.center.z() = 1.5;
  box.active_steps = {10};
  s.occluders = {box};
  const Camera& front = s.rig[0];
  const VirtualView v = compose_virtual_view(front.extrinsic, front.intrinsics, s.ego(10), s.ego(10), 0);
  const Projection pr = project_point(v, Vec3(5.0, 0.0, 0.5));  // front face of the box, ego frame
  ASSERT_TRUE(pr.valid);
  const int r = static_cast<int>(pr.v), c = static_cast<int>(pr.u);
  EXPECT_LT(color_distance(render_frame(s, 10).images[0].at(r, c), shade::kOccluder), 1e-6);
  EXPECT_GT(color_distance(render_frame(s, 9).images[0].at(r, c), shade::kOccluder), 1e-3);
}

TEST(GroundTruth, StraightLanesAlongHeadingAreStepInvariant) {
  SceneParams p = params(LaneLayout::kStraight);
  p.heading_noise = 0.0;
  const SceneSpec s = gen_scene(15, p);
  const auto st = settings::desk();
  const LabelGrid g0 = gt_raster(s, 0, st);
  EXPECT_EQ(g0.labels, gt_raster(s, 7, st).labels);
  // Lines run along x: every column is either fully painted or empty.
  int painted = 0;
  for (int c = 0; c < g0.width; ++c) {
    int n = 0;
    for (int r = 0; r < g0.height; ++r) n += g0.at(r, c) > 0;
    EXPECT_TRUE(n == 0 || n == g0.height) << "column " << c;
    painted += n > 0;
  }
  EXPECT_GE(painted, 6);
}

TEST(GroundTruth, LateralShiftMovesColumns) {
  SceneParams p = params(LaneLayout::kStraight);
  p.heading_noise = 0.0;
  SceneSpec a = gen_scene(16, p), b = a;
  for (auto& e : b.elements) {
    for (auto& pt : e.points) pt.y() += 1.0;  // two 0.5 m pixels to the left
  }
  const auto st = settings::desk();
  const LabelGrid ga = gt_raster(a, 0, st), gb = gt_raster(b, 0, st);
  for (int r = 0; r < ga.height; ++r) {
    for (int c = 0; c + 2 < ga.width; ++c) EXPECT_EQ(gb.at(r, c + 2), ga.at(r, c));
  }
}

TEST(Warp, ReferenceExamples) {
  BevGridSpec s;
  s.x_cells = 4;
  s.y_cells = 3;
  s.x_range = {-2.0, 2.0};
  s.y_range = {-1.5, 1.5};
  ValidityGrid all(12, 1);
  EXPECT_EQ(warp_reference(all, Pose::identity(), Pose::identity(), s), all);
  // Ego moved 1 m (one cell) forward: the front row has no past support.
  const auto w = warp_reference(all, Pose::identity(), Pose::planar(1.0, 0, 0, 0), s);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_EQ(w[s.cell_index(i, j)], i < 3 ? 1 : 0);
  }
  ValidityGrid one(12, 0);
  one[s.cell_index(2, 1)] = 1;
  const auto w1 = warp_reference(one, Pose::identity(), Pose::planar(1.0, 0, 0, 0), s);
  EXPECT_EQ(std::count(w1.begin(), w1.end(), 1), 1);
  EXPECT_EQ(w1[s.cell_index(1, 1)], 1);
}

TEST(Coverage, LawsOnRandomScenes) {
  const BevGridSpec spec = settings::s100x100().grid_spec();
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    SceneParams p = params(seed % 2 ? LaneLayout::kCurved : LaneLayout::kStraight, 64, 32);
    const auto rows = coverage_analysis(gen_scene(seed, p), 10, spec);
    ASSERT_EQ(rows.size(), 11u);
    EXPECT_EQ(rows[0].unified, rows[0].warp);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      EXPECT_GE(rows[k].unified, rows[k].warp);
      if (k > 0) {
        EXPECT_GE(rows[k].unified, rows[k - 1].unified);
        EXPECT_GE(rows[k].warp, rows[k - 1].warp);
      }
    }
    EXPECT_GT(rows[6].unified, rows[6].warp);
  }
}

TEST(Coverage, StationaryEgoLosesNothing) {
  SceneParams p = params(LaneLayout::kStraight, 64, 32);
  p.speed = 0.0;
  const auto rows = coverage_analysis(gen_scene(3, p), 10, settings::s100x100().grid_spec());
  for (const auto& r : rows) EXPECT_EQ(r.unified, r.warp);
  EXPECT_NEAR(rows[10].unified, 11 * rows[0].unified, 1e-12);
}
