#pragma once

// Synthetic multi-camera driving scenes on a flat world (ground at world
// z = 0). The ego reference point rides 1 m above the road, so the road
// surface sits at ego height -1 m, one of the default sampling heights.

#include "unibev/evalkit.hpp"
#include "unibev/features.hpp"
#include "unibev/geometry.hpp"
#include "unibev/parallel.hpp"
#include "unibev/rig.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace unibev {

inline constexpr double kStepSeconds = 0.2;
inline constexpr double kEgoHeight = 1.0;
inline constexpr double kCameraHeightInEgo = 0.5;

struct MapElement {
  std::string kind;  // divider | boundary | ped_crossing | road
  std::vector<Vec2> points;
  bool closed = false;  // polygon (road area) instead of polyline
};

/// Axis-aligned world box, bottom face on the ground.
struct Occluder {
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Ones();
  std::vector<int> active_steps;

  bool active_at(int step) const {
    return std::find(active_steps.begin(), active_steps.end(), step) != active_steps.end();
  }
};

enum class LaneLayout { kStraight, kCurved, kCrossing };

inline LaneLayout parse_layout(const std::string& s) {
  if (s == "straight") return LaneLayout::kStraight;
  if (s == "curved") return LaneLayout::kCurved;
  if (s == "crossing") return LaneLayout::kCrossing;
  throw std::invalid_argument("unknown lane layout '" + s + "'");
}

struct SceneParams {
  LaneLayout layout = LaneLayout::kStraight;
  int num_lanes = 3;           // travel lanes; lines = num_lanes + 1
  int num_steps = 11;          // trajectory length
  double speed = 2.0;          // meters per step
  double max_yaw_rate = 0.02;  // rad per step, curved layout
  double heading_noise = 0.03; // rad, initial heading jitter
  int num_occluders = 0;
  int occluder_active_steps = 1;  // active on this many final steps
  double occluder_flicker = 0.0;  // activity probability on earlier steps
  double occluder_min_distance = 4.0;
  double occluder_max_distance = 12.0;
  bool road_surface = true;
  int image_width = 128;
  int image_height = 64;
  double camera_pitch_deg = 15.0;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::string location;
  std::vector<MapElement> elements;
  std::vector<TrajectoryStep> trajectory;
  std::vector<Occluder> occluders;
  CameraRig rig;
  double step_seconds = kStepSeconds;

  int num_steps() const { return static_cast<int>(trajectory.size()); }
  const Pose& ego(int step) const { return trajectory.at(static_cast<std::size_t>(step)).pose; }
};

/// Six surround cameras at yaw {0, +-55, +-125, 180} degrees; 70 degree FOV,
/// 110 degrees for the rear camera.
inline CameraRig default_rig(int width, int height, double pitch_deg = 15.0) {
  struct Mount {
    const char* id;
    double yaw_deg;
    double fov_deg;
  };
  const std::array<Mount, 6> mounts{{{"CAM_FRONT", 0.0, 70.0},
                                     {"CAM_FRONT_LEFT", 55.0, 70.0},
                                     {"CAM_FRONT_RIGHT", -55.0, 70.0},
                                     {"CAM_BACK_LEFT", 125.0, 70.0},
                                     {"CAM_BACK_RIGHT", -125.0, 70.0},
                                     {"CAM_BACK", 180.0, 110.0}}};
  // Camera axes (x right, y down, z forward) expressed in the ego frame for a
  // level camera looking along ego +x.
  Mat3 base;
  base.col(0) = Vec3(0, -1, 0);
  base.col(1) = Vec3(0, 0, -1);
  base.col(2) = Vec3(1, 0, 0);
  CameraRig rig;
  for (const Mount& m : mounts) {
    const double yaw = deg_to_rad(m.yaw_deg);
    Camera cam;
    cam.id = m.id;
    const double f = focal_from_fov(width, m.fov_deg);
    cam.intrinsics = {f, f, width / 2.0, height / 2.0, width, height};
    const Mat3 r = (Eigen::AngleAxisd(yaw, Vec3::UnitZ()) * Eigen::AngleAxisd(deg_to_rad(pitch_deg), Vec3::UnitY()))
                       .toRotationMatrix() *
                   base;
    cam.extrinsic.rotation = Rotation::from_matrix(r);
    cam.extrinsic.translation = Vec3(std::cos(yaw), std::sin(yaw), kCameraHeightInEgo);
    rig.push_back(cam);
  }
  return rig;
}

inline const std::array<const char*, 4>& known_locations() {
  static const std::array<const char*, 4> locs{"singapore-onenorth", "singapore-queenstown",
                                               "singapore-hollandvillage", "boston-seaport"};
  return locs;
}

namespace detail {

inline std::vector<Vec2> sample_line(const Vec2& a, const Vec2& b, double step) {
  const int n = std::max(1, static_cast<int>(std::ceil((b - a).norm() / step)));
  std::vector<Vec2> pts;
  for (int k = 0; k <= n; ++k) pts.push_back(a + (b - a) * (static_cast<double>(k) / n));
  return pts;
}

inline std::vector<Vec2> sample_arc(const Vec2& center, double radius, double angle0, double angle1, double step) {
  const int n = std::max(1, static_cast<int>(std::ceil(std::abs(angle1 - angle0) * radius / step)));
  std::vector<Vec2> pts;
  for (int k = 0; k <= n; ++k) {
    const double a = angle0 + (angle1 - angle0) * k / n;
    pts.emplace_back(center.x() + radius * std::cos(a), center.y() + radius * std::sin(a));
  }
  return pts;
}

inline std::string line_kind(int k, int num_lines) { return (k == 0 || k == num_lines - 1) ? "boundary" : "divider"; }

}  // namespace detail

inline SceneSpec gen_scene(std::uint64_t seed, const SceneParams& params) {
  if (params.num_steps < 1) throw std::invalid_argument("scene needs at least one step");
  if (params.num_lanes < 1) throw std::invalid_argument("scene needs at least one lane");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  SceneSpec scene;
  scene.seed = seed;
  scene.location = known_locations()[static_cast<std::size_t>(rng() % known_locations().size())];
  scene.rig = default_rig(params.image_width, params.image_height, params.camera_pitch_deg);

  const double lane_width = uniform(3.0, 3.8);
  const int num_lines = params.num_lanes + 1;
  const int ego_lane = static_cast<int>(rng() % static_cast<std::uint64_t>(params.num_lanes));
  const double lateral = uniform(-0.5, 0.5);
  // Line k sits at lateral offset y_k relative to the ego path.
  std::vector<double> offsets;
  for (int k = 0; k < num_lines; ++k) offsets.push_back((k - ego_lane - 0.5) * lane_width - lateral);
  const double travel = params.speed * (params.num_steps - 1);
  const double back = 70.0, ahead = travel + 120.0;

  if (params.layout == LaneLayout::kCurved) {
    const double yaw_rate = uniform(0.5, 1.0) * params.max_yaw_rate * (unit(rng) < 0.5 ? -1.0 : 1.0);
    const double radius = params.speed / std::abs(yaw_rate);
    const double sgn = yaw_rate > 0 ? 1.0 : -1.0;
    // Ego path: circle through the origin, tangent to +x; center on +-y.
    const Vec2 center(0.0, sgn * radius);
    const double a0 = -sgn * std::numbers::pi / 2.0;
    const double span0 = -back / radius, span1 = ahead / radius;
    for (int k = 0; k < num_lines; ++k) {
      const double r = radius - sgn * offsets[k];
      scene.elements.push_back(
          {detail::line_kind(k, num_lines), detail::sample_arc(center, r, a0 + sgn * span0, a0 + sgn * span1, 1.0)});
    }
    if (params.road_surface) {
      const double r_in = radius - sgn * offsets.front(), r_out = radius - sgn * offsets.back();
      auto inner = detail::sample_arc(center, r_in, a0 + sgn * span0, a0 + sgn * span1, 2.0);
      auto outer = detail::sample_arc(center, r_out, a0 + sgn * span1, a0 + sgn * span0, 2.0);
      inner.insert(inner.end(), outer.begin(), outer.end());
      scene.elements.push_back({"road", inner, true});
    }
    for (int t = 0; t < params.num_steps; ++t) {
      const double ang = sgn * params.speed * t / radius;
      const Vec2 p = center + Vec2(std::cos(a0 + ang), std::sin(a0 + ang)) * radius;
      scene.trajectory.push_back({t, Pose::planar(p.x(), p.y(), kEgoHeight, ang)});
    }
  } else {
    const double heading = uniform(-1.0, 1.0) * params.heading_noise;
    for (int k = 0; k < num_lines; ++k) {
      scene.elements.push_back(
          {detail::line_kind(k, num_lines), detail::sample_line({-back, offsets[k]}, {ahead, offsets[k]}, 10.0)});
    }
    if (params.road_surface) {
      scene.elements.push_back({"road",
                                {{-back, offsets.front()}, {ahead, offsets.front()}, {ahead, offsets.back()},
                                 {-back, offsets.back()}},
                                true});
    }
    if (params.layout == LaneLayout::kCrossing) {
      const double xc = uniform(0.3, 0.7) * travel + uniform(5.0, 15.0);
      const double half = lane_width * uniform(1.0, 2.0);
      for (double side : {-1.0, 1.0}) {
        const double x = xc + side * half;
        scene.elements.push_back({"boundary", detail::sample_line({x, offsets.front() - 40.0}, {x, offsets.front()}, 10.0)});
        scene.elements.push_back({"boundary", detail::sample_line({x, offsets.back()}, {x, offsets.back() + 40.0}, 10.0)});
        const double xz = xc + side * (half + 2.0);
        scene.elements.push_back({"ped_crossing", detail::sample_line({xz, offsets.front()}, {xz, offsets.back()}, 5.0)});
      }
    }
    for (int t = 0; t < params.num_steps; ++t) {
      const double s = params.speed * t;
      scene.trajectory.push_back(
          {t, Pose::planar(s * std::cos(heading), s * std::sin(heading), kEgoHeight, heading)});
    }
  }

  const int last = params.num_steps - 1;
  const Pose& final_ego = scene.trajectory.back().pose;
  for (int k = 0; k < params.num_occluders; ++k) {
    const double bearing = uniform(-std::numbers::pi, std::numbers::pi);
    const double dist = uniform(params.occluder_min_distance, params.occluder_max_distance);
    const Vec3 local(dist * std::cos(bearing), dist * std::sin(bearing), 0.0);
    const Vec3 world = final_ego.apply(local);
    Occluder occ;
    occ.size = Vec3(uniform(2.0, 4.5), uniform(2.0, 4.5), uniform(2.5, 3.5));
    occ.center = Vec3(world.x(), world.y(), occ.size.z() / 2.0);
    const int first_active = std::max(0, last - params.occluder_active_steps + 1);
    for (int s = 0; s <= last; ++s) {
      const bool flick = s < first_active && params.occluder_flicker > 0.0 && unit(rng) < params.occluder_flicker;
      if (s >= first_active || flick) occ.active_steps.push_back(s);
    }
    scene.occluders.push_back(occ);
  }
  return scene;
}

// Rendering.

struct RenderOptions {
  double max_range = 80.0;  // ground hits farther than this render as sky
  double paint_half_width = 0.2;
  double crossing_half_width = 1.0;
};

namespace shade {
inline constexpr std::array<float, 3> kSky{0.55f, 0.65f, 0.85f};
inline constexpr std::array<float, 3> kGround{0.30f, 0.36f, 0.24f};
inline constexpr std::array<float, 3> kRoad{0.22f, 0.22f, 0.22f};
inline constexpr std::array<float, 3> kDivider{0.95f, 0.95f, 0.95f};
inline constexpr std::array<float, 3> kBoundary{0.95f, 0.80f, 0.15f};
inline constexpr std::array<float, 3> kCrossing{0.75f, 0.75f, 0.80f};
inline constexpr std::array<float, 3> kOccluder{0.50f, 0.50f, 0.50f};
}  // namespace shade

struct RenderedFrame {
  int step = 0;
  std::vector<Image> images;  // aligned with the rig
};

namespace detail {

inline double point_segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

inline bool point_in_polygon(const Vec2& p, const std::vector<Vec2>& poly) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[j];
    if ((a.y() > p.y()) != (b.y() > p.y()) && p.x() < (b.x() - a.x()) * (p.y() - a.y()) / (b.y() - a.y()) + a.x()) {
      inside = !inside;
    }
  }
  return inside;
}

/// Ray/AABB slab test; returns entry distance or +inf.
inline double ray_box(const Vec3& o, const Vec3& d, const Occluder& box) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double lo = box.center[a] - box.size[a] / 2.0, hi = box.center[a] + box.size[a] / 2.0;
    if (std::abs(d[a]) < 1e-12) {
      if (o[a] < lo || o[a] > hi) return std::numeric_limits<double>::infinity();
      continue;
    }
    double ta = (lo - o[a]) / d[a], tb = (hi - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::numeric_limits<double>::infinity();
  }
  return t0;
}

/// Uniform-grid bucket index over painted segments.
class SegmentIndex {
 public:
  struct Segment {
    Vec2 a, b;
    int element;
  };

  SegmentIndex(const std::vector<MapElement>& elements, double reach, double cell = 4.0) : cell_(cell) {
    for (std::size_t e = 0; e < elements.size(); ++e) {
      if (elements[e].closed) continue;
      const auto& pts = elements[e].points;
      for (std::size_t k = 0; k + 1 < pts.size(); ++k) {
        const int id = static_cast<int>(segments_.size());
        segments_.push_back({pts[k], pts[k + 1], static_cast<int>(e)});
        const long long x0 = key(std::min(pts[k].x(), pts[k + 1].x()) - reach);
        const long long x1 = key(std::max(pts[k].x(), pts[k + 1].x()) + reach);
        const long long y0 = key(std::min(pts[k].y(), pts[k + 1].y()) - reach);
        const long long y1 = key(std::max(pts[k].y(), pts[k + 1].y()) + reach);
        for (long long x = x0; x <= x1; ++x)
          for (long long y = y0; y <= y1; ++y) buckets_[pack(x, y)].push_back(id);
      }
    }
  }

  template <typename F>
  void near(const Vec2& p, F&& visit) const {
    const auto it = buckets_.find(pack(key(p.x()), key(p.y())));
    if (it == buckets_.end()) return;
    for (int id : it->second) visit(segments_[static_cast<std::size_t>(id)]);
  }

 private:
  long long key(double v) const { return static_cast<long long>(std::floor(v / cell_)); }
  static long long pack(long long x, long long y) { return (x << 32) ^ (y & 0xffffffffLL); }

  double cell_;
  std::vector<Segment> segments_;
  std::unordered_map<long long, std::vector<int>> buckets_;
};

inline const std::array<float, 3>& paint_color(const std::string& kind) {
  if (kind == "boundary") return shade::kBoundary;
  if (kind == "ped_crossing") return shade::kCrossing;
  return shade::kDivider;
}

}  // namespace detail

/// Ray-casts every camera pixel: occluders first, then the ground plane
/// (road/off-road surface with anti-aliased paint), else sky.
inline RenderedFrame render_frame(const SceneSpec& scene, int step, const RenderOptions& opt = {}) {
  if (step < 0 || step >= scene.num_steps()) throw std::out_of_range("render step outside trajectory");
  const Pose& ego = scene.ego(step);
  const double reach = std::max(opt.paint_half_width, opt.crossing_half_width) + 1.0;
  const detail::SegmentIndex index(scene.elements, reach);
  std::vector<const MapElement*> roads;
  for (const auto& e : scene.elements)
    if (e.closed) roads.push_back(&e);
  std::vector<const Occluder*> active;
  for (const auto& o : scene.occluders)
    if (o.active_at(step)) active.push_back(&o);

  RenderedFrame frame;
  frame.step = step;
  frame.images.resize(scene.rig.size());
  for (std::size_t ci = 0; ci < scene.rig.size(); ++ci) {
    const Camera& cam = scene.rig[ci];
    frame.images[ci] = Image(cam.intrinsics.height, cam.intrinsics.width, 3);
  }
  const int rows_per_cam = scene.rig.empty() ? 0 : scene.rig[0].intrinsics.height;
  const int total_rows = static_cast<int>(scene.rig.size()) * rows_per_cam;
  parallel_for(0, total_rows, [&](int job) {
    const std::size_t ci = static_cast<std::size_t>(job / rows_per_cam);
    const int r = job % rows_per_cam;
    const Camera& cam = scene.rig[ci];
    const Intrinsics& k = cam.intrinsics;
    if (r >= k.height) return;
    const Pose cam_to_world = ego * cam.extrinsic;
    const Vec3 o = cam_to_world.translation;
    Image& img = frame.images[ci];
    for (int c = 0; c < k.width; ++c) {
      const Vec3 dc((c + 0.5 - k.cx) / k.fx, (r + 0.5 - k.cy) / k.fy, 1.0);
      const Vec3 d = cam_to_world.rotation * dc;
      const double ray_len = d.norm();
      double t_ground = std::numeric_limits<double>::infinity();
      if (d.z() < 0.0) {
        const double t = -o.z() / d.z();
        if (t * ray_len <= opt.max_range) t_ground = t;
      }
      double t_box = std::numeric_limits<double>::infinity();
      for (const Occluder* b : active) t_box = std::min(t_box, detail::ray_box(o, d, *b));
      std::array<float, 3> color = shade::kSky;
      if (t_box < t_ground) {
        color = shade::kOccluder;
      } else if (std::isfinite(t_ground)) {
        const Vec3 hit = o + t_ground * d;
        const Vec2 p(hit.x(), hit.y());
        color = shade::kGround;
        for (const MapElement* road : roads) {
          if (detail::point_in_polygon(p, road->points)) {
            color = shade::kRoad;
            break;
          }
        }
        const double footprint = std::max(t_ground * ray_len / k.fx, 1e-3);
        float best_alpha = 0.0f;
        const std::array<float, 3>* best_color = nullptr;
        index.near(p, [&](const detail::SegmentIndex::Segment& s) {
          const MapElement& e = scene.elements[static_cast<std::size_t>(s.element)];
          const double hw = e.kind == "ped_crossing" ? opt.crossing_half_width : opt.paint_half_width;
          const double dist = detail::point_segment_distance(p, s.a, s.b);
          const auto alpha = static_cast<float>(std::clamp((hw + footprint / 2.0 - dist) / footprint, 0.0, 1.0));
          if (alpha > best_alpha) {
            best_alpha = alpha;
            best_color = &detail::paint_color(e.kind);
          }
        });
        if (best_color) {
          for (int ch = 0; ch < 3; ++ch) color[ch] = color[ch] + best_alpha * ((*best_color)[ch] - color[ch]);
        }
      }
      float* px = img.at(r, c);
      for (int ch = 0; ch < 3; ++ch) px[ch] = color[ch];
    }
  });
  return frame;
}

/// Map elements in the ego frame of `step`, rasterized per the setting.
/// Classes are drawn in ascending index order so later classes overwrite.
inline LabelGrid gt_raster(const SceneSpec& scene, int step, const EvalSetting& setting) {
  LabelGrid grid = LabelGrid::for_setting(setting);
  const Pose world_to_ego = scene.ego(step).inverse();
  for (std::size_t k = 0; k < setting.classes.size(); ++k) {
    const ClassSpec& cls = setting.classes[k];
    for (const MapElement& e : scene.elements) {
      if (std::find(cls.element_kinds.begin(), cls.element_kinds.end(), e.kind) == cls.element_kinds.end()) continue;
      if (e.closed != cls.filled) continue;
      std::vector<Vec2> local;
      local.reserve(e.points.size());
      for (const Vec2& p : e.points) {
        const Vec3 q = world_to_ego.apply(Vec3(p.x(), p.y(), 0.0));
        local.emplace_back(q.x(), q.y());
      }
      const Mask m = cls.filled ? rasterize_polygon(local, grid) : rasterize_polyline(local, grid, setting.line_width_px);
      paint(grid, m, static_cast<int>(k) + 1);
    }
  }
  return grid;
}

// Scene (de)serialization: the rig manifest extended with lanes and occluders.

inline nlohmann::json scene_to_json(const SceneSpec& s) {
  nlohmann::json j = manifest_to_json({s.rig, s.trajectory});
  j["seed"] = s.seed;
  j["location"] = s.location;
  j["step_seconds"] = s.step_seconds;
  nlohmann::json lanes = nlohmann::json::array();
  for (const auto& e : s.elements) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : e.points) pts.push_back({p.x(), p.y()});
    lanes.push_back({{"kind", e.kind}, {"closed", e.closed}, {"points", pts}});
  }
  j["lanes"] = lanes;
  nlohmann::json occ = nlohmann::json::array();
  for (const auto& o : s.occluders) {
    occ.push_back({{"center", {o.center.x(), o.center.y(), o.center.z()}},
                   {"size", {o.size.x(), o.size.y(), o.size.z()}},
                   {"active_steps", o.active_steps}});
  }
  j["occluders"] = occ;
  return j;
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  const RigManifest m = manifest_from_json(j);
  s.rig = m.cameras;
  s.trajectory = m.trajectory;
  s.seed = j.value("seed", std::uint64_t{0});
  s.location = j.value("location", std::string{});
  s.step_seconds = j.value("step_seconds", kStepSeconds);
  for (const auto& e : j.value("lanes", nlohmann::json::array())) {
    MapElement el;
    el.kind = e.at("kind").get<std::string>();
    el.closed = e.value("closed", false);
    for (const auto& p : e.at("points")) el.points.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
    s.elements.push_back(std::move(el));
  }
  for (const auto& o : j.value("occluders", nlohmann::json::array())) {
    Occluder oc;
    const auto c = o.at("center").get<std::vector<double>>();
    const auto z = o.at("size").get<std::vector<double>>();
    if (c.size() != 3 || z.size() != 3) throw std::invalid_argument("occluder center/size need 3 values");
    oc.center = Vec3(c[0], c[1], c[2]);
    oc.size = Vec3(z[0], z[1], z[2]);
    oc.active_steps = o.at("active_steps").get<std::vector<int>>();
    s.occluders.push_back(std::move(oc));
  }
  for (std::size_t t = 0; t < s.trajectory.size(); ++t) {
    if (s.trajectory[t].step != static_cast<int>(t)) throw std::invalid_argument("trajectory steps must be 0..T-1");
  }
  return s;
}

}  // namespace unibev
