#pragma once

// Camera rig + trajectory manifest (JSON). Angles are never serialized;
// rotations are stored as 9 row-major reals.

#include "unibev/geometry.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace unibev {

struct Camera {
  std::string id;
  Intrinsics intrinsics;
  Pose extrinsic;  // camera -> ego
};

using CameraRig = std::vector<Camera>;

struct TrajectoryStep {
  int step = 0;
  Pose pose;  // ego -> world
};

struct RigManifest {
  CameraRig cameras;
  std::vector<TrajectoryStep> trajectory;
};

namespace detail {

inline std::vector<double> json_reals(const nlohmann::json& j, std::size_t n, const char* what) {
  if (!j.is_array() || j.size() != n) {
    throw std::invalid_argument(std::string("manifest field '") + what + "' must hold " + std::to_string(n) +
                                " reals");
  }
  return j.get<std::vector<double>>();
}

inline nlohmann::json pose_to_json(const Pose& p) {
  return {{"rotation", p.rotation.row_major()},
          {"translation", {p.translation.x(), p.translation.y(), p.translation.z()}}};
}

inline Pose pose_from_json(const nlohmann::json& j) {
  const auto t = json_reals(j.at("translation"), 3, "translation");
  return {Rotation::from_row_major(json_reals(j.at("rotation"), 9, "rotation")), Vec3(t[0], t[1], t[2])};
}

}  // namespace detail

inline nlohmann::json intrinsics_to_json(const Intrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

inline Intrinsics intrinsics_from_json(const nlohmann::json& j) {
  Intrinsics k;
  k.fx = j.at("fx").get<double>();
  k.fy = j.at("fy").get<double>();
  k.cx = j.at("cx").get<double>();
  k.cy = j.at("cy").get<double>();
  k.width = j.at("width").get<int>();
  k.height = j.at("height").get<int>();
  k.validate();
  return k;
}

inline nlohmann::json manifest_to_json(const RigManifest& m) {
  nlohmann::json cams = nlohmann::json::array();
  for (const Camera& c : m.cameras) {
    nlohmann::json e = detail::pose_to_json(c.extrinsic);
    cams.push_back({{"id", c.id}, {"intrinsics", intrinsics_to_json(c.intrinsics)}, {"extrinsic", e}});
  }
  nlohmann::json traj = nlohmann::json::array();
  for (const TrajectoryStep& s : m.trajectory) {
    nlohmann::json e = detail::pose_to_json(s.pose);
    e["step"] = s.step;
    traj.push_back(e);
  }
  return {{"cameras", cams}, {"trajectory", traj}};
}

inline RigManifest manifest_from_json(const nlohmann::json& j) {
  RigManifest m;
  for (const auto& c : j.at("cameras")) {
    m.cameras.push_back(
        {c.at("id").get<std::string>(), intrinsics_from_json(c.at("intrinsics")), detail::pose_from_json(c.at("extrinsic"))});
  }
  if (j.contains("trajectory")) {
    for (const auto& s : j.at("trajectory")) m.trajectory.push_back({s.at("step").get<int>(), detail::pose_from_json(s)});
  }
  return m;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return nlohmann::json::parse(in);
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

}  // namespace unibev
