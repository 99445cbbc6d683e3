#pragma once

// Rigid poses, pinhole cameras, virtual views and BEV grid points.
//
// Pose convention: a Pose maps points from its owning frame into the parent
// frame, p_parent = R * p_own + t. Ego poses map ego -> world, camera
// extrinsics map camera -> ego. Under this convention the virtual view of a
// (possibly past) camera is the chain current ego -> world -> past ego ->
// camera, which is what compose_virtual_view builds.
//
// Camera frame: x right, y down, z forward (depth). Ego frame: x forward,
// y left, z up.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace unibev {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

inline constexpr double kDepthEpsilon = 1e-6;
inline constexpr double kOrthonormalTolerance = 1e-6;

inline double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }

class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  /// Accepts matrices within 1e-6 of orthonormal and snaps them to the
  /// closest rotation (symmetric orthogonalization); rejects the rest.
  static Rotation from_matrix(const Mat3& m) {
    if (!m.allFinite()) throw std::invalid_argument("rotation matrix is not finite");
    const double err = (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (err > kOrthonormalTolerance) {
      throw std::invalid_argument("rotation matrix is not orthonormal");
    }
    if (m.determinant() <= 0.0) throw std::invalid_argument("rotation matrix is not right-handed");
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    return Rotation(svd.matrixU() * svd.matrixV().transpose());
  }

  static Rotation from_row_major(const std::vector<double>& v) {
    if (v.size() != 9) throw std::invalid_argument("rotation needs 9 values");
    Mat3 m;
    m << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8];
    return from_matrix(m);
  }

  /// R = Rz(yaw) * Ry(pitch) * Rx(roll), radians.
  static Rotation from_ypr(double yaw, double pitch, double roll) {
    const Mat3 m = (Eigen::AngleAxisd(yaw, Vec3::UnitZ()) * Eigen::AngleAxisd(pitch, Vec3::UnitY()) *
                    Eigen::AngleAxisd(roll, Vec3::UnitX()))
                       .toRotationMatrix();
    return Rotation(m);
  }

  static Rotation about_z(double yaw) { return from_ypr(yaw, 0.0, 0.0); }

  const Mat3& matrix() const { return m_; }
  Rotation inverse() const { return Rotation(m_.transpose()); }
  Rotation operator*(const Rotation& o) const { return Rotation(m_ * o.m_); }
  Vec3 operator*(const Vec3& p) const { return m_ * p; }

  std::vector<double> row_major() const {
    return {m_(0, 0), m_(0, 1), m_(0, 2), m_(1, 0), m_(1, 1), m_(1, 2), m_(2, 0), m_(2, 1), m_(2, 2)};
  }

  double yaw() const { return std::atan2(m_(1, 0), m_(0, 0)); }

 private:
  explicit Rotation(const Mat3& m) : m_(m) {}
  Mat3 m_;
};

struct Pose {
  Rotation rotation;
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }
  static Pose planar(double x, double y, double z, double yaw) {
    return {Rotation::about_z(yaw), Vec3(x, y, z)};
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Pose inverse() const {
    const Rotation r = rotation.inverse();
    return {r, -(r * translation)};
  }
  /// (this * o).apply(p) == this->apply(o.apply(p))
  Pose operator*(const Pose& o) const { return {rotation * o.rotation, rotation * o.translation + translation}; }

  Mat4 homogeneous() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation.matrix();
    m.topRightCorner<3, 1>() = translation;
    return m;
  }
};

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("focal lengths must be positive");
    if (width <= 0 || height <= 0) throw std::invalid_argument("image size must be positive");
    if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height)) {
      throw std::invalid_argument("principal point outside image");
    }
  }

  Mat3 matrix() const {
    Mat3 k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }
};

struct VirtualView {
  Rotation rotation;
  Vec3 translation = Vec3::Zero();
  Intrinsics intrinsics;
  int source_step = 0;
  std::string camera_id;
};

/// Re-expresses camera `cam` (camera -> ego at the past step) relative to the
/// current ego frame:
///   R_v = R_i^-1 R_p^-1 R_c
///   t_v = R_i^-1 R_p^-1 t_c - R_i^-1 R_p^-1 t_p - R_i^-1 t_i
inline VirtualView compose_virtual_view(const Pose& cam, const Intrinsics& cam_intrinsics, const Pose& past_ego,
                                        const Pose& current_ego, int source_step, std::string camera_id = {}) {
  const Rotation ri_inv = cam.rotation.inverse();
  const Rotation rp_inv = past_ego.rotation.inverse();
  const Rotation chain = ri_inv * rp_inv;
  VirtualView v;
  v.rotation = chain * current_ego.rotation;
  v.translation = chain * current_ego.translation - chain * past_ego.translation - ri_inv * cam.translation;
  v.intrinsics = cam_intrinsics;
  v.source_step = source_step;
  v.camera_id = std::move(camera_id);
  return v;
}

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
  bool valid = false;
};

inline Projection project_point(const VirtualView& view, const Vec3& p_bev) {
  const Vec3 pc = view.rotation * p_bev + view.translation;
  const Intrinsics& k = view.intrinsics;
  Projection out;
  out.depth = pc.z();
  if (!(out.depth > kDepthEpsilon)) return out;
  out.u = k.fx * pc.x() / pc.z() + k.cx;
  out.v = k.fy * pc.y() / pc.z() + k.cy;
  out.valid = out.u >= 0.0 && out.u < k.width && out.v >= 0.0 && out.v < k.height;
  return out;
}

/// One result per input point, index-aligned; invalid points are flagged.
inline std::vector<Projection> project_points(const VirtualView& view, const std::vector<Vec3>& points_bev) {
  std::vector<Projection> out;
  out.reserve(points_bev.size());
  for (const Vec3& p : points_bev) out.push_back(project_point(view, p));
  return out;
}

/// Heights enumerated over (lo, hi] with a fixed stride.
inline std::vector<double> enumerate_heights(double lo, double hi, double stride) {
  std::vector<double> h;
  for (double z = lo + stride; z <= hi + 1e-9; z += stride) h.push_back(z);
  return h;
}

inline std::vector<double> default_heights() { return enumerate_heights(-5.0, 3.0, 2.0); }

struct BevGridSpec {
  int x_cells = 1;
  int y_cells = 1;
  std::pair<double, double> x_range{-1.0, 1.0};
  std::pair<double, double> y_range{-1.0, 1.0};
  std::vector<double> heights = default_heights();
  int upsample_factor = 1;

  void validate() const {
    if (x_cells <= 0 || y_cells <= 0) throw std::invalid_argument("grid cell counts must be positive");
    if (!(x_range.first < x_range.second) || !(y_range.first < y_range.second)) {
      throw std::invalid_argument("grid ranges must be increasing");
    }
    if (heights.empty()) throw std::invalid_argument("at least one sampling height required");
    for (std::size_t i = 1; i < heights.size(); ++i) {
      if (!(heights[i] > heights[i - 1])) throw std::invalid_argument("heights must be strictly increasing");
    }
    if (upsample_factor <= 0) throw std::invalid_argument("upsample factor must be positive");
  }

  int num_cells() const { return x_cells * y_cells; }
  int num_heights() const { return static_cast<int>(heights.size()); }
  double cell_size_x() const { return (x_range.second - x_range.first) / x_cells; }
  double cell_size_y() const { return (y_range.second - y_range.first) / y_cells; }
  double center_x(int i) const { return x_range.first + (i + 0.5) * cell_size_x(); }
  double center_y(int j) const { return y_range.first + (j + 0.5) * cell_size_y(); }
  int cell_index(int i, int j) const { return i * y_cells + j; }

  bool contains(double x, double y) const {
    return x >= x_range.first && x < x_range.second && y >= y_range.first && y < y_range.second;
  }
};

/// Cell-center points ordered x-major, then y, then height.
inline std::vector<Vec3> bev_grid_points(const BevGridSpec& spec) {
  spec.validate();
  std::vector<Vec3> pts;
  pts.reserve(static_cast<std::size_t>(spec.num_cells()) * spec.heights.size());
  for (int i = 0; i < spec.x_cells; ++i) {
    for (int j = 0; j < spec.y_cells; ++j) {
      for (double z : spec.heights) pts.emplace_back(spec.center_x(i), spec.center_y(j), z);
    }
  }
  return pts;
}

/// f = (r / 2) / tan(theta / 2)
inline double focal_from_fov(int resolution_pixels, double fov_degrees) {
  if (!(fov_degrees > 0.0 && fov_degrees < 180.0)) throw std::invalid_argument("fov must be in (0, 180) degrees");
  if (resolution_pixels <= 0) throw std::invalid_argument("resolution must be positive");
  return (resolution_pixels / 2.0) / std::tan(deg_to_rad(fov_degrees) / 2.0);
}

/// Farthest distance at which a lane of width `lane_width_m` still covers
/// `n_pixel` image pixels: d = f / n_pixel * W_lane.
inline double visible_limit(double focal_pixels, int n_pixel, double lane_width_m) {
  if (n_pixel < 1) throw std::invalid_argument("n_pixel must be >= 1");
  if (!(lane_width_m > 0.0)) throw std::invalid_argument("lane width must be positive");
  return focal_pixels / n_pixel * lane_width_m;
}

}  // namespace unibev
