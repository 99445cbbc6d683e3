#pragma once

// Map-segmentation evaluation: settings, label rasters, line rasterization,
// region masks, mIoU and the city-based split.
//
// Label grids share the query layout: row index follows ego x (forward,
// ascending), column index follows ego y (left, ascending). Pixel (r, c)
// covers x in [x_min + r*mpp, x_min + (r+1)*mpp) and likewise for y; the ego
// origin falls in pixel (floor(-x_min/mpp), floor(-y_min/mpp)).

#include "unibev/geometry.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace unibev {

enum class RegionMode { kFull, kEasy, kHard };

inline RegionMode parse_region(const std::string& s) {
  if (s == "full") return RegionMode::kFull;
  if (s == "easy") return RegionMode::kEasy;
  if (s == "hard") return RegionMode::kHard;
  throw std::invalid_argument("unknown region '" + s + "' (expected full, easy or hard)");
}

inline std::string region_name(RegionMode m) {
  switch (m) {
    case RegionMode::kFull: return "full";
    case RegionMode::kEasy: return "easy";
    case RegionMode::kHard: return "hard";
  }
  return "full";
}

/// One output class and the map elements that feed it.
struct ClassSpec {
  std::string name;
  std::vector<std::string> element_kinds;  // e.g. {"divider", "boundary"}
  bool filled = false;                     // polygons filled rather than traced
};

struct EvalSetting {
  std::string name;
  double front = 50.0, rear = 50.0, left = 50.0, right = 50.0;  // meters
  double meters_per_pixel = 0.5;
  std::vector<ClassSpec> classes;  // class k+1; 0 is background
  int line_width_px = 1;
  RegionMode region_mode = RegionMode::kFull;
  // Query grid paired with this setting.
  int query_x = 50, query_y = 50, upsample_factor = 4;

  int height() const { return static_cast<int>(std::lround((front + rear) / meters_per_pixel)); }
  int width() const { return static_cast<int>(std::lround((left + right) / meters_per_pixel)); }
  int num_classes() const { return static_cast<int>(classes.size()) + 1; }
  double x_min() const { return -rear; }
  double y_min() const { return -right; }

  BevGridSpec grid_spec(std::vector<double> heights = default_heights()) const {
    BevGridSpec g;
    g.x_cells = query_x;
    g.y_cells = query_y;
    g.x_range = {-rear, front};
    g.y_range = {-right, left};
    g.heights = std::move(heights);
    g.upsample_factor = upsample_factor;
    return g;
  }
};

namespace settings {

inline EvalSetting s100x100() {
  EvalSetting s;
  s.name = "100x100";
  s.front = s.rear = s.left = s.right = 50.0;
  s.meters_per_pixel = 0.5;
  s.classes = {{"road", {"road"}, true}, {"lane", {"divider", "boundary"}, false}};
  s.line_width_px = 1;
  s.query_x = 50, s.query_y = 50, s.upsample_factor = 4;
  return s;
}

inline EvalSetting s60x30() {
  EvalSetting s;
  s.name = "60x30";
  s.front = s.rear = 30.0;
  s.left = s.right = 15.0;
  s.meters_per_pixel = 0.15;
  s.classes = {{"boundary", {"boundary"}, false}, {"divider", {"divider"}, false},
               {"ped_crossing", {"ped_crossing"}, false}};
  s.line_width_px = 1;
  s.query_x = 100, s.query_y = 50, s.upsample_factor = 4;
  return s;
}

/// Front 100 m (visible limit ~107.1 m trimmed), rear 60 m, 50 m each side.
inline EvalSetting s160x100() {
  EvalSetting s;
  s.name = "160x100";
  s.front = 100.0;
  s.rear = 60.0;
  s.left = s.right = 50.0;
  s.meters_per_pixel = 0.25;
  s.classes = {{"boundary", {"boundary"}, false}, {"divider", {"divider"}, false},
               {"ped_crossing", {"ped_crossing"}, false}};
  s.line_width_px = 3;
  s.query_x = 80, s.query_y = 50, s.upsample_factor = 8;
  return s;
}

/// Small line setting used for CPU-scale training: 32 m x 16 m at 0.5 m/px.
inline EvalSetting desk() {
  EvalSetting s;
  s.name = "desk";
  s.front = s.rear = 16.0;
  s.left = s.right = 8.0;
  s.meters_per_pixel = 0.5;
  s.classes = {{"divider", {"divider"}, false}, {"boundary", {"boundary"}, false}};
  s.line_width_px = 3;
  s.query_x = 32, s.query_y = 16, s.upsample_factor = 2;
  return s;
}

}  // namespace settings

inline std::vector<std::string> setting_names() { return {"100x100", "60x30", "160x100", "desk"}; }

inline EvalSetting setting_by_name(const std::string& name, RegionMode region = RegionMode::kFull) {
  EvalSetting s;
  if (name == "100x100") s = settings::s100x100();
  else if (name == "60x30") s = settings::s60x30();
  else if (name == "160x100") s = settings::s160x100();
  else if (name == "desk") s = settings::desk();
  else throw std::invalid_argument("unknown setting '" + name + "'");
  s.region_mode = region;
  return s;
}

/// Integer class raster; 0 is background.
struct LabelGrid {
  int height = 0;
  int width = 0;
  double meters_per_pixel = 1.0;
  double x_min = 0.0;
  double y_min = 0.0;
  std::vector<std::uint8_t> labels;

  LabelGrid() = default;
  LabelGrid(int h, int w, double mpp, double xmin, double ymin)
      : height(h), width(w), meters_per_pixel(mpp), x_min(xmin), y_min(ymin),
        labels(static_cast<std::size_t>(h) * w, 0) {}

  static LabelGrid for_setting(const EvalSetting& s) {
    return LabelGrid(s.height(), s.width(), s.meters_per_pixel, s.x_min(), s.y_min());
  }

  std::uint8_t& at(int r, int c) { return labels[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
  bool inside(int r, int c) const { return r >= 0 && r < height && c >= 0 && c < width; }
  long long pixel_row(double x) const { return static_cast<long long>(std::floor((x - x_min) / meters_per_pixel)); }
  long long pixel_col(double y) const { return static_cast<long long>(std::floor((y - y_min) / meters_per_pixel)); }
  double center_x(int r) const { return x_min + (r + 0.5) * meters_per_pixel; }
  double center_y(int c) const { return y_min + (c + 0.5) * meters_per_pixel; }
  bool same_geometry(const LabelGrid& o) const {
    return height == o.height && width == o.width && meters_per_pixel == o.meters_per_pixel && x_min == o.x_min &&
           y_min == o.y_min;
  }
};

/// Boolean raster with the geometry of a LabelGrid.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int h, int w, bool fill = false) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, fill) {}
  bool at(int r, int c) const { return bits[static_cast<std::size_t>(r) * width + c] != 0; }
  void set(int r, int c, bool v = true) { bits[static_cast<std::size_t>(r) * width + c] = v; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
};

/// Traced pixel of step i along a segment's major axis:
///   minor = minor0 + sign * floor((2 i |dminor| + |dmajor|) / (2 |dmajor|)),
/// i.e. rounding half away from the start. The tracer walks this
/// incrementally; tests check it against the closed form.
class LineTracer {
 public:
  LineTracer(long long r0, long long c0, long long r1, long long c1)
      : r0_(r0), c0_(c0), dr_(r1 - r0), dc_(c1 - c0) {
    row_major_ = std::llabs(dr_) >= std::llabs(dc_);
    major_len_ = row_major_ ? std::llabs(dr_) : std::llabs(dc_);
    minor_len_ = row_major_ ? std::llabs(dc_) : std::llabs(dr_);
  }

  long long steps() const { return major_len_ + 1; }

  /// Visits traced pixels for major steps [i_begin, i_end).
  template <typename F>
  void trace(long long i_begin, long long i_end, F&& visit) const {
    i_begin = std::max(i_begin, 0LL);
    i_end = std::min(i_end, steps());
    if (i_begin >= i_end) return;
    const long long smaj = row_major_ ? (dr_ >= 0 ? 1 : -1) : (dc_ >= 0 ? 1 : -1);
    const long long smin = row_major_ ? (dc_ >= 0 ? 1 : -1) : (dr_ >= 0 ? 1 : -1);
    const long long two_major = 2 * std::max(major_len_, 1LL);
    long long num = 2 * i_begin * minor_len_ + major_len_;
    long long q = num / two_major;
    long long rem = num - q * two_major;
    for (long long i = i_begin; i < i_end; ++i) {
      const long long maj = smaj * i, mnr = smin * q;
      if (row_major_) visit(r0_ + maj, c0_ + mnr);
      else visit(r0_ + mnr, c0_ + maj);
      rem += 2 * minor_len_;
      while (rem >= two_major) {
        rem -= two_major;
        ++q;
      }
    }
  }

  /// Major-axis step range whose traced pixels can land within `margin`
  /// pixels of rows [0, h) x cols [0, w).
  std::pair<long long, long long> clip_range(int h, int w, int margin) const {
    const long long lo = -margin, hi_r = h - 1 + margin, hi_c = w - 1 + margin;
    const long long start = row_major_ ? r0_ : c0_;
    const long long d = row_major_ ? dr_ : dc_;
    const long long hi = row_major_ ? hi_r : hi_c;
    if (major_len_ == 0) return {0, 1};
    long long a, b;
    if (d > 0) {
      a = lo - start;
      b = hi - start;
    } else {
      a = start - hi;
      b = start - lo;
    }
    return {std::max(a, 0LL), std::min(b + 1, steps())};
  }

 private:
  long long r0_, c0_, dr_, dc_;
  bool row_major_ = true;
  long long major_len_ = 0, minor_len_ = 0;
};

/// Pixels covered by a polyline: every segment traced between its endpoint
/// pixels, each traced pixel dilated by a (line_width_px)-wide square, clipped
/// to the grid.
inline Mask rasterize_polyline(const std::vector<Vec2>& points, const LabelGrid& geometry, int line_width_px) {
  if (points.size() < 2) throw std::invalid_argument("polyline needs at least two points");
  if (line_width_px < 1) throw std::invalid_argument("line width must be >= 1");
  Mask out(geometry.height, geometry.width);
  const int radius = line_width_px / 2;
  for (std::size_t k = 0; k + 1 < points.size(); ++k) {
    const LineTracer tracer(geometry.pixel_row(points[k].x()), geometry.pixel_col(points[k].y()),
                            geometry.pixel_row(points[k + 1].x()), geometry.pixel_col(points[k + 1].y()));
    const auto [i0, i1] = tracer.clip_range(geometry.height, geometry.width, radius);
    tracer.trace(i0, i1, [&](long long r, long long c) {
      for (long long dr = -radius; dr <= radius; ++dr) {
        for (long long dc = -radius; dc <= radius; ++dc) {
          const long long rr = r + dr, cc = c + dc;
          if (rr >= 0 && rr < geometry.height && cc >= 0 && cc < geometry.width) {
            out.set(static_cast<int>(rr), static_cast<int>(cc));
          }
        }
      }
    });
  }
  return out;
}

inline Mask rasterize_polyline(const std::vector<Vec2>& points, const EvalSetting& setting) {
  return rasterize_polyline(points, LabelGrid::for_setting(setting), setting.line_width_px);
}

/// Pixels whose centers fall inside the polygon (even-odd rule).
inline Mask rasterize_polygon(const std::vector<Vec2>& polygon, const LabelGrid& geometry) {
  if (polygon.size() < 3) throw std::invalid_argument("polygon needs at least three points");
  Mask out(geometry.height, geometry.width);
  for (int r = 0; r < geometry.height; ++r) {
    const double x = geometry.center_x(r);
    std::vector<double> crossings;
    for (std::size_t k = 0; k < polygon.size(); ++k) {
      const Vec2& a = polygon[k];
      const Vec2& b = polygon[(k + 1) % polygon.size()];
      if ((a.x() <= x) != (b.x() <= x)) {
        crossings.push_back(a.y() + (x - a.x()) / (b.x() - a.x()) * (b.y() - a.y()));
      }
    }
    std::sort(crossings.begin(), crossings.end());
    for (std::size_t k = 0; k + 1 < crossings.size(); k += 2) {
      for (int c = 0; c < geometry.width; ++c) {
        const double y = geometry.center_y(c);
        if (y >= crossings[k] && y < crossings[k + 1]) out.set(r, c);
      }
    }
  }
  return out;
}

inline void paint(LabelGrid& grid, const Mask& mask, int class_id) {
  for (std::size_t i = 0; i < grid.labels.size(); ++i) {
    if (mask.bits[i]) grid.labels[i] = static_cast<std::uint8_t>(class_id);
  }
}

/// Easy region: front 50 m, rear 30 m, left 30 m, right 30 m around the ego.
inline constexpr double kEasyFront = 50.0, kEasyRear = 30.0, kEasyLeft = 30.0, kEasyRight = 30.0;

inline Mask region_mask(const EvalSetting& setting, RegionMode mode) {
  const LabelGrid g = LabelGrid::for_setting(setting);
  Mask m(g.height, g.width, mode == RegionMode::kFull);
  if (mode == RegionMode::kFull) return m;
  for (int r = 0; r < g.height; ++r) {
    for (int c = 0; c < g.width; ++c) {
      const double x = g.center_x(r), y = g.center_y(c);
      const bool easy = x >= -kEasyRear && x <= kEasyFront && y >= -kEasyRight && y <= kEasyLeft;
      m.set(r, c, mode == RegionMode::kEasy ? easy : !easy);
    }
  }
  return m;
}

struct IouResult {
  std::vector<std::string> class_names;   // foreground classes, index k -> class k+1
  std::vector<double> iou;                // NaN where the class is absent from both rasters
  std::vector<long long> intersection;
  std::vector<long long> union_count;
  double mean = 1.0;                      // over present classes; 1.0 when none present
  int classes_counted = 0;
};

/// Dataset-level accumulator: intersections and unions summed over frames.
class IouAccumulator {
 public:
  explicit IouAccumulator(const EvalSetting& setting)
      : setting_(setting), mask_(region_mask(setting, setting.region_mode)),
        inter_(setting.classes.size(), 0), uni_(setting.classes.size(), 0) {}

  void add(const LabelGrid& pred, const LabelGrid& gt) {
    if (!pred.same_geometry(gt)) throw std::invalid_argument("prediction and ground truth grids differ in shape");
    if (pred.height != mask_.height || pred.width != mask_.width) {
      throw std::invalid_argument("grid shape does not match setting " + setting_.name);
    }
    const int k = static_cast<int>(inter_.size());
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
      if (!mask_.bits[i]) continue;
      const int p = pred.labels[i], g = gt.labels[i];
      if (p > k || g > k) throw std::invalid_argument("label value exceeds class count");
      if (p == g) {
        if (p > 0) {
          ++inter_[p - 1];
          ++uni_[p - 1];
        }
      } else {
        if (p > 0) ++uni_[p - 1];
        if (g > 0) ++uni_[g - 1];
      }
    }
  }

  IouResult result() const {
    IouResult r;
    double sum = 0.0;
    for (std::size_t k = 0; k < inter_.size(); ++k) {
      r.class_names.push_back(setting_.classes[k].name);
      r.intersection.push_back(inter_[k]);
      r.union_count.push_back(uni_[k]);
      if (uni_[k] == 0) {
        r.iou.push_back(std::nan(""));
      } else {
        r.iou.push_back(static_cast<double>(inter_[k]) / static_cast<double>(uni_[k]));
        sum += r.iou.back();
        ++r.classes_counted;
      }
    }
    r.mean = r.classes_counted > 0 ? sum / r.classes_counted : 1.0;
    return r;
  }

 private:
  EvalSetting setting_;
  Mask mask_;
  std::vector<long long> inter_, uni_;
};

inline IouResult miou(const LabelGrid& pred, const LabelGrid& gt, const EvalSetting& setting) {
  IouAccumulator acc(setting);
  acc.add(pred, gt);
  return acc.result();
}

// City-based split.

enum class Split { kTrain, kVal };

struct SceneLocation {
  std::string id;
  std::string location;
};

struct SplitManifest {
  std::map<std::string, Split> assignment;
  std::map<std::string, std::string> location;
  std::size_t train_count = 0, val_count = 0;
};

inline std::optional<Split> split_for_location(const std::string& location) {
  if (location == "singapore-queenstown" || location == "singapore-hollandvillage") return Split::kTrain;
  if (location == "singapore-onenorth" || location == "boston-seaport") return Split::kVal;
  return std::nullopt;
}

inline SplitManifest city_split(const std::vector<SceneLocation>& scenes) {
  SplitManifest m;
  for (const auto& s : scenes) {
    const auto split = split_for_location(s.location);
    if (!split) throw std::invalid_argument("scene " + s.id + " has unknown location '" + s.location + "'");
    m.assignment[s.id] = *split;
    m.location[s.id] = s.location;
    (*split == Split::kTrain ? m.train_count : m.val_count)++;
  }
  return m;
}

inline nlohmann::json split_to_json(const SplitManifest& m) {
  nlohmann::json scenes = nlohmann::json::object();
  for (const auto& [id, split] : m.assignment) {
    scenes[id] = {{"split", split == Split::kTrain ? "train" : "val"}, {"location", m.location.at(id)}};
  }
  return {{"scenes", scenes}, {"train_count", m.train_count}, {"val_count", m.val_count}};
}

}  // namespace unibev
