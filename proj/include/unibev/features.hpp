#pragma once

// Feature grids and the bilinear sampler.
//
// Sampling coordinates are in feature-cell units: u is the column, v the row,
// cell (i, j) sits at (u, v) = (j, i). Projections produce continuous image
// coordinates where pixel k spans [k, k + 1). A cell at stride s covers
// pixels [j*s, (j+1)*s) and is centered at pixel index (j + 0.5) * s - 0.5,
// so a continuous image coordinate x maps to x / s - 0.5.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace unibev {

template <typename T>
struct FeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  int stride = 1;
  std::vector<T> data;  // (row, col, channel)

  FeatureMap() = default;
  FeatureMap(int h, int w, int c, int s = 1) : height(h), width(w), channels(c), stride(s) {
    if (h <= 0 || w <= 0 || c <= 0 || s < 1) throw std::invalid_argument("invalid feature map shape");
    data.assign(static_cast<std::size_t>(h) * w * c, T(0));
  }

  std::size_t offset(int r, int c) const { return (static_cast<std::size_t>(r) * width + c) * channels; }
  T* at(int r, int c) { return data.data() + offset(r, c); }
  const T* at(int r, int c) const { return data.data() + offset(r, c); }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  template <typename U>
  FeatureMap<U> cast() const {
    FeatureMap<U> out;
    out.height = height;
    out.width = width;
    out.channels = channels;
    out.stride = stride;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

/// Images are stride-1 feature maps with 3 channels in [0, 1].
using Image = FeatureMap<float>;

template <typename T>
struct MultiScaleFeatures {
  std::vector<FeatureMap<T>> levels;

  int num_levels() const { return static_cast<int>(levels.size()); }
  int channels() const { return levels.empty() ? 0 : levels.front().channels; }

  void validate() const {
    for (std::size_t l = 1; l < levels.size(); ++l) {
      if (levels[l].stride <= levels[l - 1].stride) throw std::invalid_argument("level strides must increase");
      if (levels[l].channels != levels[0].channels) throw std::invalid_argument("level channel widths differ");
    }
  }

  template <typename U>
  MultiScaleFeatures<U> cast() const {
    MultiScaleFeatures<U> out;
    for (const auto& l : levels) out.levels.push_back(l.template cast<U>());
    return out;
  }
};

inline double image_to_feature(double image_coord, int stride) { return image_coord / stride - 0.5; }

/// The (up to) four lattice neighbours touched by a bilinear sample.
struct BilinearStencil {
  int x0 = 0, y0 = 0;
  double fx = 0.0, fy = 0.0;
  bool in_bounds = false;

  // Neighbour k: (dx, dy) = (k & 1, k >> 1).
  double weight(int k) const {
    const double wx = (k & 1) ? fx : 1.0 - fx;
    const double wy = (k >> 1) ? fy : 1.0 - fy;
    return wx * wy;
  }
};

/// Neighbour selection is one-sided at the far border: u == width - 1 uses
/// columns (width - 2, width - 1) with fx = 1, so derivatives there are the
/// left-sided ones.
inline BilinearStencil bilinear_stencil(int width, int height, double u, double v) {
  BilinearStencil s;
  if (!(u >= 0.0 && u <= width - 1.0 && v >= 0.0 && v <= height - 1.0)) return s;
  s.in_bounds = true;
  s.x0 = width >= 2 ? std::min(static_cast<int>(std::floor(u)), width - 2) : 0;
  s.y0 = height >= 2 ? std::min(static_cast<int>(std::floor(v)), height - 2) : 0;
  s.fx = u - s.x0;
  s.fy = v - s.y0;
  return s;
}

/// Bilinear interpolation in feature-cell coordinates; zeros and false
/// outside [0, width-1] x [0, height-1].
template <typename T>
bool bilinear_sample(const FeatureMap<T>& map, double u, double v, std::span<T> out) {
  std::fill(out.begin(), out.end(), T(0));
  const BilinearStencil s = bilinear_stencil(map.width, map.height, u, v);
  if (!s.in_bounds) return false;
  for (int k = 0; k < 4; ++k) {
    const int x = s.x0 + (k & 1);
    const int y = s.y0 + (k >> 1);
    const T w = static_cast<T>(s.weight(k));
    if (x >= map.width || y >= map.height || w == T(0)) continue;
    const T* cell = map.at(y, x);
    for (int c = 0; c < map.channels; ++c) out[c] += w * cell[c];
  }
  return true;
}

template <typename T>
std::vector<T> bilinear_sample(const FeatureMap<T>& map, double u, double v, bool* in_bounds = nullptr) {
  std::vector<T> out(map.channels);
  const bool ok = bilinear_sample(map, u, v, std::span<T>(out));
  if (in_bounds) *in_bounds = ok;
  return out;
}

template <typename T>
struct BilinearGrad {
  int count = 0;
  std::array<int, 4> rows{};
  std::array<int, 4> cols{};
  std::array<T, 4> weights{};  // d value / d cell; cell gradient = weight * upstream
  T grad_u = T(0);
  T grad_v = T(0);

  void accumulate_into(FeatureMap<T>& grad_map, std::span<const T> upstream) const {
    for (int k = 0; k < count; ++k) {
      T* g = grad_map.at(rows[k], cols[k]);
      for (int c = 0; c < grad_map.channels; ++c) g[c] += weights[k] * upstream[c];
    }
  }
};

template <typename T>
BilinearGrad<T> bilinear_sample_grad(const FeatureMap<T>& map, double u, double v, std::span<const T> upstream) {
  BilinearGrad<T> g;
  const BilinearStencil s = bilinear_stencil(map.width, map.height, u, v);
  if (!s.in_bounds) return g;
  const T fx = static_cast<T>(s.fx), fy = static_cast<T>(s.fy);
  auto cell = [&](int dx, int dy) -> const T* {
    const int x = s.x0 + dx, y = s.y0 + dy;
    return (x < map.width && y < map.height) ? map.at(y, x) : nullptr;
  };
  const T* c00 = cell(0, 0);
  const T* c10 = cell(1, 0);
  const T* c01 = cell(0, 1);
  const T* c11 = cell(1, 1);
  for (int k = 0; k < 4; ++k) {
    const int x = s.x0 + (k & 1), y = s.y0 + (k >> 1);
    if (x >= map.width || y >= map.height) continue;
    g.rows[g.count] = y;
    g.cols[g.count] = x;
    g.weights[g.count] = static_cast<T>(s.weight(k));
    ++g.count;
  }
  // Missing neighbours (single-row/col maps) contribute zero to the slopes.
  for (int c = 0; c < map.channels; ++c) {
    const T v00 = c00 ? c00[c] : T(0), v10 = c10 ? c10[c] : T(0);
    const T v01 = c01 ? c01[c] : T(0), v11 = c11 ? c11[c] : T(0);
    const T du = (map.width >= 2) ? (T(1) - fy) * (v10 - v00) + fy * (v11 - v01) : T(0);
    const T dv = (map.height >= 2) ? (T(1) - fx) * (v01 - v00) + fx * (v11 - v10) : T(0);
    g.grad_u += upstream[c] * du;
    g.grad_v += upstream[c] * dv;
  }
  return g;
}

}  // namespace unibev
