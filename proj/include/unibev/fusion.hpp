#pragma once

// Unified multi-view fusion: the sampled-value table over (step, level,
// height, camera), unified cross-attention, deformable self-attention, the
// pre-norm encoder layer, the transformer with optional self-regression, and
// the segmentation head. Every op has an explicit backward pass.

#include "unibev/feature_queue.hpp"
#include "unibev/features.hpp"
#include "unibev/geometry.hpp"
#include "unibev/nn.hpp"
#include "unibev/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace unibev {

/// Largest temporal depth P with its own positional embedding.
inline constexpr int kMaxPastSteps = 10;
inline constexpr int kDefaultSamplingPoints = 4;

// ---------------------------------------------------------------------------
// Sampled-value table

struct TableLayout {
  int x_cells = 0, y_cells = 0;
  int steps = 0;  // P + 1
  int levels = 0;
  int heights = 0;
  int cameras = 0;

  int num_cells() const { return x_cells * y_cells; }
  int entries_per_query() const { return steps * levels * heights * cameras; }
  /// Entry order within a query: step, then level, then height, then camera.
  int flat(int p, int l, int z, int cam) const { return ((p * levels + l) * heights + z) * cameras + cam; }
  int step_of(int flat_index) const { return flat_index / (cameras * heights * levels); }
  /// Index of the (p, l, z) positional embedding.
  int pos_index(int flat_index) const { return flat_index / cameras; }
};

/// Where a table value came from, so gradients can reach the features.
struct SampleSource {
  int slot = 0;  // window position (0 = current step)
  int camera = 0;
  int level = 0;
  double u = 0.0, v = 0.0;  // feature-cell coordinates
  double weight = 1.0;
};

/// Dense validity flags plus compact storage of the valid entries, grouped
/// by query in entry order.
template <typename T>
struct SampledValueTable {
  TableLayout layout;
  int channels = 0;
  std::vector<std::uint8_t> valid;    // num_cells * entries_per_query
  std::vector<int> query_begin;       // num_cells + 1, into entries
  std::vector<int> entry_flat;        // flat (p, l, z, cam) index per entry
  std::vector<T> values;              // entries * channels
  std::vector<int> source_begin;      // entries + 1, into sources
  std::vector<SampleSource> sources;

  int num_entries() const { return static_cast<int>(entry_flat.size()); }
  int valid_count(int cell) const { return query_begin[cell + 1] - query_begin[cell]; }
  bool is_valid(int cell, int p, int l, int z, int cam) const {
    return valid[static_cast<std::size_t>(cell) * layout.entries_per_query() + layout.flat(p, l, z, cam)] != 0;
  }
  std::span<const T> value(int e) const {
    return {values.data() + static_cast<std::size_t>(e) * channels, static_cast<std::size_t>(channels)};
  }

  void begin(const TableLayout& l, int c) {
    layout = l;
    channels = c;
    valid.assign(static_cast<std::size_t>(l.num_cells()) * l.entries_per_query(), 0);
    query_begin.assign(1, 0);
    entry_flat.clear();
    values.clear();
    source_begin.assign(1, 0);
    sources.clear();
  }

  void add_entry(int cell, int flat_index, std::span<const T> v, std::span<const SampleSource> src) {
    valid[static_cast<std::size_t>(cell) * layout.entries_per_query() + flat_index] = 1;
    entry_flat.push_back(flat_index);
    values.insert(values.end(), v.begin(), v.end());
    sources.insert(sources.end(), src.begin(), src.end());
    source_begin.push_back(static_cast<int>(sources.size()));
  }

  void end_query() { query_begin.push_back(num_entries()); }
};

struct LevelShape {
  int height = 0, width = 0, stride = 1;
};

/// Per-step geometry: ego pose and the rig that captured it.
struct StepGeometry {
  Pose ego;
  std::shared_ptr<const CameraRig> rig;
};

/// Visits every (cell, step, height, camera) projection of the BEV grid
/// through the virtual views of each step; steps[0] is the current one.
template <typename F>
void for_each_projection(const std::vector<StepGeometry>& steps, const BevGridSpec& spec, F&& visit) {
  spec.validate();
  if (steps.empty()) throw std::invalid_argument("window must contain the current step");
  const Pose& current = steps[0].ego;
  std::vector<std::vector<VirtualView>> views(steps.size());
  for (std::size_t p = 0; p < steps.size(); ++p) {
    for (const Camera& cam : *steps[p].rig) {
      views[p].push_back(compose_virtual_view(cam.extrinsic, cam.intrinsics, steps[p].ego, current,
                                              static_cast<int>(p), cam.id));
    }
  }
  for (int i = 0; i < spec.x_cells; ++i) {
    for (int j = 0; j < spec.y_cells; ++j) {
      const int cell = spec.cell_index(i, j);
      for (std::size_t p = 0; p < steps.size(); ++p) {
        for (int z = 0; z < spec.num_heights(); ++z) {
          const Vec3 pt(spec.center_x(i), spec.center_y(j), spec.heights[static_cast<std::size_t>(z)]);
          for (std::size_t c = 0; c < views[p].size(); ++c) {
            visit(cell, static_cast<int>(p), z, static_cast<int>(c), project_point(views[p][c], pt));
          }
        }
      }
    }
  }
}

inline bool sample_in_bounds(const LevelShape& level, double u_img, double v_img) {
  return bilinear_stencil(level.width, level.height, image_to_feature(u_img, level.stride),
                          image_to_feature(v_img, level.stride))
      .in_bounds;
}

/// valid[cell * steps + p]: the cell has at least one valid sample at step p.
/// Uses the same projection and bounds tests as gather_values.
inline std::vector<std::uint8_t> step_visibility(const std::vector<StepGeometry>& steps, const BevGridSpec& spec,
                                                 const std::vector<LevelShape>& levels) {
  const int s = static_cast<int>(steps.size());
  std::vector<std::uint8_t> vis(static_cast<std::size_t>(spec.num_cells()) * s, 0);
  for_each_projection(steps, spec, [&](int cell, int p, int, int, const Projection& pr) {
    std::uint8_t& flag = vis[static_cast<std::size_t>(cell) * s + p];
    if (flag || !pr.valid) return;
    for (const LevelShape& l : levels) {
      if (sample_in_bounds(l, pr.u, pr.v)) {
        flag = 1;
        return;
      }
    }
  });
  return vis;
}

template <typename T>
std::vector<StepGeometry> window_geometry(const QueueWindow<T>& window) {
  std::vector<StepGeometry> g;
  for (const auto& e : window) g.push_back({e->ego, e->rig});
  return g;
}

/// For every query point, step, camera and level: virtual view, projection,
/// bilinear sample. An entry is valid iff the projection is valid and the
/// sample is in bounds.
template <typename T>
SampledValueTable<T> gather_values(const QueueWindow<T>& window, const BevGridSpec& spec) {
  if (window.empty()) throw std::invalid_argument("window must contain the current step");
  if (static_cast<int>(window.size()) > kMaxPastSteps + 1) throw std::invalid_argument("window deeper than supported");
  const auto& first = window[0]->cameras;
  if (first.empty()) throw std::invalid_argument("window entry has no cameras");
  TableLayout layout{spec.x_cells, spec.y_cells, static_cast<int>(window.size()), first[0].num_levels(),
                     spec.num_heights(), static_cast<int>(first.size())};
  const int c = first[0].channels();
  for (const auto& e : window) {
    if (static_cast<int>(e->cameras.size()) != layout.cameras) throw std::invalid_argument("camera count differs");
  }
  // Projections per cell, indexed [(p * Z + z) * cams + cam].
  const std::size_t per_cell = static_cast<std::size_t>(layout.steps) * layout.heights * layout.cameras;
  std::vector<Projection> proj(static_cast<std::size_t>(layout.num_cells()) * per_cell);
  for_each_projection(window_geometry(window), spec, [&](int cell, int p, int z, int cam, const Projection& pr) {
    proj[static_cast<std::size_t>(cell) * per_cell + (static_cast<std::size_t>(p) * layout.heights + z) * layout.cameras +
         cam] = pr;
  });

  SampledValueTable<T> table;
  table.begin(layout, c);
  std::vector<T> buf(static_cast<std::size_t>(c));
  for (int cell = 0; cell < layout.num_cells(); ++cell) {
    const Projection* pc = proj.data() + static_cast<std::size_t>(cell) * per_cell;
    for (int p = 0; p < layout.steps; ++p) {
      for (int l = 0; l < layout.levels; ++l) {
        for (int z = 0; z < layout.heights; ++z) {
          for (int cam = 0; cam < layout.cameras; ++cam) {
            const Projection& pr = pc[(static_cast<std::size_t>(p) * layout.heights + z) * layout.cameras + cam];
            if (!pr.valid) continue;
            const FeatureMap<T>& map = window[static_cast<std::size_t>(p)]->cameras[cam].levels[l];
            const double u = image_to_feature(pr.u, map.stride), v = image_to_feature(pr.v, map.stride);
            if (!bilinear_sample(map, u, v, std::span<T>(buf))) continue;
            const SampleSource src{p, cam, l, u, v, 1.0};
            table.add_entry(cell, layout.flat(p, l, z, cam), buf, std::span<const SampleSource>(&src, 1));
          }
        }
      }
    }
    table.end_query();
  }
  return table;
}

/// Equal-weight temporal fusion: each (cell, level, height, camera) value is
/// replaced at every step by its mean over the valid steps.
template <typename T>
SampledValueTable<T> temporal_average_baseline(const SampledValueTable<T>& in) {
  const TableLayout& L = in.layout;
  SampledValueTable<T> out;
  out.begin(L, in.channels);
  const int groups = L.levels * L.heights * L.cameras;
  const std::size_t c = static_cast<std::size_t>(in.channels);
  std::vector<T> mean(static_cast<std::size_t>(groups) * c);
  std::vector<int> count(static_cast<std::size_t>(groups));
  std::vector<std::vector<SampleSource>> src(static_cast<std::size_t>(groups));
  for (int cell = 0; cell < L.num_cells(); ++cell) {
    std::fill(mean.begin(), mean.end(), T(0));
    std::fill(count.begin(), count.end(), 0);
    for (auto& s : src) s.clear();
    for (int e = in.query_begin[cell]; e < in.query_begin[cell + 1]; ++e) {
      const int g = in.entry_flat[e] % groups;
      const auto v = in.value(e);
      for (std::size_t k = 0; k < c; ++k) mean[static_cast<std::size_t>(g) * c + k] += v[k];
      ++count[static_cast<std::size_t>(g)];
      for (int s = in.source_begin[e]; s < in.source_begin[e + 1]; ++s) src[static_cast<std::size_t>(g)].push_back(in.sources[s]);
    }
    for (int g = 0; g < groups; ++g) {
      const int n = count[static_cast<std::size_t>(g)];
      if (n == 0) continue;
      for (std::size_t k = 0; k < c; ++k) mean[static_cast<std::size_t>(g) * c + k] /= static_cast<T>(n);
      for (auto& s : src[static_cast<std::size_t>(g)]) s.weight /= n;
    }
    for (int p = 0; p < L.steps; ++p) {
      for (int g = 0; g < groups; ++g) {
        if (count[static_cast<std::size_t>(g)] == 0) continue;
        out.add_entry(cell, p * groups + g, std::span<const T>(mean.data() + static_cast<std::size_t>(g) * c, c),
                      src[static_cast<std::size_t>(g)]);
      }
    }
    out.end_query();
  }
  return out;
}

/// Routes per-entry value gradients to the feature maps of window slot 0
/// (past slots are fixed inputs). grads[cam][level] must match the features.
template <typename T>
void scatter_value_grads(const SampledValueTable<T>& table, const std::vector<T>& dvalues,
                         std::vector<std::vector<FeatureMap<T>>>& grads) {
  const std::size_t c = static_cast<std::size_t>(table.channels);
  std::vector<T> up(c);
  for (int e = 0; e < table.num_entries(); ++e) {
    const T* dv = dvalues.data() + static_cast<std::size_t>(e) * c;
    for (int s = table.source_begin[e]; s < table.source_begin[e + 1]; ++s) {
      const SampleSource& src = table.sources[s];
      if (src.slot != 0) continue;
      FeatureMap<T>& g = grads[static_cast<std::size_t>(src.camera)][static_cast<std::size_t>(src.level)];
      const BilinearStencil st = bilinear_stencil(g.width, g.height, src.u, src.v);
      if (!st.in_bounds) continue;
      for (int k = 0; k < 4; ++k) {
        const int x = st.x0 + (k & 1), y = st.y0 + (k >> 1);
        if (x >= g.width || y >= g.height) continue;
        const T w = static_cast<T>(st.weight(k) * src.weight);
        if (w == T(0)) continue;
        T* cell = g.at(y, x);
        for (std::size_t ch = 0; ch < c; ++ch) cell[ch] += w * dv[ch];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Unified cross-attention

template <typename T>
struct CrossAttentionParams {
  Linear<T> query;        // C -> C
  Tensor<T> key_weight;   // (C, C); logits use (W_q x + b_q)^T W_k (F + pos)
  Linear<T> value;        // C -> C

  static CrossAttentionParams zeros(int c) {
    return {Linear<T>::zeros(c, c), Tensor<T>({static_cast<std::size_t>(c), static_cast<std::size_t>(c)}),
            Linear<T>::zeros(c, c)};
  }
};

template <typename T>
struct CrossAttentionCache {
  RowMat<T> x, qt, kt, fbar;
  std::vector<T> attention;  // aligned with table entries
  int skipped = 0;           // queries with no valid entry
};

/// Residual update per query: W_v sum_e a_e F_e + b_v, with a = softmax over
/// the query's valid entries of k~ . (F_e + pos_e) / sqrt(C). Queries without
/// valid entries get a zero update. `pos` is (P_max + 1, L, Z, C) or empty.
template <typename T>
RowMat<T> cross_attention_delta(const RowMat<T>& x, const SampledValueTable<T>& table,
                                const CrossAttentionParams<T>& p, const Tensor<T>& pos,
                                CrossAttentionCache<T>* cache = nullptr) {
  const int n = static_cast<int>(x.rows()), c = static_cast<int>(x.cols());
  if (n != table.layout.num_cells() || c != table.channels) throw std::invalid_argument("table/query shape mismatch");
  const bool has_pos = pos.size() > 0;
  const RowMat<T> qt = linear_forward(x, p.query);
  const RowMat<T> kt = qt * as_matrix(p.key_weight);
  const T scale = T(1) / std::sqrt(static_cast<T>(c));
  std::vector<T> attn(static_cast<std::size_t>(table.num_entries()));
  RowMat<T> fbar = RowMat<T>::Zero(n, c);
  std::vector<std::uint8_t> has(static_cast<std::size_t>(n), 0);
  int skipped = 0;
  for (int q = 0; q < n; ++q) {
    const int b = table.query_begin[q], e1 = table.query_begin[q + 1];
    if (b == e1) {
      ++skipped;
      continue;
    }
    has[static_cast<std::size_t>(q)] = 1;
    for (int e = b; e < e1; ++e) {
      const T* f = table.values.data() + static_cast<std::size_t>(e) * c;
      const T* ps = has_pos ? pos.ptr() + static_cast<std::size_t>(table.layout.pos_index(table.entry_flat[e])) * c : nullptr;
      T acc = T(0);
      for (int k = 0; k < c; ++k) acc += kt(q, k) * (f[k] + (ps ? ps[k] : T(0)));
      attn[static_cast<std::size_t>(e)] = acc * scale;
    }
    softmax_inplace(std::span<T>(attn.data() + b, static_cast<std::size_t>(e1 - b)));
    for (int e = b; e < e1; ++e) {
      const T a = attn[static_cast<std::size_t>(e)];
      const T* f = table.values.data() + static_cast<std::size_t>(e) * c;
      for (int k = 0; k < c; ++k) fbar(q, k) += a * f[k];
    }
  }
  RowMat<T> delta = linear_forward(fbar, p.value);
  for (int q = 0; q < n; ++q) {
    if (!has[static_cast<std::size_t>(q)]) delta.row(q).setZero();
  }
  if (cache) {
    cache->x = x;
    cache->qt = qt;
    cache->kt = kt;
    cache->fbar = std::move(fbar);
    cache->attention = std::move(attn);
    cache->skipped = skipped;
  }
  return delta;
}

/// Returns dX. Accumulates parameter grads, d(pos) when given, and
/// per-entry value grads into `dvalues` (entries * C) when given.
template <typename T>
RowMat<T> cross_attention_backward(const CrossAttentionCache<T>& cache, const SampledValueTable<T>& table,
                                   const CrossAttentionParams<T>& p, const Tensor<T>& pos, const RowMat<T>& ddelta,
                                   CrossAttentionParams<T>& grad, Tensor<T>* dpos, std::vector<T>* dvalues) {
  const int n = static_cast<int>(cache.x.rows()), c = static_cast<int>(cache.x.cols());
  const bool has_pos = pos.size() > 0;
  const T scale = T(1) / std::sqrt(static_cast<T>(c));
  RowMat<T> dy = ddelta;
  for (int q = 0; q < n; ++q) {
    if (table.valid_count(q) == 0) dy.row(q).setZero();
  }
  RowMat<T> dfbar = RowMat<T>::Zero(n, c);
  linear_backward(cache.fbar, p.value, dy, grad.value, &dfbar);
  RowMat<T> dkt = RowMat<T>::Zero(n, c);
  std::vector<T> g;
  for (int q = 0; q < n; ++q) {
    const int b = table.query_begin[q], e1 = table.query_begin[q + 1];
    if (b == e1) continue;
    g.assign(static_cast<std::size_t>(e1 - b), T(0));
    T ga = T(0);
    for (int e = b; e < e1; ++e) {
      const T* f = table.values.data() + static_cast<std::size_t>(e) * c;
      T acc = T(0);
      for (int k = 0; k < c; ++k) acc += dfbar(q, k) * f[k];
      g[static_cast<std::size_t>(e - b)] = acc;
      ga += cache.attention[static_cast<std::size_t>(e)] * acc;
    }
    for (int e = b; e < e1; ++e) {
      const T a = cache.attention[static_cast<std::size_t>(e)];
      const T dlogit = a * (g[static_cast<std::size_t>(e - b)] - ga) * scale;
      const T* f = table.values.data() + static_cast<std::size_t>(e) * c;
      const int pi = table.layout.pos_index(table.entry_flat[e]);
      const T* ps = has_pos ? pos.ptr() + static_cast<std::size_t>(pi) * c : nullptr;
      for (int k = 0; k < c; ++k) dkt(q, k) += dlogit * (f[k] + (ps ? ps[k] : T(0)));
      if (dpos && has_pos) {
        T* dp = dpos->ptr() + static_cast<std::size_t>(pi) * c;
        for (int k = 0; k < c; ++k) dp[k] += dlogit * cache.kt(q, k);
      }
      if (dvalues) {
        T* dv = dvalues->data() + static_cast<std::size_t>(e) * c;
        for (int k = 0; k < c; ++k) dv[k] += a * dfbar(q, k) + dlogit * cache.kt(q, k);
      }
    }
  }
  // kt = qt W_k
  as_matrix(grad.key_weight).noalias() += cache.qt.transpose() * dkt;
  const RowMat<T> dqt = dkt * as_matrix(p.key_weight).transpose();
  RowMat<T> dx = RowMat<T>::Zero(n, c);
  linear_backward(cache.x, p.query, dqt, grad.query, &dx);
  return dx;
}

/// Public form: q + cross_attention_delta(q).
template <typename T>
RowMat<T> unified_cross_attention(const RowMat<T>& q, const SampledValueTable<T>& table,
                                  const CrossAttentionParams<T>& p, const Tensor<T>& pos,
                                  CrossAttentionCache<T>* cache = nullptr) {
  return q + cross_attention_delta(q, table, p, pos, cache);
}

// ---------------------------------------------------------------------------
// Deformable self-attention over the query grid

template <typename T>
struct DeformableParams {
  Linear<T> offset;  // C -> 2M, rows (du_m, dv_m): du along grid columns (y), dv along rows (x)
  Linear<T> logits;  // C -> M

  int points() const { return static_cast<int>(logits.bias.size()); }

  static DeformableParams zeros(int c, int m) { return {Linear<T>::zeros(c, 2 * m), Linear<T>::zeros(c, m)}; }
};

template <typename T>
struct DeformableCache {
  RowMat<T> x;
  FeatureMap<T> grid;
  RowMat<T> offsets, attention;  // (N, 2M), (N, M)
  RowMat<T> samples;             // (N * M, C)
};

template <typename T>
FeatureMap<T> to_grid(const RowMat<T>& x, int x_cells, int y_cells) {
  if (x.rows() != static_cast<Eigen::Index>(x_cells) * y_cells) throw std::invalid_argument("query count mismatch");
  FeatureMap<T> g(x_cells, y_cells, static_cast<int>(x.cols()));
  std::copy(x.data(), x.data() + x.size(), g.data.begin());
  return g;
}

template <typename T>
RowMat<T> from_grid(const FeatureMap<T>& g) {
  return ConstMatMap<T>(g.data.data(), static_cast<Eigen::Index>(g.height) * g.width, g.channels);
}

/// Residual update per query: sum_m softmax(logits)_m * sample(x, cell + offset_m).
template <typename T>
RowMat<T> deformable_delta(const RowMat<T>& x, int x_cells, int y_cells, const DeformableParams<T>& p,
                           DeformableCache<T>* cache = nullptr) {
  const int n = static_cast<int>(x.rows()), c = static_cast<int>(x.cols()), m = p.points();
  const FeatureMap<T> grid = to_grid(x, x_cells, y_cells);
  const RowMat<T> off = linear_forward(x, p.offset);
  RowMat<T> attn = linear_forward(x, p.logits);
  RowMat<T> samples(static_cast<Eigen::Index>(n) * m, c);
  RowMat<T> delta = RowMat<T>::Zero(n, c);
  for (int q = 0; q < n; ++q) {
    softmax_inplace(std::span<T>(attn.row(q).data(), static_cast<std::size_t>(m)));
    const int i = q / y_cells, j = q % y_cells;
    for (int k = 0; k < m; ++k) {
      const double u = j + static_cast<double>(off(q, 2 * k)), v = i + static_cast<double>(off(q, 2 * k + 1));
      T* s = samples.row(static_cast<Eigen::Index>(q) * m + k).data();
      bilinear_sample(grid, u, v, std::span<T>(s, static_cast<std::size_t>(c)));
      for (int ch = 0; ch < c; ++ch) delta(q, ch) += attn(q, k) * s[ch];
    }
  }
  if (cache) {
    cache->x = x;
    cache->grid = grid;
    cache->offsets = off;
    cache->attention = std::move(attn);
    cache->samples = std::move(samples);
  }
  return delta;
}

template <typename T>
RowMat<T> deformable_backward(const DeformableCache<T>& cache, int y_cells, const DeformableParams<T>& p,
                              const RowMat<T>& ddelta, DeformableParams<T>& grad) {
  const int n = static_cast<int>(cache.x.rows()), c = static_cast<int>(cache.x.cols()), m = p.points();
  FeatureMap<T> dgrid(cache.grid.height, cache.grid.width, c);
  RowMat<T> doff = RowMat<T>::Zero(n, 2 * m);
  RowMat<T> dlogit = RowMat<T>::Zero(n, m);
  std::vector<T> up(static_cast<std::size_t>(c)), gs(static_cast<std::size_t>(m));
  for (int q = 0; q < n; ++q) {
    const int i = q / y_cells, j = q % y_cells;
    T ga = T(0);
    for (int k = 0; k < m; ++k) {
      const T* s = cache.samples.row(static_cast<Eigen::Index>(q) * m + k).data();
      T acc = T(0);
      for (int ch = 0; ch < c; ++ch) acc += ddelta(q, ch) * s[ch];
      gs[static_cast<std::size_t>(k)] = acc;
      ga += cache.attention(q, k) * acc;
    }
    for (int k = 0; k < m; ++k) {
      const T a = cache.attention(q, k);
      dlogit(q, k) = a * (gs[static_cast<std::size_t>(k)] - ga);
      for (int ch = 0; ch < c; ++ch) up[static_cast<std::size_t>(ch)] = a * ddelta(q, ch);
      const double u = j + static_cast<double>(cache.offsets(q, 2 * k));
      const double v = i + static_cast<double>(cache.offsets(q, 2 * k + 1));
      const BilinearGrad<T> bg = bilinear_sample_grad(cache.grid, u, v, std::span<const T>(up));
      bg.accumulate_into(dgrid, std::span<const T>(up));
      doff(q, 2 * k) += bg.grad_u;
      doff(q, 2 * k + 1) += bg.grad_v;
    }
  }
  RowMat<T> dx = from_grid(dgrid);
  linear_backward(cache.x, p.offset, doff, grad.offset, &dx);
  linear_backward(cache.x, p.logits, dlogit, grad.logits, &dx);
  return dx;
}

/// Public form: q + deformable_delta(q).
template <typename T>
RowMat<T> deformable_self_attention(const RowMat<T>& q, int x_cells, int y_cells, const DeformableParams<T>& p) {
  return q + deformable_delta(q, x_cells, y_cells, p);
}

// ---------------------------------------------------------------------------
// Encoder layer

template <typename T>
struct LayerParams {
  LayerNormParams<T> norm_self;
  DeformableParams<T> self_attn;
  LayerNormParams<T> norm_cross;
  CrossAttentionParams<T> cross_attn;
  LayerNormParams<T> norm_ffn;
  Linear<T> ffn_in;   // C -> 2C
  Linear<T> ffn_out;  // 2C -> C

  static LayerParams zeros(int c, int m) {
    return {LayerNormParams<T>::zeros(c), DeformableParams<T>::zeros(c, m), LayerNormParams<T>::zeros(c),
            CrossAttentionParams<T>::zeros(c),  LayerNormParams<T>::zeros(c), Linear<T>::zeros(c, 2 * c),
            Linear<T>::zeros(2 * c, c)};
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "norm_self.gamma", norm_self.gamma);
    f(prefix + "norm_self.beta", norm_self.beta);
    f(prefix + "self_attn.offset.weight", self_attn.offset.weight);
    f(prefix + "self_attn.offset.bias", self_attn.offset.bias);
    f(prefix + "self_attn.logits.weight", self_attn.logits.weight);
    f(prefix + "self_attn.logits.bias", self_attn.logits.bias);
    f(prefix + "norm_cross.gamma", norm_cross.gamma);
    f(prefix + "norm_cross.beta", norm_cross.beta);
    f(prefix + "cross_attn.query.weight", cross_attn.query.weight);
    f(prefix + "cross_attn.query.bias", cross_attn.query.bias);
    f(prefix + "cross_attn.key.weight", cross_attn.key_weight);
    f(prefix + "cross_attn.value.weight", cross_attn.value.weight);
    f(prefix + "cross_attn.value.bias", cross_attn.value.bias);
    f(prefix + "norm_ffn.gamma", norm_ffn.gamma);
    f(prefix + "norm_ffn.beta", norm_ffn.beta);
    f(prefix + "ffn_in.weight", ffn_in.weight);
    f(prefix + "ffn_in.bias", ffn_in.bias);
    f(prefix + "ffn_out.weight", ffn_out.weight);
    f(prefix + "ffn_out.bias", ffn_out.bias);
  }
};

template <typename T>
struct LayerCache {
  LayerNormCache<T> norm_self, norm_cross, norm_ffn;
  DeformableCache<T> self_attn;
  CrossAttentionCache<T> cross_attn;
  RowMat<T> ffn_x, ffn_hidden;
};

/// Pre-norm: q += DSA(LN(q)); q += CA(LN(q)); q += FFN(LN(q)).
template <typename T>
RowMat<T> encoder_layer(const RowMat<T>& q, int x_cells, int y_cells, const SampledValueTable<T>& table,
                        const LayerParams<T>& p, const Tensor<T>& pos, LayerCache<T>* cache = nullptr) {
  LayerCache<T> local;
  LayerCache<T>& cc = cache ? *cache : local;
  const bool keep = cache != nullptr;
  RowMat<T> h = q;
  h += deformable_delta(layer_norm_forward(h, p.norm_self, &cc.norm_self), x_cells, y_cells, p.self_attn,
                        keep ? &cc.self_attn : nullptr);
  h += cross_attention_delta(layer_norm_forward(h, p.norm_cross, &cc.norm_cross), table, p.cross_attn, pos,
                             &cc.cross_attn);
  RowMat<T> fx = layer_norm_forward(h, p.norm_ffn, &cc.norm_ffn);
  RowMat<T> hid = linear_forward(fx, p.ffn_in);
  relu_inplace(hid);
  h += linear_forward(hid, p.ffn_out);
  if (keep) {
    cc.ffn_x = std::move(fx);
    cc.ffn_hidden = std::move(hid);
  }
  return h;
}

template <typename T>
RowMat<T> encoder_layer_backward(const LayerCache<T>& cc, int y_cells, const SampledValueTable<T>& table,
                                 const LayerParams<T>& p, const Tensor<T>& pos, const RowMat<T>& dout,
                                 LayerParams<T>& grad, Tensor<T>* dpos, std::vector<T>* dvalues) {
  RowMat<T> dq = dout;
  {
    RowMat<T> dhid = RowMat<T>::Zero(cc.ffn_hidden.rows(), cc.ffn_hidden.cols());
    linear_backward(cc.ffn_hidden, p.ffn_out, dout, grad.ffn_out, &dhid);
    relu_backward_inplace(cc.ffn_hidden, dhid);
    RowMat<T> dfx = RowMat<T>::Zero(cc.ffn_x.rows(), cc.ffn_x.cols());
    linear_backward(cc.ffn_x, p.ffn_in, dhid, grad.ffn_in, &dfx);
    dq += layer_norm_backward(cc.norm_ffn, p.norm_ffn, dfx, grad.norm_ffn);
  }
  {
    const RowMat<T> dx = cross_attention_backward(cc.cross_attn, table, p.cross_attn, pos, dq, grad.cross_attn, dpos,
                                                  dvalues);
    dq += layer_norm_backward(cc.norm_cross, p.norm_cross, dx, grad.norm_cross);
  }
  {
    const RowMat<T> dx = deformable_backward(cc.self_attn, y_cells, p.self_attn, dq, grad.self_attn);
    dq += layer_norm_backward(cc.norm_self, p.norm_self, dx, grad.norm_self);
  }
  return dq;
}

// ---------------------------------------------------------------------------
// Segmentation head

template <typename T>
struct HeadParams {
  LayerNormParams<T> norm;
  Linear<T> hidden;        // C -> H
  Tensor<T> up_weight;     // (u * u * K, H), row (a * u + b) * K + k
  Tensor<T> up_bias;       // (K)

  static HeadParams zeros(int c, int hidden_width, int upsample, int classes) {
    return {LayerNormParams<T>::zeros(c), Linear<T>::zeros(c, hidden_width),
            Tensor<T>({static_cast<std::size_t>(upsample * upsample * classes), static_cast<std::size_t>(hidden_width)}),
            Tensor<T>({static_cast<std::size_t>(classes)})};
  }

  int num_classes() const { return static_cast<int>(up_bias.size()); }
  int upsample() const {
    return static_cast<int>(std::lround(std::sqrt(static_cast<double>(up_weight.shape[0] / up_bias.size()))));
  }
};

template <typename T>
struct HeadCache {
  LayerNormCache<T> norm;
  RowMat<T> x, hidden;
};

/// LN, pointwise hidden layer with ReLU, then a non-overlapping u x u
/// transposed convolution to per-pixel class logits (class 0 = background).
/// Output grid: (X * u) x (Y * u) x K.
template <typename T>
FeatureMap<T> segmentation_head(const RowMat<T>& q, int x_cells, int y_cells, const HeadParams<T>& p,
                                HeadCache<T>* cache = nullptr) {
  const int u = p.upsample(), k = p.num_classes();
  LayerNormCache<T> nc;
  RowMat<T> x = layer_norm_forward(q, p.norm, &nc);
  RowMat<T> hid = linear_forward(x, p.hidden);
  relu_inplace(hid);
  const RowMat<T> z = hid * as_matrix(p.up_weight).transpose();
  FeatureMap<T> out(x_cells * u, y_cells * u, k);
  for (int i = 0; i < x_cells; ++i) {
    for (int j = 0; j < y_cells; ++j) {
      const int qi = i * y_cells + j;
      for (int a = 0; a < u; ++a) {
        for (int b = 0; b < u; ++b) {
          T* o = out.at(i * u + a, j * u + b);
          for (int c = 0; c < k; ++c) o[c] = z(qi, (a * u + b) * k + c) + p.up_bias[static_cast<std::size_t>(c)];
        }
      }
    }
  }
  if (cache) {
    cache->norm = std::move(nc);
    cache->x = std::move(x);
    cache->hidden = std::move(hid);
  }
  return out;
}

template <typename T>
RowMat<T> segmentation_head_backward(const HeadCache<T>& cache, int x_cells, int y_cells, const HeadParams<T>& p,
                                     const FeatureMap<T>& dlogits, HeadParams<T>& grad) {
  const int u = p.upsample(), k = p.num_classes();
  RowMat<T> dz(static_cast<Eigen::Index>(x_cells) * y_cells, u * u * k);
  for (int i = 0; i < x_cells; ++i) {
    for (int j = 0; j < y_cells; ++j) {
      const int qi = i * y_cells + j;
      for (int a = 0; a < u; ++a) {
        for (int b = 0; b < u; ++b) {
          const T* g = dlogits.at(i * u + a, j * u + b);
          for (int c = 0; c < k; ++c) {
            dz(qi, (a * u + b) * k + c) = g[c];
            grad.up_bias[static_cast<std::size_t>(c)] += g[c];
          }
        }
      }
    }
  }
  as_matrix(grad.up_weight).noalias() += dz.transpose() * cache.hidden;
  RowMat<T> dhid = dz * as_matrix(p.up_weight);
  relu_backward_inplace(cache.hidden, dhid);
  RowMat<T> dx = RowMat<T>::Zero(cache.x.rows(), cache.x.cols());
  linear_backward(cache.x, p.hidden, dhid, grad.hidden, &dx);
  return layer_norm_backward(cache.norm, p.norm, dx, grad.norm);
}

// ---------------------------------------------------------------------------
// Transformer and parameters

struct FusionConfig {
  int channels = 32;
  int layers = 12;
  int points = kDefaultSamplingPoints;
  int levels = 4;
  int num_classes = 3;
  int query_x = 50, query_y = 50;
  int upsample = 4;
  int head_hidden = 32;
  std::vector<double> heights = default_heights();
  bool self_regression = false;

  void validate() const {
    if (channels <= 0 || layers < 0 || points <= 0 || levels <= 0 || num_classes < 2 || query_x <= 0 ||
        query_y <= 0 || upsample <= 0 || head_hidden <= 0 || heights.empty()) {
      throw std::invalid_argument("invalid fusion configuration");
    }
  }

  int num_queries() const { return query_x * query_y; }
};

template <typename T>
struct FusionParams {
  Tensor<T> queries;   // (X * Y, C), x-major
  Linear<T> proj_in;   // 2C -> C
  std::vector<LayerParams<T>> layers;
  // Positional embedding of entry (p, l, z) = pos_step[p] + pos_level[l] +
  // pos_height[z]; no dimension depends on P.
  Tensor<T> pos_step;    // (P_max + 1, C)
  Tensor<T> pos_level;   // (L, C)
  Tensor<T> pos_height;  // (Z, C)
  HeadParams<T> head;

  static FusionParams zeros(const FusionConfig& cfg) {
    cfg.validate();
    FusionParams p;
    const auto c = static_cast<std::size_t>(cfg.channels);
    p.queries = Tensor<T>({static_cast<std::size_t>(cfg.num_queries()), c});
    p.proj_in = Linear<T>::zeros(2 * cfg.channels, cfg.channels);
    for (int k = 0; k < cfg.layers; ++k) p.layers.push_back(LayerParams<T>::zeros(cfg.channels, cfg.points));
    p.pos_step = Tensor<T>({static_cast<std::size_t>(kMaxPastSteps + 1), c});
    p.pos_level = Tensor<T>({static_cast<std::size_t>(cfg.levels), c});
    p.pos_height = Tensor<T>({cfg.heights.size(), c});
    p.head = HeadParams<T>::zeros(cfg.channels, cfg.head_hidden, cfg.upsample, cfg.num_classes);
    return p;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "queries", queries);
    f(prefix + "proj_in.weight", proj_in.weight);
    f(prefix + "proj_in.bias", proj_in.bias);
    for (std::size_t k = 0; k < layers.size(); ++k) layers[k].visit(prefix + "layer" + std::to_string(k) + ".", f);
    f(prefix + "pos_step", pos_step);
    f(prefix + "pos_level", pos_level);
    f(prefix + "pos_height", pos_height);
    f(prefix + "head.norm.gamma", head.norm.gamma);
    f(prefix + "head.norm.beta", head.norm.beta);
    f(prefix + "head.hidden.weight", head.hidden.weight);
    f(prefix + "head.hidden.bias", head.hidden.bias);
    f(prefix + "head.up.weight", head.up_weight);
    f(prefix + "head.up.bias", head.up_bias);
  }
};

/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norms,
/// N(0, 0.02) positional embeddings, N(0, 1) queries. Self-attention offset
/// biases start at the four axis neighbours.
template <typename T>
FusionParams<T> init_fusion(const FusionConfig& cfg, std::mt19937_64& rng) {
  FusionParams<T> p = FusionParams<T>::zeros(cfg);
  const int c = cfg.channels;
  init_normal(p.queries, 1.0, rng);
  init_uniform_fan_in(p.proj_in.weight, 2 * c, rng);
  for (auto& l : p.layers) {
    for (LayerNormParams<T>* n : {&l.norm_self, &l.norm_cross, &l.norm_ffn}) *n = LayerNormParams<T>::identity(c);
    init_uniform_fan_in(l.self_attn.offset.weight, c, rng);
    init_uniform_fan_in(l.self_attn.logits.weight, c, rng);
    static constexpr int kDirs[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (int m = 0; m < cfg.points; ++m) {
      l.self_attn.offset.bias[static_cast<std::size_t>(2 * m)] = static_cast<T>(kDirs[m % 4][0] * (1 + m / 4));
      l.self_attn.offset.bias[static_cast<std::size_t>(2 * m + 1)] = static_cast<T>(kDirs[m % 4][1] * (1 + m / 4));
    }
    init_uniform_fan_in(l.cross_attn.query.weight, c, rng);
    init_uniform_fan_in(l.cross_attn.key_weight, c, rng);
    init_uniform_fan_in(l.cross_attn.value.weight, c, rng);
    init_uniform_fan_in(l.ffn_in.weight, c, rng);
    init_uniform_fan_in(l.ffn_out.weight, 2 * c, rng);
  }
  init_normal(p.pos_step, 0.02, rng);
  init_normal(p.pos_level, 0.02, rng);
  init_normal(p.pos_height, 0.02, rng);
  p.head.norm = LayerNormParams<T>::identity(c);
  init_uniform_fan_in(p.head.hidden.weight, c, rng);
  init_uniform_fan_in(p.head.up_weight, cfg.head_hidden, rng);
  return p;
}

/// Dense (P_max + 1, L, Z, C) table of summed positional embeddings.
template <typename T>
Tensor<T> positional_table(const FusionParams<T>& p) {
  const std::size_t s = p.pos_step.shape[0], l = p.pos_level.shape[0], z = p.pos_height.shape[0];
  const std::size_t c = p.pos_step.shape[1];
  Tensor<T> t({s, l, z, c});
  for (std::size_t a = 0; a < s; ++a)
    for (std::size_t b = 0; b < l; ++b)
      for (std::size_t h = 0; h < z; ++h)
        for (std::size_t k = 0; k < c; ++k) {
          t[((a * l + b) * z + h) * c + k] = p.pos_step[a * c + k] + p.pos_level[b * c + k] + p.pos_height[h * c + k];
        }
  return t;
}

/// Reduces a gradient w.r.t. the dense table onto the three factors.
template <typename T>
void accumulate_positional_grad(const Tensor<T>& dtable, FusionParams<T>& grad) {
  const std::size_t s = grad.pos_step.shape[0], l = grad.pos_level.shape[0], z = grad.pos_height.shape[0];
  const std::size_t c = grad.pos_step.shape[1];
  for (std::size_t a = 0; a < s; ++a)
    for (std::size_t b = 0; b < l; ++b)
      for (std::size_t h = 0; h < z; ++h)
        for (std::size_t k = 0; k < c; ++k) {
          const T g = dtable[((a * l + b) * z + h) * c + k];
          grad.pos_step[a * c + k] += g;
          grad.pos_level[b * c + k] += g;
          grad.pos_height[h * c + k] += g;
        }
}

template <typename T>
struct TransformerCache {
  RowMat<T> concat_first, concat_second, first_output;
  std::vector<LayerCache<T>> first, second;
};

struct TransformerStats {
  long long layer_applications = 0;
  long long skipped_queries = 0;  // cross-attention queries with no valid entry
};

namespace detail {

template <typename T>
RowMat<T> concat_columns(const RowMat<T>& a, const RowMat<T>& b) {
  RowMat<T> out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

template <typename T>
RowMat<T> run_layers(RowMat<T> h, int x_cells, int y_cells, const SampledValueTable<T>& table,
                     const FusionParams<T>& p, const Tensor<T>& pos, std::vector<LayerCache<T>>* caches,
                     TransformerStats* stats) {
  if (caches) caches->assign(p.layers.size(), LayerCache<T>{});
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    LayerCache<T> tmp;
    LayerCache<T>* c = caches ? &(*caches)[k] : &tmp;
    h = encoder_layer(h, x_cells, y_cells, table, p.layers[k], pos, c);
    if (stats) {
      ++stats->layer_applications;
      stats->skipped_queries += c->cross_attn.skipped;
    }
  }
  return h;
}

}  // namespace detail

/// Input = proj_in([q0, q0]); N layers. With self-regression the output is
/// concatenated with q0, projected again and run through the same N layers.
template <typename T>
RowMat<T> run_transformer(const RowMat<T>& q0, int x_cells, int y_cells, const SampledValueTable<T>& table,
                          const FusionParams<T>& p, bool self_regression, TransformerCache<T>* cache = nullptr,
                          TransformerStats* stats = nullptr) {
  const Tensor<T> pos = positional_table(p);
  RowMat<T> cat = detail::concat_columns(q0, q0);
  RowMat<T> h = linear_forward(cat, p.proj_in);
  h = detail::run_layers(std::move(h), x_cells, y_cells, table, p, pos, cache ? &cache->first : nullptr, stats);
  if (cache) cache->concat_first = std::move(cat);
  if (!self_regression) return h;
  RowMat<T> cat2 = detail::concat_columns(h, q0);
  RowMat<T> h2 = linear_forward(cat2, p.proj_in);
  h2 = detail::run_layers(std::move(h2), x_cells, y_cells, table, p, pos, cache ? &cache->second : nullptr, stats);
  if (cache) {
    cache->first_output = std::move(h);
    cache->concat_second = std::move(cat2);
  }
  return h2;
}

/// Returns dq0; accumulates parameter grads (except queries) and value grads.
template <typename T>
RowMat<T> run_transformer_backward(const TransformerCache<T>& cache, int y_cells, const SampledValueTable<T>& table,
                                   const FusionParams<T>& p, bool self_regression, const RowMat<T>& dout,
                                   FusionParams<T>& grad, std::vector<T>* dvalues) {
  const Eigen::Index c = dout.cols();
  const Tensor<T> pos = positional_table(p);
  Tensor<T> dpos(pos.shape);
  RowMat<T> dq0 = RowMat<T>::Zero(dout.rows(), c);
  RowMat<T> dh = dout;
  auto back_layers = [&](const std::vector<LayerCache<T>>& caches, RowMat<T> d) {
    for (std::size_t k = p.layers.size(); k-- > 0;) {
      d = encoder_layer_backward(caches[k], y_cells, table, p.layers[k], pos, d, grad.layers[k], &dpos, dvalues);
    }
    return d;
  };
  if (self_regression) {
    const RowMat<T> din2 = back_layers(cache.second, std::move(dh));
    RowMat<T> dcat2 = RowMat<T>::Zero(din2.rows(), 2 * c);
    linear_backward(cache.concat_second, p.proj_in, din2, grad.proj_in, &dcat2);
    dh = dcat2.leftCols(c);
    dq0 += dcat2.rightCols(c);
  }
  const RowMat<T> din = back_layers(cache.first, std::move(dh));
  RowMat<T> dcat = RowMat<T>::Zero(din.rows(), 2 * c);
  linear_backward(cache.concat_first, p.proj_in, din, grad.proj_in, &dcat);
  dq0 += dcat.leftCols(c) + dcat.rightCols(c);
  accumulate_positional_grad(dpos, grad);
  return dq0;
}

}  // namespace unibev
