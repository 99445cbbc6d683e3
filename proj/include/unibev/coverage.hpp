#pragma once

// Fusion footprints: what unified fusion can reach versus serial warp-based
// fusion, which re-samples the previous BEV grid each step and so forgets
// anything that ever left the BEV range.

#include "unibev/fusion.hpp"
#include "unibev/geometry.hpp"
#include "unibev/simulator.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

namespace unibev {

/// Cell validity grid over a BevGridSpec, x-major.
using ValidityGrid = std::vector<std::uint8_t>;

/// Warps a validity grid from a past ego frame into the current one: a current
/// cell is valid iff its center, expressed in the past ego frame, lies inside
/// the past BEV range and the past cell containing it was valid.
inline ValidityGrid warp_reference(const ValidityGrid& past_validity, const Pose& past_ego, const Pose& current_ego,
                                   const BevGridSpec& spec) {
  spec.validate();
  if (past_validity.size() != static_cast<std::size_t>(spec.num_cells())) {
    throw std::invalid_argument("validity grid does not match the BEV spec");
  }
  const Pose current_to_past = past_ego.inverse() * current_ego;
  ValidityGrid out(past_validity.size(), 0);
  for (int i = 0; i < spec.x_cells; ++i) {
    for (int j = 0; j < spec.y_cells; ++j) {
      const Vec3 p = current_to_past.apply(Vec3(spec.center_x(i), spec.center_y(j), 0.0));
      if (!spec.contains(p.x(), p.y())) continue;
      const int pi = std::min(spec.x_cells - 1, static_cast<int>((p.x() - spec.x_range.first) / spec.cell_size_x()));
      const int pj = std::min(spec.y_cells - 1, static_cast<int>((p.y() - spec.y_range.first) / spec.cell_size_y()));
      out[static_cast<std::size_t>(spec.cell_index(i, j))] = past_validity[static_cast<std::size_t>(spec.cell_index(pi, pj))];
    }
  }
  return out;
}

/// Feature-level shapes the default encoder produces for a camera.
inline std::vector<LevelShape> encoder_level_shapes(const Intrinsics& k) {
  std::vector<LevelShape> out;
  for (int s = 4; s <= 32; s *= 2) out.push_back({k.height / s, k.width / s, s});
  return out;
}

struct CoverageRow {
  int past_steps = 0;
  double unified = 0.0;
  double warp = 0.0;
};

/// Per-(cell, step) reachability at the scene step `current`:
/// unified(cell, p): some (level, height, camera) sample of the cell center
///   taken through step p's virtual views is valid.
/// warp(cell, p): the same, and the cell center stays inside the BEV range of
///   every intermediate step p' in [1, p] (a serial warp chain keeps only
///   what every intermediate grid held).
/// Coverage at depth P = (number of valid pairs with p <= P) / cells.
inline std::vector<CoverageRow> coverage_analysis(const SceneSpec& scene, int max_past, const BevGridSpec& spec,
                                                  int current = -1) {
  if (current < 0) current = scene.num_steps() - 1;
  if (current >= scene.num_steps()) throw std::out_of_range("coverage step outside trajectory");
  if (max_past < 0) throw std::invalid_argument("P must be non-negative");
  const int depth = std::min(max_past, current);
  auto rig = std::make_shared<const CameraRig>(scene.rig);
  std::vector<StepGeometry> steps;
  for (int p = 0; p <= depth; ++p) steps.push_back({scene.ego(current - p), rig});
  if (scene.rig.empty()) throw std::invalid_argument("scene has no cameras");
  const auto levels = encoder_level_shapes(scene.rig[0].intrinsics);
  const std::vector<std::uint8_t> vis = step_visibility(steps, spec, levels);
  const int s = depth + 1;
  const Pose& now = scene.ego(current);

  std::vector<long long> unified(static_cast<std::size_t>(s), 0), warp(static_cast<std::size_t>(s), 0);
  for (int i = 0; i < spec.x_cells; ++i) {
    for (int j = 0; j < spec.y_cells; ++j) {
      const int cell = spec.cell_index(i, j);
      const Vec3 world = now.apply(Vec3(spec.center_x(i), spec.center_y(j), 0.0));
      bool chain_inside = true;
      for (int p = 0; p < s; ++p) {
        if (p > 0) {
          const Vec3 local = steps[static_cast<std::size_t>(p)].ego.inverse().apply(world);
          chain_inside = chain_inside && spec.contains(local.x(), local.y());
        }
        if (!vis[static_cast<std::size_t>(cell) * s + p]) continue;
        ++unified[static_cast<std::size_t>(p)];
        if (chain_inside) ++warp[static_cast<std::size_t>(p)];
      }
    }
  }
  std::vector<CoverageRow> rows;
  long long cu = 0, cw = 0;
  for (int p = 0; p <= max_past; ++p) {
    if (p < s) {
      cu += unified[static_cast<std::size_t>(p)];
      cw += warp[static_cast<std::size_t>(p)];
    }
    rows.push_back({p, static_cast<double>(cu) / spec.num_cells(), static_cast<double>(cw) / spec.num_cells()});
  }
  return rows;
}

}  // namespace unibev
