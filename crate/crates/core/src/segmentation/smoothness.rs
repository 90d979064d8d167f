use std::collections::{BTreeMap, BTreeSet};

use crate::geometry::{covariance, eig_sym3, Point3};
use crate::linalg::Vector3;
use crate::scalar::Real;
use crate::voxel_map::{CellIndex, DynamicVoxelGrid, LocalMapView};

use super::{apply_components, neighbor_offsets, DisjointSets, SegmentationUpdate, SegmenterParams, SegmentsState};

/// Surface normal and curvature estimated at a cell center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellNormal<T> {
    pub normal: Vector3<T>,
    /// `λ₃ / (λ₁ + λ₂ + λ₃)` of the neighborhood covariance.
    pub curvature: T,
    /// Fewer than three neighbors: curvature forced to 0, normal arbitrary.
    pub degenerate: bool,
}

const NORMAL_SEARCH_REACH: i64 = 3;

/// Normal of `cell` from its `k` nearest cells in `candidates` (itself
/// included), ties broken by cell order.
pub fn estimate_normal<T: Real>(
    cell: &CellIndex,
    candidates: &BTreeSet<CellIndex>,
    grid: &DynamicVoxelGrid<T>,
    k: usize,
) -> CellNormal<T> {
    let center = grid.cell_center(cell);
    let mut near: Vec<(T, CellIndex)> = Vec::new();
    let r = NORMAL_SEARCH_REACH;
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                let n = cell.offset(dx, dy, dz);
                if candidates.contains(&n) {
                    near.push(((grid.cell_center(&n) - center).norm_squared(), n));
                }
            }
        }
    }
    near.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    near.truncate(k);
    let pts: Vec<Point3<T>> = near.iter().map(|(_, c)| grid.cell_center(c)).collect();
    let degenerate = || CellNormal {
        normal: Vector3::new(T::zero(), T::zero(), T::one()),
        curvature: T::zero(),
        degenerate: true,
    };
    if pts.len() < 3 {
        return degenerate();
    }
    let Ok((cov, _)) = covariance(&pts) else { return degenerate() };
    let Ok(eig) = eig_sym3(&cov) else { return degenerate() };
    let total = eig.values[0] + eig.values[1] + eig.values[2];
    if !(total > T::zero()) {
        return degenerate();
    }
    CellNormal {
        normal: eig.vectors[2],
        curvature: eig.values[2].max(T::zero()) / total,
        degenerate: false,
    }
}

#[inline]
pub(crate) fn normals_agree<T: Real>(a: &CellNormal<T>, b: &CellNormal<T>, cos_threshold: T) -> bool {
    a.normal.dot(&b.normal).abs() > cos_threshold
}

/// Smoothness-constrained region growing.
///
/// Cells with curvature below `curvature_seed_threshold` are seeds; two
/// neighboring seeds share a region when their normals differ by less than
/// `smoothness_angle_threshold`. Non-seed cells join the neighboring seed
/// region with the most similar normal (if within the threshold) but never
/// connect regions themselves.
pub fn grow_smoothness<T: Real>(
    state: &mut SegmentsState<T>,
    newly_active: &[CellIndex],
    view: &LocalMapView<T>,
    grid: &DynamicVoxelGrid<T>,
    params: &SegmenterParams,
) -> SegmentationUpdate {
    debug_assert!(newly_active.iter().all(|c| view.contains(c)));
    let cells: Vec<CellIndex> = newly_active
        .iter()
        .filter(|c| state.owner_of(c).is_none() && !state.is_ground(c))
        .copied()
        .collect();
    if cells.is_empty() {
        return SegmentationUpdate::default();
    }
    state.non_ground.extend(cells.iter().copied());
    for c in &cells {
        let n = estimate_normal(c, &state.non_ground, grid, params.normal_neighborhood_k);
        state.normals.insert(*c, n);
    }

    let seed_thr = T::lit(params.curvature_seed_threshold);
    let cos_thr = T::lit(params.smoothness_angle_threshold.to_radians().cos());
    let is_seed = |st: &SegmentsState<T>, c: &CellIndex| st.normals.get(c).is_some_and(|n| n.curvature < seed_thr);

    let seeds: Vec<CellIndex> = cells.iter().filter(|c| is_seed(state, c)).copied().collect();
    let seed_index: BTreeMap<CellIndex, usize> = seeds.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let offsets = neighbor_offsets(grid.voxel_size().as_f64(), params.euclidean_distance_threshold);

    let mut sets = DisjointSets::new(seeds.len());
    let mut touches = Vec::new();
    for (i, c) in seeds.iter().enumerate() {
        let nc = state.normals[c];
        for &(dx, dy, dz) in &offsets {
            let n = c.offset(dx, dy, dz);
            let Some(nn) = state.normals.get(&n) else { continue };
            if !normals_agree(&nc, nn, cos_thr) {
                continue;
            }
            if let Some(&j) = seed_index.get(&n) {
                sets.union(i, j);
            } else if let Some(seg) = state.owner_of(&n) {
                if is_seed(state, &n) {
                    touches.push((i, seg));
                }
            }
        }
    }
    let mut update = apply_components(state, &seeds, &mut sets, &touches);

    // Attach non-seed cells: the new ones, plus older unassigned ones next to new seeds.
    let mut pending: BTreeSet<CellIndex> = cells.iter().filter(|c| !is_seed(state, c)).copied().collect();
    for c in &seeds {
        for &(dx, dy, dz) in &offsets {
            let n = c.offset(dx, dy, dz);
            if state.owner_of(&n).is_none() && state.non_ground.contains(&n) && !is_seed(state, &n) {
                pending.insert(n);
            }
        }
    }
    let created: BTreeSet<_> = update.created.iter().copied().collect();
    let mut grown: BTreeSet<_> = update.grown.iter().copied().collect();
    let mut assignments = Vec::new();
    for c in &pending {
        let Some(nc) = state.normals.get(c).copied() else { continue };
        let mut best: Option<(T, CellIndex, u64)> = None;
        for &(dx, dy, dz) in &offsets {
            let n = c.offset(dx, dy, dz);
            if !is_seed(state, &n) {
                continue;
            }
            let (Some(seg), Some(nn)) = (state.owner_of(&n), state.normals.get(&n)) else { continue };
            let cos = nc.normal.dot(&nn.normal).abs();
            if cos <= cos_thr {
                continue;
            }
            let better = best.as_ref().map_or(true, |(bc, bn, _)| cos > *bc || (cos == *bc && n < *bn));
            if better {
                best = Some((cos, n, seg));
            }
        }
        if let Some((_, _, seg)) = best {
            assignments.push((*c, seg));
        }
    }
    for (c, seg) in assignments {
        state.assign(c, seg);
        if !created.contains(&seg) {
            grown.insert(seg);
        }
    }
    update.grown = grown.into_iter().collect();
    update
}
