use std::collections::BTreeMap;

use crate::scalar::Real;
use crate::voxel_map::{CellIndex, DynamicVoxelGrid, LocalMapView};

use super::{apply_components, neighbor_offsets, DisjointSets, SegmentationUpdate, SegmenterParams, SegmentsState};

/// Euclidean region growing seeded by newly active non-ground cells.
///
/// Two cells are connected when their centers are within
/// `euclidean_distance_threshold`. A new cell joins the segments it
/// connects to; connecting several merges them (smallest id survives).
pub fn grow_euclidean<T: Real>(
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
    for c in &cells {
        state.non_ground.insert(*c);
    }
    let index: BTreeMap<CellIndex, usize> = cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let offsets = neighbor_offsets(grid.voxel_size().as_f64(), params.euclidean_distance_threshold);
    let mut sets = DisjointSets::new(cells.len());
    let mut touches = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        for &(dx, dy, dz) in &offsets {
            let n = c.offset(dx, dy, dz);
            if let Some(&j) = index.get(&n) {
                sets.union(i, j);
            } else if let Some(seg) = state.owner_of(&n) {
                touches.push((i, seg));
            }
        }
    }
    apply_components(state, &cells, &mut sets, &touches)
}
