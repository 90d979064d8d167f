//! Incremental segmentation of the local map.
//!
//! Clustering works on voxel centers; raw points are attached to segments
//! through the cells they own. Each call to [`Segmenter::process`] is one
//! local-map update.

mod euclidean;
mod ground;
mod smoothness;

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, Point3, PointCloud};
use crate::scalar::Real;
use crate::voxel_map::{CellIndex, DynamicVoxelGrid, LocalMapView};

pub use euclidean::grow_euclidean;
pub use ground::{remove_ground, GroundPartition, Plane};
pub use smoothness::{estimate_normal, grow_smoothness, CellNormal};

pub type SegmentId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationMethod {
    #[default]
    Euclidean,
    Smoothness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterParams {
    pub method: SegmentationMethod,
    /// Meters between voxel centers for two cells to be neighbors.
    pub euclidean_distance_threshold: f64,
    pub min_segment_points: usize,
    pub max_segment_points: usize,
    pub normal_neighborhood_k: usize,
    /// Degrees.
    pub smoothness_angle_threshold: f64,
    pub curvature_seed_threshold: f64,
    /// Meters from the ground plane for a cell to count as ground.
    pub ground_inlier_threshold: f64,
    /// Largest tilt (degrees) of a plane accepted as ground.
    pub ground_max_slope: f64,
    pub ground_ransac_iterations: usize,
    /// Local-map updates without new measurements before a segment is complete.
    pub inactivity_horizon: u64,
}

impl Default for SegmenterParams {
    fn default() -> Self {
        Self {
            method: SegmentationMethod::Euclidean,
            euclidean_distance_threshold: 0.2,
            min_segment_points: 100,
            max_segment_points: 15000,
            normal_neighborhood_k: 20,
            smoothness_angle_threshold: 10.0,
            curvature_seed_threshold: 0.05,
            ground_inlier_threshold: 0.2,
            ground_max_slope: 30.0,
            ground_ransac_iterations: 100,
            inactivity_horizon: 3,
        }
    }
}

impl SegmenterParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("euclidean_distance_threshold", self.euclidean_distance_threshold),
            ("smoothness_angle_threshold", self.smoothness_angle_threshold),
            ("curvature_seed_threshold", self.curvature_seed_threshold),
            ("ground_inlier_threshold", self.ground_inlier_threshold),
            ("ground_max_slope", self.ground_max_slope),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.min_segment_points == 0 || self.min_segment_points >= self.max_segment_points {
            return Err(Error::InvalidParameter(format!(
                "need 0 < min_segment_points < max_segment_points, got {} / {}",
                self.min_segment_points, self.max_segment_points
            )));
        }
        if self.normal_neighborhood_k == 0 || self.inactivity_horizon == 0 {
            return Err(Error::InvalidParameter(
                "normal_neighborhood_k and inactivity_horizon must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentObservation<T> {
    pub cloud: PointCloud<T>,
    /// Local-map update index at which the snapshot was taken.
    pub timestamp: u64,
    pub centroid: Point3<T>,
}

impl<T: Real> SegmentObservation<T> {
    pub fn new(cloud: PointCloud<T>, timestamp: u64) -> Result<Self> {
        let centroid = centroid(&cloud)?;
        Ok(Self {
            cloud,
            timestamp,
            centroid,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Segment<T> {
    pub id: SegmentId,
    pub observations: Vec<SegmentObservation<T>>,
    pub complete: bool,
    pub cells: BTreeSet<CellIndex>,
    pub(crate) last_update: u64,
}

impl<T: Real> Segment<T> {
    fn new(id: SegmentId, update: u64) -> Self {
        Self {
            id,
            observations: Vec::new(),
            complete: false,
            cells: BTreeSet::new(),
            last_update: update,
        }
    }

    pub fn latest(&self) -> Option<&SegmentObservation<T>> {
        self.observations.last()
    }

    pub fn last_update(&self) -> u64 {
        self.last_update
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeEvent {
    pub survivor: SegmentId,
    pub absorbed: SegmentId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SegmentationUpdate {
    pub created: Vec<SegmentId>,
    pub grown: Vec<SegmentId>,
    pub merges: Vec<MergeEvent>,
}

impl SegmentationUpdate {
    /// Ids that received cells in this update.
    pub fn touched(&self) -> impl Iterator<Item = SegmentId> + '_ {
        self.created.iter().chain(self.grown.iter()).copied()
    }
}

/// Mutable segmentation state owned by one robot stream.
#[derive(Debug, Clone, Default)]
pub struct SegmentsState<T> {
    segments: BTreeMap<SegmentId, Segment<T>>,
    owner: BTreeMap<CellIndex, SegmentId>,
    ground: BTreeSet<CellIndex>,
    non_ground: BTreeSet<CellIndex>,
    normals: BTreeMap<CellIndex, CellNormal<T>>,
    next_id: SegmentId,
    update: u64,
}

impl<T: Real> SegmentsState<T> {
    pub fn new() -> Self {
        Self {
            segments: BTreeMap::new(),
            owner: BTreeMap::new(),
            ground: BTreeSet::new(),
            non_ground: BTreeSet::new(),
            normals: BTreeMap::new(),
            next_id: 1,
            update: 0,
        }
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment<T>> {
        self.segments.values()
    }

    pub fn segment(&self, id: SegmentId) -> Option<&Segment<T>> {
        self.segments.get(&id)
    }

    pub fn owner_of(&self, cell: &CellIndex) -> Option<SegmentId> {
        self.owner.get(cell).copied()
    }

    pub fn is_ground(&self, cell: &CellIndex) -> bool {
        self.ground.contains(cell)
    }

    /// Number of local-map updates processed so far.
    pub fn update_index(&self) -> u64 {
        self.update
    }

    /// Cell sets of all segments, keyed by id.
    pub fn partition(&self) -> BTreeMap<SegmentId, BTreeSet<CellIndex>> {
        self.segments.iter().map(|(id, s)| (*id, s.cells.clone())).collect()
    }

    /// Starts a new local-map update.
    pub fn begin_update(&mut self) -> u64 {
        self.update += 1;
        self.update
    }

    fn allocate_id(&mut self) -> SegmentId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn create_segment(&mut self) -> SegmentId {
        let id = self.allocate_id();
        self.segments.insert(id, Segment::new(id, self.update));
        id
    }

    fn assign(&mut self, cell: CellIndex, id: SegmentId) {
        self.owner.insert(cell, id);
        if let Some(seg) = self.segments.get_mut(&id) {
            seg.cells.insert(cell);
            seg.last_update = self.update;
            seg.complete = false;
        }
    }

    /// Moves everything owned by `absorbed` into `survivor`. Histories are
    /// merged by timestamp; entries that would break the non-decreasing
    /// point-count order are dropped.
    fn merge(&mut self, survivor: SegmentId, absorbed: SegmentId) {
        let Some(gone) = self.segments.remove(&absorbed) else { return };
        for c in &gone.cells {
            self.owner.insert(*c, survivor);
        }
        let update = self.update;
        let seg = self.segments.get_mut(&survivor).expect("survivor exists");
        seg.cells.extend(gone.cells);
        let mut history = std::mem::take(&mut seg.observations);
        history.extend(gone.observations);
        history.sort_by_key(|o| o.timestamp);
        let mut kept: Vec<SegmentObservation<T>> = Vec::with_capacity(history.len());
        for obs in history {
            let ok = kept.last().map_or(true, |prev| {
                obs.cloud.len() >= prev.cloud.len() && obs.timestamp > prev.timestamp
            });
            if ok {
                kept.push(obs);
            }
        }
        seg.observations = kept;
        seg.last_update = update;
        seg.complete = false;
    }

    /// Forgets `cells`, which left the local map. Segments left without
    /// cells are dropped and their ids returned.
    pub fn forget(&mut self, cells: &BTreeSet<CellIndex>) -> Vec<SegmentId> {
        let mut affected = BTreeSet::new();
        for c in cells {
            if let Some(id) = self.owner.remove(c) {
                affected.insert(id);
            }
            self.ground.remove(c);
            self.non_ground.remove(c);
            self.normals.remove(c);
        }
        let mut dropped = Vec::new();
        for id in affected {
            let Some(seg) = self.segments.get_mut(&id) else { continue };
            seg.cells.retain(|c| !cells.contains(c));
            if seg.cells.is_empty() {
                self.segments.remove(&id);
                dropped.push(id);
            }
        }
        dropped
    }

    pub(crate) fn touch(&mut self, id: SegmentId) {
        let update = self.update;
        if let Some(seg) = self.segments.get_mut(&id) {
            seg.last_update = update;
            seg.complete = false;
        }
    }

    /// Appends an observation for every segment in `ids` whose size lies in
    /// `[min_points, max_points]`; smaller or larger segments are withheld.
    pub fn record_observations<I>(&mut self, ids: I, grid: &DynamicVoxelGrid<T>, params: &SegmenterParams)
    where
        I: IntoIterator<Item = SegmentId>,
    {
        let update = self.update;
        for id in ids {
            let Some(seg) = self.segments.get_mut(&id) else { continue };
            let cloud = grid.gather_points(seg.cells.iter());
            if cloud.len() < params.min_segment_points || cloud.len() > params.max_segment_points {
                continue;
            }
            if let Some(prev) = seg.observations.last() {
                if prev.timestamp == update || prev.cloud.len() > cloud.len() {
                    continue;
                }
            }
            if let Ok(obs) = SegmentObservation::new(cloud, update) {
                seg.observations.push(obs);
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn set_last_update(&mut self, id: SegmentId, update: u64) {
        if let Some(s) = self.segments.get_mut(&id) {
            s.last_update = update;
        }
    }

    #[cfg(test)]
    pub(crate) fn insert_test_segment(&mut self) -> SegmentId {
        self.create_segment()
    }
}

/// Marks segments untouched for at least `inactivity_horizon` updates as
/// complete and returns the ids that changed state, ascending.
pub fn mark_complete<T: Real>(state: &mut SegmentsState<T>, inactivity_horizon: u64) -> Vec<SegmentId> {
    assert!(inactivity_horizon >= 1, "inactivity horizon must be >= 1");
    let now = state.update;
    let mut done = Vec::new();
    for seg in state.segments.values_mut() {
        if !seg.complete && now.saturating_sub(seg.last_update) >= inactivity_horizon {
            seg.complete = true;
            done.push(seg.id);
        }
    }
    done
}

/// Drives ground removal, region growing, observation recording and
/// completion for one robot stream.
#[derive(Debug, Clone)]
pub struct Segmenter<T> {
    pub params: SegmenterParams,
    state: SegmentsState<T>,
    rng: ChaCha8Rng,
}

/// Result of one local-map update.
#[derive(Debug, Clone, Default)]
pub struct UpdateReport {
    pub update: SegmentationUpdate,
    pub newly_complete: Vec<SegmentId>,
    pub ground_cells: usize,
}

impl<T: Real> Segmenter<T> {
    pub fn new(params: SegmenterParams, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        params.validate()?;
        Ok(Self {
            params,
            state: SegmentsState::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn state(&self) -> &SegmentsState<T> {
        &self.state
    }

    /// Forgets cells evicted from the grid; see [`SegmentsState::forget`].
    pub fn forget(&mut self, cells: &BTreeSet<CellIndex>) -> Vec<SegmentId> {
        self.state.forget(cells)
    }

    /// One local-map update: classifies the newly active cells of `view`
    /// against the ground plane, grows segments from the non-ground ones,
    /// snapshots touched segments and flags completed ones.
    pub fn process(
        &mut self,
        grid: &DynamicVoxelGrid<T>,
        newly_active: &BTreeSet<CellIndex>,
        touched_cells: &BTreeSet<CellIndex>,
        view: &LocalMapView<T>,
    ) -> UpdateReport {
        self.state.begin_update();
        let fresh: Vec<CellIndex> = newly_active
            .iter()
            .filter(|c| view.contains(c))
            .copied()
            .collect();
        let mut ground_cells = 0;
        let non_ground: Vec<CellIndex> = if fresh.is_empty() {
            Vec::new()
        } else {
            let partition = remove_ground(view, grid, &self.params, &mut self.rng);
            let plane = partition.plane;
            let thr = T::lit(self.params.ground_inlier_threshold);
            let mut out = Vec::new();
            for c in fresh {
                let is_ground = plane.is_some_and(|p| p.distance(&grid.cell_center(&c)).abs() <= thr);
                if is_ground {
                    self.state.ground.insert(c);
                    ground_cells += 1;
                } else {
                    out.push(c);
                }
            }
            out
        };
        let update = match self.params.method {
            SegmentationMethod::Euclidean => {
                grow_euclidean(&mut self.state, &non_ground, view, grid, &self.params)
            }
            SegmentationMethod::Smoothness => {
                grow_smoothness(&mut self.state, &non_ground, view, grid, &self.params)
            }
        };
        // Segments whose existing cells received points also count as touched.
        let extra: BTreeSet<SegmentId> = touched_cells
            .iter()
            .filter_map(|c| self.state.owner_of(c))
            .collect();
        for id in &extra {
            self.state.touch(*id);
        }
        let mut to_record: BTreeSet<SegmentId> = update.touched().collect();
        to_record.extend(extra);
        for m in &update.merges {
            to_record.remove(&m.absorbed);
            to_record.insert(m.survivor);
        }
        self.state.record_observations(to_record, grid, &self.params);
        let newly_complete = mark_complete(&mut self.state, self.params.inactivity_horizon);
        UpdateReport {
            update,
            newly_complete,
            ground_cells,
        }
    }
}

/// Offsets `(dx, dy, dz)` of all cells whose centers lie within `radius` of
/// the origin cell's center, excluding the origin itself.
pub(crate) fn neighbor_offsets(voxel_size: f64, radius: f64) -> Vec<(i64, i64, i64)> {
    let reach = (radius / voxel_size).floor() as i64;
    let r2 = radius * radius * (1.0 + 1e-9);
    let mut out = Vec::new();
    for dx in -reach..=reach {
        for dy in -reach..=reach {
            for dz in -reach..=reach {
                if (dx, dy, dz) == (0, 0, 0) {
                    continue;
                }
                let d2 = ((dx * dx + dy * dy + dz * dz) as f64) * voxel_size * voxel_size;
                if d2 <= r2 {
                    out.push((dx, dy, dz));
                }
            }
        }
    }
    out
}

/// Union-find over dense indices.
#[derive(Debug, Clone)]
pub(crate) struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so group representatives are deterministic.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Groups the new cells into connected components (`edges` index into
/// `cells`) and attaches each component to the segments it touches:
/// untouched components become new segments, touching several segments
/// merges them into the smallest id.
pub(crate) fn apply_components<T: Real>(
    state: &mut SegmentsState<T>,
    cells: &[CellIndex],
    sets: &mut DisjointSets,
    touches: &[(usize, SegmentId)],
) -> SegmentationUpdate {
    let mut comp_cells: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..cells.len() {
        comp_cells.entry(sets.find(i)).or_default().push(i);
    }
    let mut comp_touch: BTreeMap<usize, BTreeSet<SegmentId>> = BTreeMap::new();
    for &(i, seg) in touches {
        comp_touch.entry(sets.find(i)).or_default().insert(seg);
    }

    // Union-find over touched segment ids so chains of components collapse.
    let seg_ids: Vec<SegmentId> = comp_touch
        .values()
        .flatten()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pos = |id: SegmentId| seg_ids.binary_search(&id).unwrap();
    let mut seg_sets = DisjointSets::new(seg_ids.len());
    for touched in comp_touch.values() {
        let mut it = touched.iter();
        if let Some(&first) = it.next() {
            for &other in it {
                seg_sets.union(pos(first), pos(other));
            }
        }
    }

    let mut update = SegmentationUpdate::default();
    let mut grown = BTreeSet::new();
    for (k, id) in seg_ids.iter().enumerate() {
        let root = seg_ids[seg_sets.find(k)];
        if root != *id {
            update.merges.push(MergeEvent {
                survivor: root,
                absorbed: *id,
            });
        }
    }
    for m in &update.merges {
        state.merge(m.survivor, m.absorbed);
    }
    for (root, members) in comp_cells {
        let target = match comp_touch.get(&root).and_then(|s| s.iter().next()) {
            Some(&seg) => {
                let survivor = seg_ids[seg_sets.find(pos(seg))];
                grown.insert(survivor);
                survivor
            }
            None => {
                let id = state.create_segment();
                update.created.push(id);
                id
            }
        };
        for i in members {
            state.assign(cells[i], target);
        }
    }
    for m in &update.merges {
        grown.insert(m.survivor);
    }
    update.grown = grown.into_iter().collect();
    update
}
