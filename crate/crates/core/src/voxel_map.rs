//! Sparse voxel accumulation of registered scans and local-map extraction.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, SE3Transform};
use crate::linalg::Vector3;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub x: i64,
    pub y: i64,
    pub z: i64,
}

impl CellIndex {
    pub const fn new(x: i64, y: i64, z: i64) -> Self {
        Self { x, y, z }
    }

    pub fn offset(&self, dx: i64, dy: i64, dz: i64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.z + dz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Horizontal (x–y) distance only.
    #[default]
    Cylindrical,
    Spherical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelGridParams {
    pub voxel_size: f64,
    pub activation_threshold: u32,
    /// Optional cap on stored cells; oldest cells are evicted first.
    pub max_cells: Option<usize>,
}

impl Default for VoxelGridParams {
    fn default() -> Self {
        Self {
            voxel_size: 0.1,
            activation_threshold: 1,
            max_cells: None,
        }
    }
}

impl VoxelGridParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::Config(format!("voxel_size must be positive, got {}", self.voxel_size)));
        }
        if self.activation_threshold == 0 || self.max_cells == Some(0) {
            return Err(Error::Config("activation_threshold and max_cells must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Cell<T> {
    pub points: Vec<Point3<T>>,
    pub hits: u32,
    pub active: bool,
}

#[derive(Debug, Clone)]
pub struct DynamicVoxelGrid<T> {
    voxel_size: T,
    activation_threshold: u32,
    max_cells: Option<usize>,
    cells: BTreeMap<CellIndex, Cell<T>>,
    creation_order: VecDeque<CellIndex>,
    total_points: usize,
}

impl<T: Real> DynamicVoxelGrid<T> {
    pub fn new(voxel_size: T, activation_threshold: u32) -> Self {
        assert!(voxel_size > T::zero(), "voxel size must be positive");
        assert!(activation_threshold >= 1, "activation threshold must be >= 1");
        Self {
            voxel_size,
            activation_threshold,
            max_cells: None,
            cells: BTreeMap::new(),
            creation_order: VecDeque::new(),
            total_points: 0,
        }
    }

    pub fn from_params(params: &VoxelGridParams) -> Self {
        let mut grid = Self::new(T::lit(params.voxel_size), params.activation_threshold);
        grid.max_cells = params.max_cells;
        grid
    }

    pub fn with_max_cells(mut self, max_cells: usize) -> Self {
        self.max_cells = Some(max_cells);
        self
    }

    #[inline]
    pub fn voxel_size(&self) -> T {
        self.voxel_size
    }

    #[inline]
    pub fn cell_of(&self, p: &Point3<T>) -> CellIndex {
        let idx = |v: T| (v / self.voxel_size).floor().to_i64().unwrap_or(0);
        CellIndex::new(idx(p.x), idx(p.y), idx(p.z))
    }

    pub fn cell_center(&self, idx: &CellIndex) -> Point3<T> {
        let half = T::lit(0.5);
        let c = |i: i64| (T::lit(i as f64) + half) * self.voxel_size;
        Vector3::new(c(idx.x), c(idx.y), c(idx.z))
    }

    pub fn cell(&self, idx: &CellIndex) -> Option<&Cell<T>> {
        self.cells.get(idx)
    }

    pub fn is_active(&self, idx: &CellIndex) -> bool {
        self.cells.get(idx).is_some_and(|c| c.active)
    }

    pub fn cells(&self) -> impl Iterator<Item = (&CellIndex, &Cell<T>)> {
        self.cells.iter()
    }

    pub fn active_cells(&self) -> impl Iterator<Item = &CellIndex> {
        self.cells.iter().filter(|(_, c)| c.active).map(|(i, _)| i)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Number of points currently stored across all cells.
    pub fn point_count(&self) -> usize {
        self.total_points
    }

    /// Transforms `cloud` into the map frame with `pose`, bins every point and
    /// returns exactly the cells that became active during this call.
    pub fn insert_scan(&mut self, cloud: &PointCloud<T>, pose: &SE3Transform<T>) -> BTreeSet<CellIndex> {
        let mut newly_active = BTreeSet::new();
        for p in cloud.iter() {
            let q = pose.transform_point(p);
            if !q.is_finite() {
                continue;
            }
            let idx = self.cell_of(&q);
            let cell = self.cells.entry(idx).or_insert_with(|| {
                self.creation_order.push_back(idx);
                Cell::default()
            });
            cell.points.push(q);
            cell.hits += 1;
            self.total_points += 1;
            if !cell.active && cell.hits >= self.activation_threshold {
                cell.active = true;
                newly_active.insert(idx);
            }
        }
        self.evict_overflow(&mut newly_active);
        newly_active
    }

    fn evict_overflow(&mut self, newly_active: &mut BTreeSet<CellIndex>) {
        let Some(cap) = self.max_cells else { return };
        while self.cells.len() > cap {
            let Some(oldest) = self.creation_order.pop_front() else { break };
            if let Some(cell) = self.cells.remove(&oldest) {
                self.total_points -= cell.points.len();
                newly_active.remove(&oldest);
            }
        }
    }

    /// Active cells whose centers lie within `radius` of `center`.
    pub fn extract_local(&self, center: &Point3<T>, radius: T, metric: DistanceMetric) -> LocalMapView<T> {
        assert!(radius > T::zero(), "local map radius must be positive");
        let r2 = radius * radius;
        let reach = (radius / self.voxel_size).ceil().to_i64().unwrap_or(0) + 1;
        let lo = self.cell_of(center).offset(-reach, -reach, -reach);
        let hi = self.cell_of(center).offset(reach, reach, reach);
        let cells = self
            .cells
            .range(CellIndex::new(lo.x, i64::MIN, i64::MIN)..=CellIndex::new(hi.x, i64::MAX, i64::MAX))
            .filter(|(idx, cell)| {
                if !cell.active || idx.y < lo.y || idx.y > hi.y {
                    return false;
                }
                let d = self.cell_center(idx) - *center;
                let dist2 = match metric {
                    DistanceMetric::Cylindrical => d.x * d.x + d.y * d.y,
                    DistanceMetric::Spherical => d.norm_squared(),
                };
                dist2 <= r2
            })
            .map(|(idx, _)| *idx)
            .collect();
        LocalMapView {
            center: *center,
            radius,
            metric,
            cells,
        }
    }

    /// Drops every cell whose center lies farther than `radius` from `center`
    /// and returns the dropped indices.
    pub fn retain_near(&mut self, center: &Point3<T>, radius: T, metric: DistanceMetric) -> BTreeSet<CellIndex> {
        let r2 = radius * radius;
        let far: BTreeSet<CellIndex> = self
            .cells
            .keys()
            .filter(|idx| {
                let d = self.cell_center(idx) - *center;
                let dist2 = match metric {
                    DistanceMetric::Cylindrical => d.x * d.x + d.y * d.y,
                    DistanceMetric::Spherical => d.norm_squared(),
                };
                dist2 > r2
            })
            .copied()
            .collect();
        for idx in &far {
            if let Some(cell) = self.cells.remove(idx) {
                self.total_points -= cell.points.len();
            }
        }
        if !far.is_empty() {
            self.creation_order.retain(|idx| !far.contains(idx));
        }
        far
    }

    /// All points stored in `cells`, in cell order.
    pub fn gather_points<'a, I>(&self, cells: I) -> PointCloud<T>
    where
        I: IntoIterator<Item = &'a CellIndex>,
    {
        cells
            .into_iter()
            .filter_map(|idx| self.cells.get(idx))
            .flat_map(|c| c.points.iter().copied())
            .collect()
    }
}

/// Snapshot of the active cells around the robot.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMapView<T> {
    pub center: Point3<T>,
    pub radius: T,
    pub metric: DistanceMetric,
    /// Sorted active cell indices inside the radius.
    pub cells: Vec<CellIndex>,
}

impl<T: Real> LocalMapView<T> {
    pub fn contains(&self, idx: &CellIndex) -> bool {
        self.cells.binary_search(idx).is_ok()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud<f64> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn empty_cloud_changes_nothing() {
        let mut g = DynamicVoxelGrid::<f64>::new(0.1, 1);
        assert!(g.insert_scan(&PointCloud::default(), &SE3Transform::identity()).is_empty());
        assert!(g.is_empty());
    }

    #[test]
    fn single_point_activates_origin_cell() {
        let mut g = DynamicVoxelGrid::<f64>::new(0.1, 1);
        let cloud = PointCloud::new(vec![Vector3::new(0.05, 0.05, 0.05)]);
        let new = g.insert_scan(&cloud, &SE3Transform::identity());
        assert_eq!(new.into_iter().collect::<Vec<_>>(), vec![CellIndex::new(0, 0, 0)]);
    }

    #[test]
    fn activation_threshold_defers_activation() {
        let mut g = DynamicVoxelGrid::<f64>::new(0.1, 2);
        let cloud = PointCloud::new(vec![Vector3::new(0.05, 0.05, 0.05)]);
        assert!(g.insert_scan(&cloud, &SE3Transform::identity()).is_empty());
        assert!(!g.is_active(&CellIndex::new(0, 0, 0)));
        let new = g.insert_scan(&cloud, &SE3Transform::identity());
        assert!(new.contains(&CellIndex::new(0, 0, 0)));
        // Already active: never reported again.
        assert!(g.insert_scan(&cloud, &SE3Transform::identity()).is_empty());
    }

    #[test]
    fn pose_is_applied_before_binning() {
        let mut g = DynamicVoxelGrid::<f64>::new(0.5, 1);
        let pose = SE3Transform::from_translation(Vector3::new(10.0, 0.0, 0.0));
        let new = g.insert_scan(&PointCloud::new(vec![Vector3::new(0.1, 0.1, 0.1)]), &pose);
        assert!(new.contains(&CellIndex::new(20, 0, 0)));
    }

    #[test]
    fn stored_points_lie_in_their_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = DynamicVoxelGrid::<f64>::new(0.1, 1);
        g.insert_scan(&random_cloud(&mut rng, 2000, 5.0), &SE3Transform::rot_z(0.7));
        for (idx, cell) in g.cells() {
            for p in &cell.points {
                assert_eq!(g.cell_of(p), *idx);
            }
        }
    }

    #[test]
    fn union_of_newly_active_equals_active_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = DynamicVoxelGrid::<f64>::new(0.1, 2);
        let mut union = BTreeSet::new();
        let mut all_points = Vec::new();
        for _ in 0..10 {
            let cloud = random_cloud(&mut rng, 1000, 1.0);
            all_points.extend(cloud.points.iter().copied());
            union.extend(g.insert_scan(&cloud, &SE3Transform::identity()));
        }
        let active: BTreeSet<_> = g.active_cells().copied().collect();
        assert_eq!(union, active);
        // Rebuild from scratch with a single insertion.
        let mut fresh = DynamicVoxelGrid::<f64>::new(0.1, 2);
        let rebuilt = fresh.insert_scan(&PointCloud::new(all_points), &SE3Transform::identity());
        assert_eq!(rebuilt, active);
        assert_eq!(g.point_count(), 10_000);
    }

    #[test]
    fn extract_local_examples() {
        let mut g = DynamicVoxelGrid::<f64>::new(0.1, 1);
        g.insert_scan(
            &PointCloud::new(vec![Vector3::new(5.05, 0.05, 0.0), Vector3::new(0.05, 0.05, 3.0)]),
            &SE3Transform::identity(),
        );
        let view = g.extract_local(&Vector3::zeros(), 1.0, DistanceMetric::Cylindrical);
        // The z = 3 cell is horizontally close; cylindrical metric ignores z.
        assert_eq!(view.cells, vec![CellIndex::new(0, 0, 30)]);
        let view = g.extract_local(&Vector3::zeros(), 1.0, DistanceMetric::Spherical);
        assert!(view.is_empty());
        let view = g.extract_local(&Vector3::new(100.0, 0.0, 0.0), 0.5, DistanceMetric::Cylindrical);
        assert!(view.is_empty());
    }

    #[test]
    fn extract_local_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = DynamicVoxelGrid::<f64>::new(0.3, 1);
        g.insert_scan(&random_cloud(&mut rng, 5000, 20.0), &SE3Transform::identity());
        for _ in 0..20 {
            let center = Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), 0.0);
            let radius = rng.gen_range(0.5..15.0);
            for metric in [DistanceMetric::Cylindrical, DistanceMetric::Spherical] {
                let view = g.extract_local(&center, radius, metric);
                let oracle: Vec<CellIndex> = g
                    .active_cells()
                    .filter(|idx| {
                        let d = g.cell_center(idx) - center;
                        let d2 = match metric {
                            DistanceMetric::Cylindrical => d.x * d.x + d.y * d.y,
                            DistanceMetric::Spherical => d.norm_squared(),
                        };
                        d2 <= radius * radius
                    })
                    .copied()
                    .collect();
                assert_eq!(view.cells, oracle);
            }
        }
    }

    #[test]
    fn fifo_eviction_caps_cells() {
        let mut g = DynamicVoxelGrid::<f64>::new(1.0, 1).with_max_cells(3);
        let pts: Vec<_> = (0..5).map(|i| Vector3::new(i as f64 + 0.5, 0.5, 0.5)).collect();
        for p in pts {
            g.insert_scan(&PointCloud::new(vec![p]), &SE3Transform::identity());
        }
        let kept: Vec<_> = g.cells().map(|(i, _)| i.x).collect();
        assert_eq!(kept, vec![2, 3, 4]);
        assert_eq!(g.point_count(), 3);
    }

    proptest! {
        #[test]
        fn insertion_order_does_not_change_active_cells(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, 300, 2.0);
            let b = random_cloud(&mut rng, 300, 2.0);
            let id = SE3Transform::identity();
            let mut g1 = DynamicVoxelGrid::<f64>::new(0.2, 2);
            g1.insert_scan(&a, &id);
            g1.insert_scan(&b, &id);
            let mut g2 = DynamicVoxelGrid::<f64>::new(0.2, 2);
            g2.insert_scan(&b, &id);
            g2.insert_scan(&a, &id);
            let s1: Vec<_> = g1.active_cells().collect();
            let s2: Vec<_> = g2.active_cells().collect();
            prop_assert_eq!(s1, s2);
            prop_assert_eq!(g1.point_count(), 600);
        }
    }
}
