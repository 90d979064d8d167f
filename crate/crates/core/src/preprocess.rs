//! Alignment and rasterization of segment observations into the fixed
//! network input grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, PointCloud, SE3Transform};
use crate::linalg::{Matrix3, Vector3};
use crate::scalar::Real;
use crate::segmentation::SegmentObservation;

pub const GRID_DIMS: [usize; 3] = [32, 32, 16];
pub const GRID_VOXELS: usize = GRID_DIMS[0] * GRID_DIMS[1] * GRID_DIMS[2];
/// Smallest voxel side length, meters.
pub const MIN_VOXEL_SIDE: f64 = 0.1;

/// Flat index of voxel `(x, y, z)` in the row-major `[x][y][z]` layout.
#[inline]
pub const fn voxel_offset(x: usize, y: usize, z: usize) -> usize {
    (x * GRID_DIMS[1] + y) * GRID_DIMS[2] + z
}

/// Segment expressed in its aligned frame: centered on the centroid, first
/// horizontal principal axis along +x, and more points below y = 0 than above.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSegment<T> {
    pub cloud: PointCloud<T>,
    /// Rotation about z that was applied after centering.
    pub rotation_applied: SE3Transform<T>,
    /// Centroid of the input cloud in its original frame.
    pub original_centroid: Vector3<T>,
}

/// Binary occupancy grid in `[x][y][z]` order plus its scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelizedInput {
    pub occupancy: Vec<u8>,
    pub voxel_sides: [f64; 3],
    /// Symmetric extent about the centroid, `2 · max |pᵢ - cᵢ|` per axis.
    pub original_extent: [f64; 3],
}

impl VoxelizedInput {
    pub fn empty(voxel_sides: [f64; 3], original_extent: [f64; 3]) -> Self {
        Self {
            occupancy: vec![0; GRID_VOXELS],
            voxel_sides,
            original_extent,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.occupancy[voxel_offset(x, y, z)] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        self.occupancy[voxel_offset(x, y, z)] = u8::from(value);
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v != 0).count()
    }

    pub fn occupied(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.occupancy.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| {
            let z = i % GRID_DIMS[2];
            let y = (i / GRID_DIMS[2]) % GRID_DIMS[1];
            let x = i / (GRID_DIMS[1] * GRID_DIMS[2]);
            [x, y, z]
        })
    }

    /// Occupancy as `f32` (0 or 1), the network's input channel.
    pub fn as_f32(&self) -> Vec<f32> {
        self.occupancy.iter().map(|&v| f32::from(v)).collect()
    }
}

/// Rotates the observation about z so its dominant horizontal direction is
/// the x-axis, after translating its centroid to the origin.
pub fn align<T: Real>(obs: &SegmentObservation<T>) -> Result<AlignedSegment<T>> {
    align_cloud(&obs.cloud)
}

pub fn align_cloud<T: Real>(cloud: &PointCloud<T>) -> Result<AlignedSegment<T>> {
    let c = centroid(cloud).map_err(|_| Error::DegenerateSegment("empty cloud"))?;
    let centered: Vec<Vector3<T>> = cloud.iter().map(|p| *p - c).collect();
    if centered.iter().all(|p| p.norm_squared() == T::zero()) {
        return Err(Error::DegenerateSegment("all points collocated"));
    }
    let n = T::from_usize_lossy(centered.len());
    let (mut sxx, mut sxy, mut syy) = (T::zero(), T::zero(), T::zero());
    for p in &centered {
        sxx = sxx + p.x * p.x;
        sxy = sxy + p.x * p.y;
        syy = syy + p.y * p.y;
    }
    let (sxx, sxy, syy) = (sxx / n, sxy / n, syy / n);
    // Orientation of the major axis of the 2x2 covariance.
    let angle = T::lit(0.5) * (T::lit(2.0) * sxy).atan2(sxx - syy);
    let mut rotation = SE3Transform::rot_z(-angle);
    let mut rotated: Vec<Vector3<T>> = centered.iter().map(|p| rotation.transform_point(p)).collect();

    let below = rotated.iter().filter(|p| p.y < T::zero()).count();
    let above = rotated.iter().filter(|p| p.y > T::zero()).count();
    let flip = match below.cmp(&above) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            // Tie along y: apply the same rule along x.
            let left = rotated.iter().filter(|p| p.x < T::zero()).count();
            let right = rotated.iter().filter(|p| p.x > T::zero()).count();
            left < right
        }
    };
    if flip {
        let half_turn = Matrix3::from_diagonal(-T::one(), -T::one(), T::one());
        rotation.rotation = half_turn * rotation.rotation;
        for p in &mut rotated {
            p.x = -p.x;
            p.y = -p.y;
        }
    }
    Ok(AlignedSegment {
        cloud: PointCloud::new(rotated),
        rotation_applied: rotation,
        original_centroid: c,
    })
}

/// Bin index along one axis; coordinates exactly on a voxel boundary go to
/// the voxel nearer the grid center, outliers are clamped.
#[inline]
fn bin(offset: f64, side: f64, dim: usize) -> usize {
    let half = (dim / 2) as f64;
    let u = offset / side + half;
    let idx = if u > half { u.ceil() - 1.0 } else { u.floor() };
    idx.clamp(0.0, (dim - 1) as f64) as usize
}

/// Rasterizes an aligned segment into the 32x32x16 grid centered on its
/// centroid. Each voxel side is the larger of 0.1 m and the extent needed to
/// fit the segment along that axis.
pub fn voxelize<T: Real>(aligned: &AlignedSegment<T>) -> Result<VoxelizedInput> {
    let cloud = &aligned.cloud;
    let c = centroid(cloud)?;
    let mut extent = [0.0f64; 3];
    for p in cloud.iter() {
        let d = *p - c;
        for (axis, e) in extent.iter_mut().enumerate() {
            *e = e.max(2.0 * d[axis].as_f64().abs());
        }
    }
    let sides: [f64; 3] = std::array::from_fn(|i| (extent[i] / GRID_DIMS[i] as f64).max(MIN_VOXEL_SIDE));
    let mut out = VoxelizedInput::empty(sides, extent);
    for p in cloud.iter() {
        let d = *p - c;
        let ix = bin(d.x.as_f64(), sides[0], GRID_DIMS[0]);
        let iy = bin(d.y.as_f64(), sides[1], GRID_DIMS[1]);
        let iz = bin(d.z.as_f64(), sides[2], GRID_DIMS[2]);
        out.set(ix, iy, iz, true);
    }
    Ok(out)
}

/// `voxelize(align(obs))`.
pub fn preprocess<T: Real>(obs: &SegmentObservation<T>) -> Result<VoxelizedInput> {
    voxelize(&align(obs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::apply_transform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs(points: Vec<Vector3<f64>>) -> SegmentObservation<f64> {
        SegmentObservation::new(PointCloud::new(points), 0).unwrap()
    }

    fn l_shape() -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for i in 0..40 {
            pts.push(Vector3::new(i as f64 * 0.1, 0.0, 0.0));
        }
        for j in 1..15 {
            pts.push(Vector3::new(0.0, j as f64 * 0.1, 0.0));
        }
        pts
    }

    #[test]
    fn collocated_points_are_degenerate() {
        let o = obs(vec![Vector3::new(1.0, 1.0, 1.0); 5]);
        assert!(matches!(align(&o), Err(Error::DegenerateSegment(_))));
    }

    #[test]
    fn points_on_x_axis_stay_on_x_axis() {
        let pts: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let a = align(&obs(pts)).unwrap();
        let r = a.rotation_applied.rotation;
        // Identity or a half turn about z.
        assert!(r.m[0][1].abs() < 1e-12 && r.m[1][0].abs() < 1e-12);
        assert!((r.m[0][0].abs() - 1.0).abs() < 1e-12);
        for p in a.cloud.iter() {
            assert!(p.y.abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_invariants_on_l_shape() {
        let a = align(&obs(l_shape())).unwrap();
        let below = a.cloud.iter().filter(|p| p.y < 0.0).count();
        let above = a.cloud.iter().filter(|p| p.y > 0.0).count();
        assert!(below >= above);
        let vx: f64 = a.cloud.iter().map(|p| p.x * p.x).sum();
        let vy: f64 = a.cloud.iter().map(|p| p.y * p.y).sum();
        assert!(vx >= vy);
    }

    #[test]
    fn alignment_preserves_heights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<_> = (0..100)
            .map(|_| Vector3::new(rng.gen_range(0.0..4.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..2.0)))
            .collect();
        let o = obs(pts.clone());
        let a = align(&o).unwrap();
        for (p, q) in pts.iter().zip(a.cloud.iter()) {
            assert!((p.z - o.centroid.z - q.z).abs() < 1e-12);
        }
    }

    #[test]
    fn rotated_copy_aligns_identically() {
        let base = l_shape();
        let a = align(&obs(base.clone())).unwrap();
        let rotated = apply_transform(&SE3Transform::rot_z(std::f64::consts::FRAC_PI_2), &PointCloud::new(base));
        let b = align(&obs(rotated.points)).unwrap();
        for (p, q) in a.cloud.iter().zip(b.cloud.iter()) {
            assert!((*p - *q).norm() < 1e-6);
        }
    }

    #[test]
    fn single_point_occupies_center_voxel() {
        let aligned = AlignedSegment {
            cloud: PointCloud::new(vec![Vector3::new(3.0, -2.0, 1.0)]),
            rotation_applied: SE3Transform::identity(),
            original_centroid: Vector3::zeros(),
        };
        let v = voxelize(&aligned).unwrap();
        assert_eq!(v.occupied().collect::<Vec<_>>(), vec![[16, 16, 8]]);
        assert_eq!(v.voxel_sides, [0.1, 0.1, 0.1]);
    }

    #[test]
    fn dense_box_fills_grid_at_scaled_sides() {
        // Lattice symmetric about the origin so the centroid is the box center.
        let mut pts = Vec::new();
        let steps = [64usize, 64, 32];
        let size = [6.4, 3.2, 1.6];
        for i in 0..=steps[0] {
            for j in 0..=steps[1] {
                for k in 0..=steps[2] {
                    pts.push(Vector3::new(
                        -size[0] / 2.0 + size[0] * i as f64 / steps[0] as f64,
                        -size[1] / 2.0 + size[1] * j as f64 / steps[1] as f64,
                        -size[2] / 2.0 + size[2] * k as f64 / steps[2] as f64,
                    ));
                }
            }
        }
        let aligned = AlignedSegment {
            cloud: PointCloud::new(pts),
            rotation_applied: SE3Transform::identity(),
            original_centroid: Vector3::zeros(),
        };
        let v = voxelize(&aligned).unwrap();
        for (got, want) in v.voxel_sides.iter().zip([0.2, 0.1, 0.1]) {
            assert!((got - want).abs() < 1e-9);
        }
        assert_eq!(v.occupied_count(), GRID_VOXELS);
    }

    #[test]
    fn unit_extent_matches_brute_force_binning() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pts: Vec<_> = (0..300)
            .map(|_| Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)))
            .collect();
        // Pin the symmetric extent to exactly 1 m per axis around the centroid.
        let c = crate::geometry::centroid_of(&pts).unwrap();
        pts.iter_mut().for_each(|p| *p -= c);
        let aligned = AlignedSegment {
            cloud: PointCloud::new(pts.clone()),
            rotation_applied: SE3Transform::identity(),
            original_centroid: Vector3::zeros(),
        };
        let v = voxelize(&aligned).unwrap();
        assert_eq!(v.voxel_sides, [0.1, 0.1, 0.1]);
        // Brute force: scan every voxel box and test membership of each point.
        let mut expected = vec![0u8; GRID_VOXELS];
        for x in 0..32 {
            for y in 0..32 {
                for z in 0..16 {
                    let lo = [(x as f64 - 16.0) * 0.1, (y as f64 - 16.0) * 0.1, (z as f64 - 8.0) * 0.1];
                    if pts.iter().any(|p| {
                        p.x >= lo[0] && p.x < lo[0] + 0.1 && p.y >= lo[1] && p.y < lo[1] + 0.1 && p.z >= lo[2] && p.z < lo[2] + 0.1
                    }) {
                        expected[voxel_offset(x, y, z)] = 1;
                    }
                }
            }
        }
        assert_eq!(v.occupancy, expected);
    }

    #[test]
    fn voxelization_keeps_every_point_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let pts: Vec<_> = (0..200)
                .map(|_| Vector3::new(rng.gen_range(0.0..12.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..5.0)))
                .collect();
            let a = align(&obs(pts)).unwrap();
            let v = voxelize(&a).unwrap();
            let c = centroid(&a.cloud).unwrap();
            for p in a.cloud.iter() {
                let d = *p - c;
                for axis in 0..3 {
                    let half = v.voxel_sides[axis] * GRID_DIMS[axis] as f64 / 2.0;
                    assert!(d[axis].abs() <= half + 1e-9);
                }
            }
            for axis in 0..3 {
                let want = (v.original_extent[axis] / GRID_DIMS[axis] as f64).max(0.1);
                assert!((v.voxel_sides[axis] - want).abs() < 1e-9);
            }
        }
    }
}
