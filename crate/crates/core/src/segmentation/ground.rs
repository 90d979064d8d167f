use rand::Rng;

use crate::geometry::{covariance, eig_sym3, Point3};
use crate::linalg::Vector3;
use crate::scalar::Real;
use crate::voxel_map::{CellIndex, DynamicVoxelGrid, LocalMapView};

use super::SegmenterParams;

/// Plane `n · p + d = 0` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane<T> {
    pub normal: Vector3<T>,
    pub offset: T,
}

impl<T: Real> Plane<T> {
    pub fn through(point: &Point3<T>, normal: Vector3<T>) -> Self {
        let n = normal.normalized();
        Self {
            normal: n,
            offset: -n.dot(point),
        }
    }

    /// Signed distance of `p` to the plane.
    #[inline]
    pub fn distance(&self, p: &Point3<T>) -> T {
        self.normal.dot(p) + self.offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundPartition<T> {
    pub ground: Vec<CellIndex>,
    pub non_ground: Vec<CellIndex>,
    pub plane: Option<Plane<T>>,
}

/// RANSAC ground-plane fit over the active cell centers of `view`, followed
/// by a least-squares refit on the inliers. Only planes tilted less than
/// `ground_max_slope` from horizontal are accepted.
pub fn remove_ground<T: Real, R: Rng>(
    view: &LocalMapView<T>,
    grid: &DynamicVoxelGrid<T>,
    params: &SegmenterParams,
    rng: &mut R,
) -> GroundPartition<T> {
    let centers: Vec<Point3<T>> = view.cells.iter().map(|c| grid.cell_center(c)).collect();
    let all_non_ground = || GroundPartition {
        ground: Vec::new(),
        non_ground: view.cells.clone(),
        plane: None,
    };
    if centers.len() < 3 {
        return all_non_ground();
    }
    let thr = T::lit(params.ground_inlier_threshold);
    let min_cos = T::lit(params.ground_max_slope.to_radians().cos());
    let count = |plane: &Plane<T>| centers.iter().filter(|p| plane.distance(p).abs() <= thr).count();

    let mut best: Option<(usize, Plane<T>)> = None;
    for _ in 0..params.ground_ransac_iterations {
        let i = rng.gen_range(0..centers.len());
        let j = rng.gen_range(0..centers.len());
        let k = rng.gen_range(0..centers.len());
        if i == j || j == k || i == k {
            continue;
        }
        let n = (centers[j] - centers[i]).cross(&(centers[k] - centers[i]));
        if n.norm() <= T::lit(1e-12) {
            continue;
        }
        let plane = Plane::through(&centers[i], n);
        if plane.normal.z.abs() < min_cos {
            continue;
        }
        let inliers = count(&plane);
        if best.as_ref().map_or(true, |(c, _)| inliers > *c) {
            best = Some((inliers, plane));
        }
    }
    let Some((mut best_count, mut plane)) = best else {
        return all_non_ground();
    };
    for _ in 0..2 {
        let inliers: Vec<Point3<T>> = centers
            .iter()
            .filter(|p| plane.distance(p).abs() <= thr)
            .copied()
            .collect();
        if inliers.len() < 3 {
            break;
        }
        let Ok((cov, mean)) = covariance(&inliers) else { break };
        let Ok(eig) = eig_sym3(&cov) else { break };
        let refit = Plane::through(&mean, eig.vectors[2]);
        let refit_count = count(&refit);
        if refit.normal.z.abs() < min_cos || refit_count < best_count {
            break;
        }
        plane = refit;
        best_count = refit_count;
    }
    if plane.normal.z < T::zero() {
        plane = Plane {
            normal: -plane.normal,
            offset: -plane.offset,
        };
    }
    let (ground, non_ground) = view
        .cells
        .iter()
        .zip(&centers)
        .partition::<Vec<_>, _>(|(_, p)| plane.distance(p).abs() <= thr);
    GroundPartition {
        ground: ground.into_iter().map(|(c, _)| *c).collect(),
        non_ground: non_ground.into_iter().map(|(c, _)| *c).collect(),
        plane: Some(plane),
    }
}
