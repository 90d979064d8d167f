//! 3D convex hulls, half-space clipping and hull overlap.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::linalg::Vector3;
use crate::scalar::Real;

/// Outward plane `n · x = d`; the hull is `n · x ≤ d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfSpace {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl HalfSpace {
    #[inline]
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexHull {
    pub vertices: Vec<Point3<f64>>,
    /// Outward-wound triangles.
    pub faces: Vec<[usize; 3]>,
    pub planes: Vec<HalfSpace>,
    tolerance: f64,
}

impl ConvexHull {
    pub fn new<T: Real>(cloud: &PointCloud<T>) -> Result<Self> {
        let pts: Vec<Point3<f64>> = cloud.iter().map(|p| p.cast()).collect();
        build_hull(&pts)
    }

    pub fn volume(&self) -> f64 {
        polyhedron_volume(&self.polygons())
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        self.planes.iter().all(|h| h.signed_distance(p) <= self.tolerance)
    }

    pub fn polygons(&self) -> Vec<Vec<Point3<f64>>> {
        self.faces.iter().map(|f| f.iter().map(|&i| self.vertices[i]).collect()).collect()
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    /// Volume of the intersection with `other`.
    pub fn intersection_volume(&self, other: &ConvexHull) -> f64 {
        let tol = self.tolerance.max(other.tolerance);
        let mut poly = self.polygons();
        for h in &other.planes {
            poly = clip(&poly, h, tol);
            if poly.is_empty() {
                return 0.0;
            }
        }
        polyhedron_volume(&poly)
    }
}

fn plane_through(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> HalfSpace {
    let n = (*b - *a).cross(&(*c - *a)).normalized();
    HalfSpace {
        normal: n,
        offset: n.dot(a),
    }
}

fn build_hull(pts: &[Point3<f64>]) -> Result<ConvexHull> {
    if pts.len() < 4 {
        return Err(Error::DegenerateHull("fewer than 4 points"));
    }
    if pts.iter().any(|p| !p.is_finite()) {
        return Err(Error::DegenerateHull("non-finite point"));
    }
    let (lo, hi) = pts.iter().fold(
        (Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY), Vector3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY)),
        |(lo, hi), p| {
            (
                Vector3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z)),
                Vector3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z)),
            )
        },
    );
    let scale = (hi - lo).norm();
    let eps = 1e-10 * scale.max(1e-300);
    let i0 = (0..pts.len()).min_by(|&a, &b| pts[a].x.total_cmp(&pts[b].x)).unwrap();
    let i1 = farthest(pts, |p| (*p - pts[i0]).norm());
    let dir = (pts[i1] - pts[i0]).normalized();
    let i2 = farthest(pts, |p| {
        let v = *p - pts[i0];
        (v - dir * v.dot(&dir)).norm()
    });
    let base = plane_through(&pts[i0], &pts[i1], &pts[i2]);
    if (pts[i1] - pts[i0]).norm() <= eps || {
        let v = pts[i2] - pts[i0];
        (v - dir * v.dot(&dir)).norm() <= eps
    } {
        return Err(Error::DegenerateHull("collinear points"));
    }
    let i3 = farthest(pts, |p| base.signed_distance(p).abs());
    if base.signed_distance(&pts[i3]).abs() <= eps * 10.0 {
        return Err(Error::DegenerateHull("flat point set"));
    }

    let mut faces: Vec<[usize; 3]> = if base.signed_distance(&pts[i3]) > 0.0 {
        vec![[i0, i2, i1], [i0, i1, i3], [i1, i2, i3], [i2, i0, i3]]
    } else {
        vec![[i0, i1, i2], [i0, i3, i1], [i1, i3, i2], [i2, i3, i0]]
    };
    let mut planes: Vec<HalfSpace> = faces.iter().map(|f| plane_through(&pts[f[0]], &pts[f[1]], &pts[f[2]])).collect();

    for (pi, p) in pts.iter().enumerate() {
        if [i0, i1, i2, i3].contains(&pi) {
            continue;
        }
        let visible: Vec<bool> = planes.iter().map(|h| h.signed_distance(p) > eps).collect();
        if !visible.iter().any(|&v| v) {
            continue;
        }
        let mut edges: HashSet<(usize, usize)> = HashSet::new();
        for (f, _) in faces.iter().zip(&visible).filter(|(_, &v)| v) {
            for k in 0..3 {
                edges.insert((f[k], f[(k + 1) % 3]));
            }
        }
        let horizon: Vec<(usize, usize)> = edges.iter().filter(|&&(a, b)| !edges.contains(&(b, a))).copied().collect();
        let mut kept_faces = Vec::with_capacity(faces.len());
        let mut kept_planes = Vec::with_capacity(faces.len());
        for ((f, h), v) in faces.iter().zip(&planes).zip(&visible) {
            if !v {
                kept_faces.push(*f);
                kept_planes.push(*h);
            }
        }
        let mut horizon = horizon;
        horizon.sort_unstable();
        for (a, b) in horizon {
            kept_faces.push([a, b, pi]);
            kept_planes.push(plane_through(&pts[a], &pts[b], p));
        }
        faces = kept_faces;
        planes = kept_planes;
    }

    let mut remap = vec![usize::MAX; pts.len()];
    let mut vertices = Vec::new();
    for f in &mut faces {
        for i in f.iter_mut() {
            if remap[*i] == usize::MAX {
                remap[*i] = vertices.len();
                vertices.push(pts[*i]);
            }
            *i = remap[*i];
        }
    }
    Ok(ConvexHull {
        vertices,
        faces,
        planes,
        tolerance: eps,
    })
}

fn farthest(pts: &[Point3<f64>], key: impl Fn(&Point3<f64>) -> f64) -> usize {
    (0..pts.len()).max_by(|&a, &b| key(&pts[a]).total_cmp(&key(&pts[b])).then(b.cmp(&a))).unwrap()
}

/// Keeps the part of a closed convex polyhedron with `signed_distance ≤ 0`,
/// closing the cut with a cap polygon.
pub fn clip(poly: &[Vec<Point3<f64>>], h: &HalfSpace, tol: f64) -> Vec<Vec<Point3<f64>>> {
    let mut any_in = false;
    let mut any_out = false;
    for p in poly.iter().flatten() {
        let s = h.signed_distance(p);
        any_in |= s < -tol;
        any_out |= s > tol;
    }
    if !any_in {
        return Vec::new();
    }
    if !any_out {
        return poly.to_vec();
    }
    let mut out = Vec::with_capacity(poly.len() + 1);
    let mut cut: Vec<Point3<f64>> = Vec::new();
    for face in poly {
        let mut res = Vec::with_capacity(face.len() + 1);
        for i in 0..face.len() {
            let (a, b) = (face[i], face[(i + 1) % face.len()]);
            let (sa, sb) = (h.signed_distance(&a), h.signed_distance(&b));
            let a_in = sa <= tol;
            if a_in {
                res.push(a);
                if sa.abs() <= tol {
                    cut.push(a);
                }
            }
            if (sa < -tol && sb > tol) || (sa > tol && sb < -tol) {
                let x = a + (b - a) * (sa / (sa - sb));
                res.push(x);
                cut.push(x);
            }
        }
        if res.len() >= 3 {
            out.push(res);
        }
    }
    if let Some(cap) = cap_polygon(&cut, &h.normal, tol) {
        out.push(cap);
    }
    out
}

fn cap_polygon(points: &[Point3<f64>], n: &Vector3<f64>, tol: f64) -> Option<Vec<Point3<f64>>> {
    let mut uniq: Vec<Point3<f64>> = Vec::new();
    for p in points {
        if !uniq.iter().any(|q| (*q - *p).norm() <= tol.max(1e-12)) {
            uniq.push(*p);
        }
    }
    if uniq.len() < 3 {
        return None;
    }
    let c = uniq.iter().fold(Vector3::zeros(), |a, p| a + *p) * (1.0 / uniq.len() as f64);
    let helper = if n.x.abs() < 0.9 { Vector3::new(1.0, 0.0, 0.0) } else { Vector3::new(0.0, 1.0, 0.0) };
    let u = n.cross(&helper).normalized();
    let v = n.cross(&u);
    let mut keyed: Vec<(f64, Point3<f64>)> = uniq.into_iter().map(|p| ((p - c).dot(&v).atan2((p - c).dot(&u)), p)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    Some(keyed.into_iter().map(|(_, p)| p).collect())
}

/// Enclosed volume of a closed, outward-oriented polygon mesh.
pub fn polyhedron_volume(poly: &[Vec<Point3<f64>>]) -> f64 {
    let mut v = 0.0;
    for face in poly {
        for i in 1..face.len().saturating_sub(1) {
            v += face[0].dot(&face[i].cross(&face[i + 1]));
        }
    }
    v / 6.0
}

/// Intersection over union of the convex hull volumes of two clouds.
pub fn hull_overlap<T: Real>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<f64> {
    let (ha, hb) = (ConvexHull::new(a)?, ConvexHull::new(b)?);
    Ok(overlap_of(&ha, &hb))
}

pub fn overlap_of(ha: &ConvexHull, hb: &ConvexHull) -> f64 {
    let (va, vb) = (ha.volume(), hb.volume());
    let inter = ha.intersection_volume(hb).clamp(0.0, va.min(vb));
    let union = va + vb - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(offset: Vector3<f64>, side: f64) -> PointCloud<f64> {
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push(offset + Vector3::new((i & 1) as f64, (i >> 1 & 1) as f64, (i >> 2 & 1) as f64) * side);
        }
        // Interior and face points must not change the hull.
        pts.push(offset + Vector3::new(0.5, 0.5, 0.5) * side);
        pts.push(offset + Vector3::new(0.5, 0.5, 1.0) * side);
        PointCloud::new(pts)
    }

    fn blob(rng: &mut ChaCha8Rng, center: Vector3<f64>, n: usize) -> PointCloud<f64> {
        let (a, b, c) = (rng.gen_range(0.3..1.5), rng.gen_range(0.3..1.5), rng.gen_range(0.3..1.5));
        PointCloud::new(
            (0..n)
                .map(|_| center + Vector3::new(rng.gen_range(-a..a), rng.gen_range(-b..b), rng.gen_range(-c..c)))
                .collect(),
        )
    }

    #[test]
    fn cube_hull() {
        let h = ConvexHull::new(&cube(Vector3::zeros(), 2.0)).unwrap();
        assert!((h.volume() - 8.0).abs() < 1e-12);
        assert!(h.contains(&Vector3::new(1.0, 1.0, 1.0)));
        assert!(!h.contains(&Vector3::new(2.1, 1.0, 1.0)));
    }

    #[test]
    fn analytic_overlaps() {
        let a = cube(Vector3::zeros(), 1.0);
        assert_eq!(hull_overlap(&a, &a).unwrap(), 1.0);
        let b = cube(Vector3::new(0.5, 0.0, 0.0), 1.0);
        assert!((hull_overlap(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-9);
        let far = cube(Vector3::new(5.0, 0.0, 0.0), 1.0);
        assert_eq!(hull_overlap(&a, &far).unwrap(), 0.0);
        let inner = cube(Vector3::new(0.25, 0.25, 0.25), 0.5);
        assert!((hull_overlap(&a, &inner).unwrap() - 0.125).abs() < 1e-9);
    }

    #[test]
    fn flat_cloud_is_degenerate() {
        let flat = PointCloud::new((0..20).map(|i| Vector3::new(i as f64, (i * i % 7) as f64, 0.0)).collect());
        assert!(matches!(ConvexHull::new(&flat), Err(Error::DegenerateHull(_))));
    }

    #[test]
    fn hull_volume_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = blob(&mut rng, Vector3::zeros(), 60);
        let h = ConvexHull::new(&cloud).unwrap();
        let (lo, hi) = cloud.bounds().unwrap();
        let n = 200_000;
        let inside = (0..n)
            .filter(|_| h.contains(&Vector3::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y), rng.gen_range(lo.z..hi.z))))
            .count();
        let box_vol = (hi.x - lo.x) * (hi.y - lo.y) * (hi.z - lo.z);
        let mc = inside as f64 / n as f64 * box_vol;
        assert!((mc - h.volume()).abs() / h.volume() < 0.02);
        for p in cloud.iter() {
            assert!(h.contains(p));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn overlap_is_symmetric_and_shrinks_with_distance(seed in any::<u64>(), axis in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = blob(&mut rng, Vector3::zeros(), 25);
            let b = blob(&mut rng, Vector3::new(0.3, -0.2, 0.1), 25);
            let ab = hull_overlap(&a, &b).unwrap();
            let ba = hull_overlap(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            // Translating a copy away from itself starts at the overlap peak.
            let mut last = 1.0;
            for step in 1..8 {
                let mut shift = Vector3::zeros();
                shift[axis] = 0.3 * step as f64;
                let moved = PointCloud::new(a.iter().map(|p| *p + shift).collect());
                let o = hull_overlap(&a, &moved).unwrap();
                prop_assert!(o <= last + 1e-9, "{o} > {last}");
                last = o;
            }
        }
    }
}
