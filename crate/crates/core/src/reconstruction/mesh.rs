use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::linalg::Vector3;
use crate::preprocess::GRID_DIMS;

use super::tables::{EDGE_TABLE, TRIANGLE_TABLE};
use super::OccupancyGrid;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

/// Corner offsets in Bourke order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs of each of the 12 cube edges.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

const MIN_AREA: f64 = 1e-12;

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_normal(t).norm() * 0.5).sum()
    }

    /// Signed volume via the divergence theorem; positive for outward winding.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&[a, b, c]| self.vertices[a].dot(&self.vertices[b].cross(&self.vertices[c])) / 6.0)
            .sum()
    }

    fn triangle_normal(&self, &[a, b, c]: &[usize; 3]) -> Vector3<f64> {
        let (p, q, r) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        (q - p).cross(&(r - p))
    }

    /// Every directed edge appears exactly once and its reverse exactly once.
    pub fn is_watertight(&self) -> bool {
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for &[a, b, c] in &self.triangles {
            for e in [(a, b), (b, c), (c, a)] {
                *directed.entry(e).or_default() += 1;
            }
        }
        directed.iter().all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// No undirected edge is shared by more than two triangles.
    pub fn is_edge_manifold(&self) -> bool {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for &[a, b, c] in &self.triangles {
            for (u, v) in [(a, b), (b, c), (c, a)] {
                *count.entry((u.min(v), u.max(v))).or_default() += 1;
            }
        }
        count.values().all(|&n| n <= 2)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }
}

/// Iso-surface of `grid` at level `iso`.
///
/// The grid is padded with a layer of zeros so surfaces close at the border.
/// Vertex coordinates are in meters with voxel centers at
/// `(i + 0.5 - dim/2) · side`, i.e. centered on the grid. Triangles wind
/// counter-clockwise seen from the low-probability side.
pub fn marching_cubes(grid: &OccupancyGrid, iso: f64) -> Result<TriangleMesh> {
    if !(iso > 0.0 && iso < 1.0) {
        return Err(Error::InvalidParameter(format!("iso level {iso} outside (0, 1)")));
    }
    let [nx, ny, nz] = GRID_DIMS;
    let p = [nx + 2, ny + 2, nz + 2];
    let value = |x: usize, y: usize, z: usize| -> f64 {
        if x == 0 || y == 0 || z == 0 || x > nx || y > ny || z > nz {
            0.0
        } else {
            grid.probs[((x - 1) * ny + (y - 1)) * nz + (z - 1)]
        }
    };
    let side = grid.voxel_sides;
    let position = |g: [usize; 3]| -> Vector3<f64> {
        Vector3::new(
            (g[0] as f64 - 0.5 - nx as f64 / 2.0) * side[0],
            (g[1] as f64 - 0.5 - ny as f64 / 2.0) * side[1],
            (g[2] as f64 - 0.5 - nz as f64 / 2.0) * side[2],
        )
    };

    let mut vertices = Vec::new();
    let mut by_edge: HashMap<([usize; 3], usize), usize> = HashMap::new();
    let mut triangles = Vec::new();
    for x in 0..p[0] - 1 {
        for y in 0..p[1] - 1 {
            for z in 0..p[2] - 1 {
                let corner = |c: usize| [x + CORNERS[c][0], y + CORNERS[c][1], z + CORNERS[c][2]];
                let vals: [f64; 8] = std::array::from_fn(|c| {
                    let g = corner(c);
                    value(g[0], g[1], g[2])
                });
                let mut case = 0usize;
                for (c, &v) in vals.iter().enumerate() {
                    if v < iso {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut edge_vertex = [usize::MAX; 12];
                for (e, slot) in edge_vertex.iter_mut().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let (mut a, mut b) = (EDGES[e][0], EDGES[e][1]);
                    let (ga, gb) = (corner(a), corner(b));
                    if gb < ga {
                        std::mem::swap(&mut a, &mut b);
                    }
                    let (lo, hi) = (corner(a), corner(b));
                    let axis = (0..3).find(|&i| lo[i] != hi[i]).unwrap();
                    *slot = *by_edge.entry((lo, axis)).or_insert_with(|| {
                        let t = (iso - vals[a]) / (vals[b] - vals[a]);
                        let (pa, pb) = (position(lo), position(hi));
                        vertices.push(pa + (pb - pa) * t);
                        vertices.len() - 1
                    });
                }
                for tri in TRIANGLE_TABLE[case].chunks(3).take_while(|t| t[0] >= 0) {
                    let [a, b, c] = [0, 1, 2].map(|i| edge_vertex[tri[i] as usize]);
                    triangles.push([a, b, c]);
                }
            }
        }
    }
    let min_side = side.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(weld(vertices, triangles, 1e-6 * min_side))
}

/// Merges vertices closer than `tol` and drops degenerate triangles.
fn weld(vertices: Vec<Point3<f64>>, triangles: Vec<[usize; 3]>, tol: f64) -> TriangleMesh {
    let key = |v: &Point3<f64>| [(v.x / tol).round() as i64, (v.y / tol).round() as i64, (v.z / tol).round() as i64];
    let mut first: HashMap<[i64; 3], usize> = HashMap::new();
    let mut remap = Vec::with_capacity(vertices.len());
    let mut out = TriangleMesh::default();
    for v in &vertices {
        let id = *first.entry(key(v)).or_insert_with(|| {
            out.vertices.push(*v);
            out.vertices.len() - 1
        });
        remap.push(id);
    }
    for t in triangles {
        let t = t.map(|i| remap[i]);
        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
            continue;
        }
        if out.triangle_normal(&t).norm() * 0.5 <= MIN_AREA {
            continue;
        }
        out.triangles.push(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{voxel_offset, GRID_VOXELS};

    fn grid_from(f: impl Fn(Vector3<f64>) -> f64, side: f64) -> OccupancyGrid {
        let [nx, ny, nz] = GRID_DIMS;
        let mut probs = vec![0.0; GRID_VOXELS];
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let c = Vector3::new(
                        (x as f64 + 0.5 - nx as f64 / 2.0) * side,
                        (y as f64 + 0.5 - ny as f64 / 2.0) * side,
                        (z as f64 + 0.5 - nz as f64 / 2.0) * side,
                    );
                    probs[voxel_offset(x, y, z)] = f(c);
                }
            }
        }
        OccupancyGrid::new(probs, [side; 3])
    }

    #[test]
    fn below_iso_is_empty() {
        let g = OccupancyGrid::new(vec![0.2; GRID_VOXELS], [0.1; 3]);
        assert!(marching_cubes(&g, 0.5).unwrap().is_empty());
    }

    #[test]
    fn single_voxel_is_closed_around_its_center() {
        let mut probs = vec![0.0; GRID_VOXELS];
        probs[voxel_offset(7, 20, 3)] = 1.0;
        let g = OccupancyGrid::new(probs, [0.1; 3]);
        let m = marching_cubes(&g, 0.5).unwrap();
        assert_eq!(m.vertices.len(), 6);
        assert_eq!(m.triangles.len(), 8);
        assert!(m.is_watertight());
        let center = Vector3::new((7.5 - 16.0) * 0.1, (20.5 - 16.0) * 0.1, (3.5 - 8.0) * 0.1);
        // Volume relative to the voxel center: positive means it is enclosed.
        let rel = TriangleMesh {
            vertices: m.vertices.iter().map(|v| *v - center).collect(),
            triangles: m.triangles.clone(),
        };
        assert!(rel.signed_volume() > 0.0);
        // Octahedron with half-diagonal 0.05: volume 4/3 · 0.05³.
        assert!((m.signed_volume() - 4.0 / 3.0 * 0.05f64.powi(3)).abs() < 1e-12);
        for v in &m.vertices {
            assert!((*v - center).norm() <= 0.05 + 1e-12);
        }
    }

    #[test]
    fn sphere_area_is_close_to_analytic() {
        let r = 0.65;
        let g = grid_from(|c| if c.norm() <= r { 1.0 } else { 0.0 }, 0.1);
        let m = marching_cubes(&g, 0.5).unwrap();
        let expected = 4.0 * std::f64::consts::PI * r * r;
        let rel = (m.area() - expected).abs() / expected;
        assert!(rel < 0.10, "area {} vs {expected}", m.area());
        assert!(m.is_watertight());
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn monotone_field_is_manifold() {
        let g = grid_from(|c| 0.5 + 0.1 * c.x + 0.07 * c.y - 0.05 * c.z, 0.1);
        let m = marching_cubes(&g, 0.5).unwrap();
        assert!(!m.is_empty());
        assert!(m.is_edge_manifold());
    }

    #[test]
    fn obj_uses_one_based_indices() {
        let mut probs = vec![0.0; GRID_VOXELS];
        probs[0] = 1.0;
        let m = marching_cubes(&OccupancyGrid::new(probs, [0.1; 3]), 0.5).unwrap();
        let obj = m.to_obj();
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), m.vertices.len());
        let max_index: usize = obj
            .lines()
            .filter(|l| l.starts_with("f "))
            .flat_map(|l| l[2..].split(' ').map(|s| s.parse::<usize>().unwrap()))
            .max()
            .unwrap();
        assert_eq!(max_index, m.vertices.len());
        assert!(!obj.contains("f 0"));
    }

    #[test]
    fn invalid_iso_is_rejected() {
        let g = OccupancyGrid::new(vec![0.0; GRID_VOXELS], [0.1; 3]);
        assert!(marching_cubes(&g, 1.0).is_err());
    }
}
