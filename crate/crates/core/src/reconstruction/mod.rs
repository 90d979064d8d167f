//! Decoding descriptors back to occupancy grids, and comparing and meshing them.

mod mesh;
pub mod tables;

use std::path::Path;

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::nn::layers::{deconv3d_stride2, dense, relu, sigmoid, Volume};
use crate::nn::{Architecture, Container, NetworkWeights, Tensor, DECODER_SEED};
use crate::preprocess::{VoxelizedInput, GRID_DIMS, GRID_VOXELS};
use crate::scalar::Real;

pub use mesh::{marching_cubes, TriangleMesh};

/// Occupancy probabilities in `[x][y][z]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub probs: Vec<f64>,
    pub voxel_sides: [f64; 3],
}

impl OccupancyGrid {
    pub fn new(probs: Vec<f64>, voxel_sides: [f64; 3]) -> Self {
        assert_eq!(probs.len(), GRID_VOXELS);
        Self { probs, voxel_sides }
    }

    pub fn from_input(input: &VoxelizedInput) -> Self {
        Self::new(input.occupancy.iter().map(|&o| f64::from(o)).collect(), input.voxel_sides)
    }

    pub fn binarize(&self, threshold: f64) -> Vec<bool> {
        self.probs.iter().map(|&p| p >= threshold).collect()
    }

    /// Stores the grid as a container with a single `occupancy` tensor.
    pub fn to_container(&self) -> Container {
        let data = self.probs.iter().map(|&p| p as f32).collect();
        Container::from_tensors(vec![Tensor::new("occupancy", GRID_DIMS.to_vec(), data)])
    }

    pub fn from_container(c: &Container, voxel_sides: [f64; 3]) -> Result<Self> {
        let t = c.expect("occupancy", &GRID_DIMS)?;
        Ok(Self::new(t.data.iter().map(|&v| f64::from(v)).collect(), voxel_sides))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }
}

pub fn decode(d: &Descriptor, w: &NetworkWeights, voxel_sides: [f64; 3]) -> Result<OccupancyGrid> {
    decode_with::<f64>(d, w, voxel_sides)
}

/// Decoder forward pass with activations in `T`.
pub fn decode_with<T: Real>(d: &Descriptor, w: &NetworkWeights, voxel_sides: [f64; 3]) -> Result<OccupancyGrid> {
    w.require(Architecture::Decoder)?;
    let input_dim = w.tensor("dec.fc.weight").dims[1];
    if d.len() != input_dim {
        return Err(Error::VariantMismatch {
            expected: format!("{input_dim}-d descriptor"),
            found: format!("{}-d descriptor", d.len()),
        });
    }
    let x: Vec<T> = d.values.iter().map(|&v| T::lit(f64::from(v))).collect();
    let mut h = dense(&x, &w.tensor("dec.fc.weight").data, &w.tensor("dec.fc.bias").data);
    relu(&mut h);
    let mut v = Volume::from_data(64, DECODER_SEED, h);
    for (l, filters) in [(1, 64), (2, 32), (3, 1)] {
        let wt = &w.tensor(&format!("dec.deconv{l}.weight")).data;
        let b = &w.tensor(&format!("dec.deconv{l}.bias")).data;
        v = deconv3d_stride2(&v, wt, b, filters);
        if l < 3 {
            relu(&mut v.data);
        }
    }
    sigmoid(&mut v.data);
    debug_assert_eq!(v.dims, GRID_DIMS);
    Ok(OccupancyGrid::new(v.data.into_iter().map(|p| p.as_f64()).collect(), voxel_sides))
}

/// Symmetric mean of the two directed ratios of occupied voxels that have an
/// occupied counterpart within one voxel (Chebyshev) in the other grid.
///
/// The reconstruction is binarized at `threshold`. Zero when the binarized
/// reconstruction is empty.
pub fn correspondence_ratio(original: &VoxelizedInput, recon: &OccupancyGrid, threshold: f64) -> Result<f64> {
    let a: Vec<bool> = original.occupancy.iter().map(|&o| o != 0).collect();
    if !a.iter().any(|&v| v) {
        return Err(Error::EmptyOriginal);
    }
    let b = recon.binarize(threshold);
    if !b.iter().any(|&v| v) {
        return Ok(0.0);
    }
    Ok(0.5 * (directed_ratio(&a, &b) + directed_ratio(&b, &a)))
}

/// Fraction of voxels set in `from` with a set voxel of `to` in their 3×3×3 block.
pub fn directed_ratio(from: &[bool], to: &[bool]) -> f64 {
    let dilated = dilate(to);
    let total = from.iter().filter(|&&v| v).count();
    if total == 0 {
        return 0.0;
    }
    let hit = from.iter().zip(&dilated).filter(|(&f, &d)| f && d).count();
    hit as f64 / total as f64
}

fn dilate(grid: &[bool]) -> Vec<bool> {
    let [nx, ny, nz] = GRID_DIMS;
    let idx = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;
    let mut out = vec![false; grid.len()];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if !grid[idx(x, y, z)] {
                    continue;
                }
                for ox in x.saturating_sub(1)..(x + 2).min(nx) {
                    for oy in y.saturating_sub(1)..(y + 2).min(ny) {
                        for oz in z.saturating_sub(1)..(z + 2).min(nz) {
                            out[idx(ox, oy, oz)] = true;
                        }
                    }
                }
            }
        }
    }
    out
}
