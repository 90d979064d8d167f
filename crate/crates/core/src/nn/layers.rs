//! Dense 3D convolution, pooling and fully connected kernels.
//!
//! Activations are `[C][X][Y][Z]`; conv and deconv weights are
//! `[out][in][3][3][3]`; dense weights are `[out][in]`.

use rayon::prelude::*;

use crate::scalar::Real;

use super::BN_EPS;

/// Multi-channel 3D activation volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![T::zero(); channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_data(channels: usize, dims: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * dims[0] * dims[1] * dims[2]);
        Self { channels, dims, data }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.dims[0] + x) * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }
}

fn cast<T: Real>(w: &[f32]) -> Vec<T> {
    w.iter().map(|&v| T::lit(f64::from(v))).collect()
}

/// Valid range of output coordinates for a same-padded tap at offset `k - 1`.
#[inline]
fn tap_range(n: usize, k: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

/// 3×3×3 convolution, stride 1, zero "same" padding.
pub fn conv3d_same<T: Real>(input: &Volume<T>, weight: &[f32], bias: &[f32], out_channels: usize) -> Volume<T> {
    let cin = input.channels;
    let [nx, ny, nz] = input.dims;
    assert_eq!(weight.len(), out_channels * cin * 27);
    assert_eq!(bias.len(), out_channels);
    let w: Vec<T> = cast(weight);
    let vox = input.voxels();
    let mut out = Volume::zeros(out_channels, input.dims);
    out.data.par_chunks_mut(vox).enumerate().for_each(|(o, acc)| {
        acc.fill(T::lit(f64::from(bias[o])));
        for i in 0..cin {
            let src = input.channel(i);
            for kx in 0..3 {
                let (x0, x1) = tap_range(nx, kx);
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ny, ky);
                    for kz in 0..3 {
                        let (z0, z1) = tap_range(nz, kz);
                        let wv = w[(((o * cin + i) * 3 + kx) * 3 + ky) * 3 + kz];
                        if wv == T::zero() {
                            continue;
                        }
                        for x in x0..x1 {
                            let sx = x + kx - 1;
                            for y in y0..y1 {
                                let sy = y + ky - 1;
                                let d = (x * ny + y) * nz;
                                let s = (sx * ny + sy) * nz;
                                let dst = &mut acc[d + z0..d + z1];
                                let srcz = &src[s + z0 + kz - 1..s + z1 + kz - 1];
                                for (a, &b) in dst.iter_mut().zip(srcz) {
                                    *a = *a + wv * b;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Inference-mode batch normalization, per channel.
pub fn batch_norm<T: Real>(v: &mut Volume<T>, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32]) {
    let n = v.voxels();
    for c in 0..v.channels {
        let scale = f64::from(gamma[c]) / (f64::from(var[c]) + BN_EPS).sqrt();
        let shift = f64::from(beta[c]) - f64::from(mean[c]) * scale;
        let (s, b) = (T::lit(scale), T::lit(shift));
        for a in &mut v.data[c * n..(c + 1) * n] {
            *a = *a * s + b;
        }
    }
}

pub fn relu<T: Real>(data: &mut [T]) {
    for a in data {
        if *a < T::zero() {
            *a = T::zero();
        }
    }
}

pub fn sigmoid<T: Real>(data: &mut [T]) {
    for a in data {
        *a = T::one() / (T::one() + (-*a).exp());
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// 2×2×2 max pooling with stride 2.
pub fn max_pool2<T: Real>(input: &Volume<T>) -> Volume<T> {
    let [nx, ny, nz] = input.dims;
    let dims = [nx / 2, ny / 2, nz / 2];
    let mut out = Volume::zeros(input.channels, dims);
    for c in 0..input.channels {
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let mut m = T::neg_infinity();
                    for dx in 0..2 {
                        for dy in 0..2 {
                            for dz in 0..2 {
                                m = m.max(input.data[input.index(c, 2 * x + dx, 2 * y + dy, 2 * z + dz)]);
                            }
                        }
                    }
                    let i = out.index(c, x, y, z);
                    out.data[i] = m;
                }
            }
        }
    }
    out
}

/// Transposed 3×3×3 convolution with stride 2.
///
/// Input voxel `i` scatters into outputs `2i + k`, `k ∈ {0,1,2}`; outputs at
/// or beyond `2n` are cropped, so every spatial size doubles.
pub fn deconv3d_stride2<T: Real>(input: &Volume<T>, weight: &[f32], bias: &[f32], out_channels: usize) -> Volume<T> {
    let cin = input.channels;
    let [nx, ny, nz] = input.dims;
    assert_eq!(weight.len(), out_channels * cin * 27);
    assert_eq!(bias.len(), out_channels);
    let w: Vec<T> = cast(weight);
    let dims = [2 * nx, 2 * ny, 2 * nz];
    let mut out = Volume::zeros(out_channels, dims);
    let vox = dims[0] * dims[1] * dims[2];
    out.data.par_chunks_mut(vox).enumerate().for_each(|(o, acc)| {
        acc.fill(T::lit(f64::from(bias[o])));
        for i in 0..cin {
            let src = input.channel(i);
            for x in 0..nx {
                for y in 0..ny {
                    for z in 0..nz {
                        let v = src[(x * ny + y) * nz + z];
                        if v == T::zero() {
                            continue;
                        }
                        for kx in 0..3 {
                            let ox = 2 * x + kx;
                            if ox >= dims[0] {
                                continue;
                            }
                            for ky in 0..3 {
                                let oy = 2 * y + ky;
                                if oy >= dims[1] {
                                    continue;
                                }
                                for kz in 0..3 {
                                    let oz = 2 * z + kz;
                                    if oz >= dims[2] {
                                        continue;
                                    }
                                    let wv = w[(((o * cin + i) * 3 + kx) * 3 + ky) * 3 + kz];
                                    let a = &mut acc[(ox * dims[1] + oy) * dims[2] + oz];
                                    *a = *a + wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// `W x + b` with `W` in `[out][in]` order.
pub fn dense<T: Real>(input: &[T], weight: &[f32], bias: &[f32]) -> Vec<T> {
    let n_in = input.len();
    let n_out = bias.len();
    assert_eq!(weight.len(), n_out * n_in);
    (0..n_out)
        .into_par_iter()
        .map(|o| {
            let row = &weight[o * n_in..(o + 1) * n_in];
            row.iter()
                .zip(input)
                .fold(T::lit(f64::from(bias[o])), |a, (&w, &x)| a + T::lit(f64::from(w)) * x)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    /// Direct definition: out[o,p] = b[o] + Σ w[o,i,k] · in[i, p + k - 1].
    fn conv_reference(input: &Volume<f64>, w: &[f32], b: &[f32], cout: usize) -> Volume<f64> {
        let [nx, ny, nz] = input.dims;
        let cin = input.channels;
        let mut out = Volume::zeros(cout, input.dims);
        for o in 0..cout {
            for x in 0..nx as i64 {
                for y in 0..ny as i64 {
                    for z in 0..nz as i64 {
                        let mut s = f64::from(b[o]);
                        for i in 0..cin {
                            for k in 0..27i64 {
                                let (kx, ky, kz) = (k / 9, (k / 3) % 3, k % 3);
                                let (sx, sy, sz) = (x + kx - 1, y + ky - 1, z + kz - 1);
                                if sx < 0 || sy < 0 || sz < 0 || sx >= nx as i64 || sy >= ny as i64 || sz >= nz as i64 {
                                    continue;
                                }
                                let wv = f64::from(w[(o * cin + i) * 27 + k as usize]);
                                s += wv * input.data[input.index(i, sx as usize, sy as usize, sz as usize)];
                            }
                        }
                        let idx = out.index(o, x as usize, y as usize, z as usize);
                        out.data[idx] = s;
                    }
                }
            }
        }
        out
    }

    /// Gather form: out[o,q] = b[o] + Σ over (i,p,k) with 2p + k = q.
    fn deconv_reference(input: &Volume<f64>, w: &[f32], b: &[f32], cout: usize) -> Volume<f64> {
        let [nx, ny, nz] = input.dims;
        let cin = input.channels;
        let dims = [2 * nx, 2 * ny, 2 * nz];
        let mut out = Volume::zeros(cout, dims);
        for o in 0..cout {
            for qx in 0..dims[0] {
                for qy in 0..dims[1] {
                    for qz in 0..dims[2] {
                        let mut s = f64::from(b[o]);
                        for i in 0..cin {
                            for kx in 0..3 {
                                for ky in 0..3 {
                                    for kz in 0..3 {
                                        let (rx, ry, rz) = (qx as i64 - kx, qy as i64 - ky, qz as i64 - kz);
                                        if rx < 0 || ry < 0 || rz < 0 || rx % 2 != 0 || ry % 2 != 0 || rz % 2 != 0 {
                                            continue;
                                        }
                                        let (px, py, pz) = ((rx / 2) as usize, (ry / 2) as usize, (rz / 2) as usize);
                                        if px >= nx || py >= ny || pz >= nz {
                                            continue;
                                        }
                                        let k = ((kx * 3 + ky) * 3 + kz) as usize;
                                        s += f64::from(w[(o * cin + i) * 27 + k]) * input.data[input.index(i, px, py, pz)];
                                    }
                                }
                            }
                        }
                        let idx = out.index(o, qx, qy, qz);
                        out.data[idx] = s;
                    }
                }
            }
        }
        out
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Volume::from_data(3, [5, 4, 6], rand_vec(&mut rng, 3 * 120).into_iter().map(f64::from).collect());
        let w = rand_vec(&mut rng, 4 * 3 * 27);
        let b = rand_vec(&mut rng, 4);
        let fast = conv3d_same(&input, &w, &b, 4);
        let slow = conv_reference(&input, &w, &b, 4);
        assert!(max_diff(&fast.data, &slow.data) < 1e-12);
    }

    #[test]
    fn deconv_matches_gather_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = Volume::from_data(2, [3, 2, 4], rand_vec(&mut rng, 2 * 24).into_iter().map(f64::from).collect());
        let w = rand_vec(&mut rng, 3 * 2 * 27);
        let b = rand_vec(&mut rng, 3);
        let fast = deconv3d_stride2(&input, &w, &b, 3);
        assert_eq!(fast.dims, [6, 4, 8]);
        let slow = deconv_reference(&input, &w, &b, 3);
        assert!(max_diff(&fast.data, &slow.data) < 1e-12);
    }

    #[test]
    fn pool_picks_block_maximum() {
        let data: Vec<f64> = (0..64).map(f64::from).collect();
        let v = Volume::from_data(1, [4, 4, 4], data);
        let p = max_pool2(&v);
        assert_eq!(p.dims, [2, 2, 2]);
        assert_eq!(p.data[0], v.data[v.index(0, 1, 1, 1)]);
        assert_eq!(p.data[7], 63.0);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[0.3f64, -1.2, 2.0]);
        let b = softmax(&[100.3f64, 98.8, 102.0]);
        assert!(max_diff(&a, &b) < 1e-12);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
