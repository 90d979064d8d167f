//! Learned segment descriptors and the eigenvalue baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{covariance, eig_sym3};
use crate::nn::layers::{batch_norm, conv3d_same, dense, max_pool2, relu, Volume};
use crate::nn::{Architecture, NetworkWeights};
use crate::preprocess::{VoxelizedInput, GRID_DIMS};
use crate::scalar::Real;
use crate::segmentation::SegmentObservation;

/// Scale inputs are divided by this many meters before FC1.
pub const SCALE_NORMALIZER: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorVariant {
    SegMap,
    SegMini,
}

impl DescriptorVariant {
    pub fn dimension(self) -> usize {
        self.architecture().encoder().unwrap().descriptor
    }

    pub fn architecture(self) -> Architecture {
        match self {
            Self::SegMap => Architecture::SegMap,
            Self::SegMini => Architecture::SegMini,
        }
    }

    pub fn from_architecture(a: Architecture) -> Result<Self> {
        match a {
            Architecture::SegMap => Ok(Self::SegMap),
            Architecture::SegMini => Ok(Self::SegMini),
            other => Err(Error::ArchitectureMismatch {
                expected: "segmap-v1 or segmini-v1".into(),
                found: other.id().into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub values: Vec<f32>,
    pub variant: DescriptorVariant,
}

impl Descriptor {
    pub fn new(values: Vec<f32>, variant: DescriptorVariant) -> Result<Self> {
        if values.len() != variant.dimension() {
            return Err(Error::VariantMismatch {
                expected: format!("{} values", variant.dimension()),
                found: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("descriptor has a non-finite entry".into()));
        }
        Ok(Self { values, variant })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn squared_distance(&self, other: &Descriptor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum()
    }
}

/// Encoder forward pass in `f64`.
pub fn describe(input: &VoxelizedInput, w: &NetworkWeights) -> Result<Descriptor> {
    describe_with::<f64>(input, w)
}

/// Encoder forward pass with activations in `T`.
pub fn describe_with<T: Real>(input: &VoxelizedInput, w: &NetworkWeights) -> Result<Descriptor> {
    let variant = DescriptorVariant::from_architecture(w.architecture())?;
    let shape = variant.architecture().encoder().unwrap();
    let data = input.occupancy.iter().map(|&o| if o != 0 { T::one() } else { T::zero() }).collect();
    let mut v = Volume::from_data(1, GRID_DIMS, data);
    for (i, &filters) in shape.filters.iter().enumerate() {
        let l = i + 1;
        let t = |p: &str| &w.tensor(&format!("enc.{p}")).data;
        v = conv3d_same(&v, t(&format!("conv{l}.weight")), t(&format!("conv{l}.bias")), filters);
        batch_norm(
            &mut v,
            t(&format!("bn{l}.gamma")),
            t(&format!("bn{l}.beta")),
            t(&format!("bn{l}.mean")),
            t(&format!("bn{l}.var")),
        );
        relu(&mut v.data);
        if l < 3 {
            v = max_pool2(&v);
        }
    }
    let mut features = v.data;
    features.extend(input.original_extent.iter().map(|&e| T::lit(e / SCALE_NORMALIZER)));
    let mut h = dense(&features, &w.tensor("enc.fc1.weight").data, &w.tensor("enc.fc1.bias").data);
    relu(&mut h);
    let out = dense(&h, &w.tensor("enc.fc2.weight").data, &w.tensor("enc.fc2.bias").data);
    let values = out.into_iter().map(|v| v.as_f64() as f32).collect();
    Descriptor::new(values, variant)
}

/// Shape features from the normalized covariance eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenvalueFeatures {
    pub linearity: f64,
    pub planarity: f64,
    pub scattering: f64,
    pub omnivariance: f64,
    pub anisotropy: f64,
    pub eigenentropy: f64,
    pub change_of_curvature: f64,
}

impl EigenvalueFeatures {
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.linearity,
            self.planarity,
            self.scattering,
            self.omnivariance,
            self.anisotropy,
            self.eigenentropy,
            self.change_of_curvature,
        ]
    }

    /// Features of eigenvalues sorted in descending order.
    pub fn from_eigenvalues(lambda: [f64; 3]) -> Result<Self> {
        let l = lambda.map(|v| v.max(0.0));
        let sum: f64 = l.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::DegenerateSegment("all points coincide"));
        }
        let [e1, e2, e3] = l.map(|v| v / sum);
        let entropy = [e1, e2, e3].iter().filter(|&&e| e > 0.0).map(|&e| -e * e.ln()).sum();
        Ok(Self {
            linearity: (e1 - e2) / e1,
            planarity: (e2 - e3) / e1,
            scattering: e3 / e1,
            omnivariance: (e1 * e2 * e3).cbrt(),
            anisotropy: (e1 - e3) / e1,
            eigenentropy: entropy,
            change_of_curvature: e3,
        })
    }
}

pub fn describe_eigenvalue<T: Real>(obs: &SegmentObservation<T>) -> Result<EigenvalueFeatures> {
    let points = &obs.cloud.points;
    if points.len() < 3 {
        return Err(Error::DegenerateSegment("fewer than 3 points"));
    }
    let (cov, _) = covariance(points)?;
    let eig = eig_sym3(&cov.cast::<f64>())?;
    EigenvalueFeatures::from_eigenvalues(eig.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use crate::linalg::Vector3;
    use crate::nn::layers::Volume;
    use crate::preprocess::{voxel_offset, GRID_VOXELS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_input(seed: u64, fill: f64) -> VoxelizedInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = VoxelizedInput::empty([0.1, 0.12, 0.2], [3.2, 3.84, 3.2]);
        for o in v.occupancy.iter_mut() {
            *o = u8::from(rng.gen_bool(fill));
        }
        v
    }

    /// Independent encoder: per-output-voxel convolution sums, explicit
    /// pooling windows and row-by-row dense products.
    fn reference(input: &VoxelizedInput, w: &NetworkWeights) -> Vec<f64> {
        let e = w.architecture().encoder().unwrap();
        let mut dims = GRID_DIMS;
        let mut chans = 1;
        let mut act: Vec<f64> = input.occupancy.iter().map(|&o| f64::from(o)).collect();
        let at = |a: &Vec<f64>, dims: [usize; 3], c: usize, x: i64, y: i64, z: i64| -> f64 {
            if x < 0 || y < 0 || z < 0 || x >= dims[0] as i64 || y >= dims[1] as i64 || z >= dims[2] as i64 {
                return 0.0;
            }
            a[((c * dims[0] + x as usize) * dims[1] + y as usize) * dims[2] + z as usize]
        };
        for l in 1..=3 {
            let f = e.filters[l - 1];
            let g = |n: &str| w.tensor(&format!("enc.{n}")).data.clone();
            let (wt, b) = (g(&format!("conv{l}.weight")), g(&format!("conv{l}.bias")));
            let (ga, be, me, va) = (
                g(&format!("bn{l}.gamma")),
                g(&format!("bn{l}.beta")),
                g(&format!("bn{l}.mean")),
                g(&format!("bn{l}.var")),
            );
            let mut next = vec![0.0; f * dims[0] * dims[1] * dims[2]];
            for o in 0..f {
                for x in 0..dims[0] {
                    for y in 0..dims[1] {
                        for z in 0..dims[2] {
                            let mut s = f64::from(b[o]);
                            for i in 0..chans {
                                for kx in 0..3 {
                                    for ky in 0..3 {
                                        for kz in 0..3 {
                                            let wv = wt[(((o * chans + i) * 3 + kx) * 3 + ky) * 3 + kz];
                                            s += f64::from(wv)
                                                * at(&act, dims, i, (x + kx) as i64 - 1, (y + ky) as i64 - 1, (z + kz) as i64 - 1);
                                        }
                                    }
                                }
                            }
                            let bn = (s - f64::from(me[o])) / (f64::from(va[o]) + 1e-3).sqrt() * f64::from(ga[o])
                                + f64::from(be[o]);
                            next[((o * dims[0] + x) * dims[1] + y) * dims[2] + z] = bn.max(0.0);
                        }
                    }
                }
            }
            act = next;
            chans = f;
            if l < 3 {
                let nd = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
                let mut pooled = vec![0.0; chans * nd[0] * nd[1] * nd[2]];
                for c in 0..chans {
                    for x in 0..nd[0] {
                        for y in 0..nd[1] {
                            for z in 0..nd[2] {
                                let mut m = f64::NEG_INFINITY;
                                for d in 0..8 {
                                    let v = at(&act, dims, c, (2 * x + d / 4) as i64, (2 * y + (d / 2) % 2) as i64, (2 * z + d % 2) as i64);
                                    m = m.max(v);
                                }
                                pooled[((c * nd[0] + x) * nd[1] + y) * nd[2] + z] = m;
                            }
                        }
                    }
                }
                act = pooled;
                dims = nd;
            }
        }
        act.extend(input.original_extent.iter().map(|e| e / 10.0));
        let fc = |x: &[f64], wn: &str, bn: &str| -> Vec<f64> {
            let wt = &w.tensor(wn).data;
            let b = &w.tensor(bn).data;
            (0..b.len())
                .map(|o| f64::from(b[o]) + (0..x.len()).map(|i| f64::from(wt[o * x.len() + i]) * x[i]).sum::<f64>())
                .collect()
        };
        let h: Vec<f64> = fc(&act, "enc.fc1.weight", "enc.fc1.bias").into_iter().map(|v| v.max(0.0)).collect();
        fc(&h, "enc.fc2.weight", "enc.fc2.bias")
    }

    #[test]
    fn zero_weights_give_zero_descriptor() {
        for arch in [Architecture::SegMap, Architecture::SegMini] {
            let w = NetworkWeights::zeros(arch);
            let d = describe(&random_input(1, 0.2), &w).unwrap();
            assert_eq!(d.len(), arch.encoder().unwrap().descriptor);
            assert!(d.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_pass_matches_independent_reference() {
        for (arch, seed) in [(Architecture::SegMini, 5), (Architecture::SegMap, 6)] {
            let w = NetworkWeights::random(arch, seed);
            let input = random_input(seed, 0.15);
            let d = describe(&input, &w).unwrap();
            let r = reference(&input, &w);
            for (a, b) in d.values.iter().zip(&r) {
                assert!((f64::from(*a) - b).abs() < 1e-5, "{arch}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn f32_activations_stay_close_to_f64() {
        let w = NetworkWeights::random(Architecture::SegMini, 9);
        let input = random_input(9, 0.1);
        let a = describe_with::<f32>(&input, &w).unwrap();
        let b = describe_with::<f64>(&input, &w).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-3);
        }
    }

    #[test]
    fn identical_inputs_give_identical_bits() {
        let w = NetworkWeights::random(Architecture::SegMini, 2);
        let a = describe(&random_input(3, 0.2), &w).unwrap();
        let b = describe(&random_input(3, 0.2), &w).unwrap();
        let bits = |d: &Descriptor| d.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn doubling_last_layer_doubles_descriptor() {
        let mut w = NetworkWeights::random(Architecture::SegMini, 4);
        w.tensor_mut("enc.fc2.bias").unwrap().data.fill(0.0);
        let input = random_input(4, 0.2);
        let a = describe(&input, &w).unwrap();
        for v in &mut w.tensor_mut("enc.fc2.weight").unwrap().data {
            *v *= 2.0;
        }
        let b = describe(&input, &w).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn wrong_architecture_is_rejected() {
        let w = NetworkWeights::zeros(Architecture::Decoder);
        assert!(matches!(describe(&random_input(1, 0.1), &w), Err(Error::ArchitectureMismatch { .. })));
    }

    #[test]
    fn single_voxel_reaches_only_its_receptive_field() {
        // With only conv1 bias-free and a lone voxel, conv1 output is the kernel itself.
        let mut input = VoxelizedInput::empty([0.1; 3], [1.0; 3]);
        input.occupancy[voxel_offset(10, 10, 5)] = 1;
        assert_eq!(input.occupancy.len(), GRID_VOXELS);
        let v = Volume::from_data(1, GRID_DIMS, input.occupancy.iter().map(|&o| f64::from(o)).collect());
        let w: Vec<f32> = (0..27).map(|k| k as f32).collect();
        let out = conv3d_same(&v, &w, &[0.0], 1);
        assert_eq!(out.data[out.index(0, 11, 11, 6)], 0.0);
        assert_eq!(out.data[out.index(0, 9, 9, 4)], 26.0);
        assert_eq!(out.data.iter().filter(|&&x| x != 0.0).count(), 26);
    }

    fn obs(points: Vec<Vector3<f64>>) -> SegmentObservation<f64> {
        SegmentObservation::new(PointCloud::new(points), 0).unwrap()
    }

    #[test]
    fn line_is_purely_linear() {
        let f = describe_eigenvalue(&obs((0..50).map(|i| Vector3::new(i as f64 * 0.1, 2.0 * i as f64 * 0.1, 0.3)).collect()))
            .unwrap();
        assert!((f.linearity - 1.0).abs() < 1e-9);
        assert!(f.planarity.abs() < 1e-9 && f.scattering.abs() < 1e-9);
    }

    #[test]
    fn uniform_disk_is_planar() {
        // Disk of radius r: λ = (r²/4, r²/4, 0), so planarity = 1.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<_> = (0..4000)
            .map(|_| {
                let r = rng.gen::<f64>().sqrt() * 2.0;
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                Vector3::new(r * a.cos(), r * a.sin(), 0.0)
            })
            .collect();
        let f = describe_eigenvalue(&obs(pts)).unwrap();
        assert!(f.planarity > 0.9, "{f:?}");
        assert!(f.scattering < 1e-9);
        assert!((f.linearity + f.planarity + f.scattering - 1.0).abs() < 1e-9);
    }

    #[test]
    fn isotropic_blob_scatters() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut g = || rng.sample::<f64, _>(StandardNormal);
        let pts: Vec<_> = (0..20000).map(|_| Vector3::new(g(), g(), g())).collect();
        let f = describe_eigenvalue(&obs(pts)).unwrap();
        assert!((f.scattering - 1.0).abs() < 0.05, "{f:?}");
    }

    #[test]
    fn too_few_points_is_degenerate() {
        let o = obs(vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)]);
        assert!(matches!(describe_eigenvalue(&o), Err(Error::DegenerateSegment(_))));
    }
}
