//! Inference-only network kernels and the fixed architectures.

pub mod container;
pub mod layers;

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
pub use container::{Container, Tensor};

/// Batch-normalization epsilon.
pub const BN_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    SegMap,
    SegMini,
    Decoder,
    Semantics,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [Self::SegMap, Self::SegMini, Self::Decoder, Self::Semantics];

    pub fn id(self) -> &'static str {
        match self {
            Self::SegMap => "segmap-v1",
            Self::SegMini => "segmini-v1",
            Self::Decoder => "decoder-v1",
            Self::Semantics => "semantics-v1",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.id() == id)
            .ok_or_else(|| Error::UnknownArchitecture(id.to_string()))
    }

    /// Encoder shape, `None` for non-encoder architectures.
    pub fn encoder(self) -> Option<EncoderShape> {
        match self {
            Self::SegMap => Some(EncoderShape {
                filters: [32, 64, 64],
                fc1: 512,
                descriptor: 64,
            }),
            Self::SegMini => Some(EncoderShape {
                filters: [16, 32, 32],
                fc1: 256,
                descriptor: 32,
            }),
            _ => None,
        }
    }

    /// Every tensor name with its shape, in canonical order.
    pub fn tensor_shapes(self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut push = |n: &str, d: Vec<usize>| out.push((n.to_string(), d));
        match self {
            Self::SegMap | Self::SegMini => {
                let e = self.encoder().unwrap();
                let mut cin = 1;
                for (i, &f) in e.filters.iter().enumerate() {
                    let l = i + 1;
                    push(&format!("enc.conv{l}.weight"), vec![f, cin, 3, 3, 3]);
                    push(&format!("enc.conv{l}.bias"), vec![f]);
                    for p in ["gamma", "beta", "mean", "var"] {
                        push(&format!("enc.bn{l}.{p}"), vec![f]);
                    }
                    cin = f;
                }
                push("enc.fc1.weight", vec![e.fc1, e.fc1_inputs()]);
                push("enc.fc1.bias", vec![e.fc1]);
                push("enc.fc2.weight", vec![e.descriptor, e.fc1]);
                push("enc.fc2.bias", vec![e.descriptor]);
            }
            Self::Decoder => {
                push("dec.fc.weight", vec![DECODER_SEED_VOXELS * 64, 64]);
                push("dec.fc.bias", vec![DECODER_SEED_VOXELS * 64]);
                for (l, (cout, cin)) in [(64, 64), (32, 64), (1, 32)].into_iter().enumerate() {
                    push(&format!("dec.deconv{}.weight", l + 1), vec![cout, cin, 3, 3, 3]);
                    push(&format!("dec.deconv{}.bias", l + 1), vec![cout]);
                }
            }
            Self::Semantics => {
                push("sem.fc1.weight", vec![32, 64]);
                push("sem.fc1.bias", vec![32]);
                push("sem.fc2.weight", vec![3, 32]);
                push("sem.fc2.bias", vec![3]);
            }
        }
        out
    }

    pub fn parameter_count(self) -> usize {
        self.tensor_shapes().iter().map(|(_, d)| d.iter().product::<usize>()).sum()
    }

    /// Multiply-accumulate operations of one forward pass.
    pub fn mac_count(self) -> usize {
        let g = crate::preprocess::GRID_DIMS;
        match self {
            Self::SegMap | Self::SegMini => {
                let e = self.encoder().unwrap();
                let v0 = g[0] * g[1] * g[2];
                let (v1, v2) = (v0 / 8, v0 / 64);
                let conv = 27 * (v0 * e.filters[0] + v1 * e.filters[0] * e.filters[1] + v2 * e.filters[1] * e.filters[2]);
                conv + e.fc1_inputs() * e.fc1 + e.fc1 * e.descriptor
            }
            Self::Decoder => {
                let fc = 64 * DECODER_SEED_VOXELS * 64;
                // Each input voxel scatters into 27 outputs per filter pair.
                let d1 = DECODER_SEED_VOXELS * 27 * 64 * 64;
                let d2 = DECODER_SEED_VOXELS * 8 * 27 * 64 * 32;
                let d3 = DECODER_SEED_VOXELS * 64 * 27 * 32;
                fc + d1 + d2 + d3
            }
            Self::Semantics => 64 * 32 + 32 * 3,
        }
    }

    /// Identifies the architecture from tensor names and the first conv width.
    pub fn detect(c: &Container) -> Result<Self> {
        if let Some(t) = c.get("enc.conv1.weight") {
            return match t.dims.first() {
                Some(32) => Ok(Self::SegMap),
                Some(16) => Ok(Self::SegMini),
                _ => Err(Error::UnknownArchitecture(format!("encoder with conv1 shape {:?}", t.dims))),
            };
        }
        if c.contains("dec.fc.weight") {
            return Ok(Self::Decoder);
        }
        if c.contains("sem.fc1.weight") {
            return Ok(Self::Semantics);
        }
        Err(Error::UnknownArchitecture("no recognizable tensors".into()))
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Decoder FC output is reshaped to 64 channels over 4×4×2 voxels.
pub const DECODER_SEED: [usize; 3] = [4, 4, 2];
pub const DECODER_SEED_VOXELS: usize = DECODER_SEED[0] * DECODER_SEED[1] * DECODER_SEED[2];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub filters: [usize; 3],
    pub fc1: usize,
    pub descriptor: usize,
}

impl EncoderShape {
    /// Flattened conv3 features plus the three scale values.
    pub fn fc1_inputs(&self) -> usize {
        let g = crate::preprocess::GRID_DIMS;
        self.filters[2] * (g[0] / 4) * (g[1] / 4) * (g[2] / 4) + 3
    }
}

/// Validated parameters of one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    architecture: Architecture,
    container: Container,
}

impl NetworkWeights {
    /// Checks presence, shape and finiteness of every required tensor.
    pub fn new(architecture: Architecture, container: Container) -> Result<Self> {
        for (name, dims) in architecture.tensor_shapes() {
            let t = container.expect(&name, &dims)?;
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidWeights(name));
            }
        }
        Ok(Self { architecture, container })
    }

    pub fn from_container(container: Container) -> Result<Self> {
        let arch = Architecture::detect(&container)?;
        Self::new(arch, container)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.container.save(path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.container.to_bytes()
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn architecture_id(&self) -> &'static str {
        self.architecture.id()
    }

    pub fn container(&self) -> &Container {
        &self.container
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        self.container.get(name).expect("validated at construction")
    }

    pub fn require(&self, arch: Architecture) -> Result<()> {
        if self.architecture != arch {
            return Err(Error::ArchitectureMismatch {
                expected: arch.id().to_string(),
                found: self.architecture.id().to_string(),
            });
        }
        Ok(())
    }

    /// All tensors zero, except BN variances at one.
    pub fn zeros(architecture: Architecture) -> Self {
        let tensors = architecture
            .tensor_shapes()
            .into_iter()
            .map(|(name, dims)| {
                let n: usize = dims.iter().product();
                let fill = if name.ends_with(".var") || name.ends_with(".gamma") { 1.0 } else { 0.0 };
                Tensor::new(name, dims, vec![fill; n])
            })
            .collect();
        Self {
            architecture,
            container: Container::from_tensors(tensors),
        }
    }

    /// Seeded Glorot-uniform weights, small random biases and BN statistics.
    pub fn random(architecture: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = architecture
            .tensor_shapes()
            .into_iter()
            .map(|(name, dims)| {
                let n: usize = dims.iter().product();
                let dist = if name.ends_with(".weight") {
                    let receptive: usize = dims[2..].iter().product();
                    let fan = (dims[0] + dims[1]) * receptive;
                    let a = (6.0 / fan as f32).sqrt();
                    Uniform::new_inclusive(-a, a)
                } else if name.ends_with(".var") || name.ends_with(".gamma") {
                    Uniform::new_inclusive(0.5, 1.5)
                } else {
                    Uniform::new_inclusive(-0.1, 0.1)
                };
                let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
                Tensor::new(name, dims, data)
            })
            .collect();
        Self {
            architecture,
            container: Container::from_tensors(tensors),
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.container.get_mut(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmini_halves_segmap() {
        let a = Architecture::SegMap.encoder().unwrap();
        let b = Architecture::SegMini.encoder().unwrap();
        for i in 0..3 {
            assert_eq!(a.filters[i], 2 * b.filters[i]);
        }
        assert_eq!(a.fc1, 2 * b.fc1);
        assert_eq!(a.descriptor, 2 * b.descriptor);
        assert_eq!(a.fc1_inputs(), 16387);
        let ratio = Architecture::SegMap.mac_count() as f64 / Architecture::SegMini.mac_count() as f64;
        assert!(ratio >= 3.0, "{ratio}");
        assert!(Architecture::SegMap.parameter_count() > 3 * Architecture::SegMini.parameter_count());
    }

    #[test]
    fn detect_round_trips_every_architecture() {
        for arch in Architecture::ALL {
            let w = NetworkWeights::random(arch, 3);
            let back = NetworkWeights::from_container(Container::from_bytes(&w.to_bytes()).unwrap()).unwrap();
            assert_eq!(back.architecture(), arch);
            assert_eq!(back, w);
            assert_eq!(Architecture::from_id(arch.id()).unwrap(), arch);
        }
    }

    #[test]
    fn nan_weight_is_rejected() {
        let mut w = NetworkWeights::random(Architecture::Semantics, 1);
        w.tensor_mut("sem.fc2.bias").unwrap().data[1] = f32::NAN;
        let err = NetworkWeights::from_container(w.container().clone()).unwrap_err();
        assert!(matches!(err, Error::InvalidWeights(n) if n == "sem.fc2.bias"));
    }

    #[test]
    fn missing_and_misshaped_tensors() {
        let w = NetworkWeights::random(Architecture::Semantics, 1);
        let mut c = Container::new();
        for t in w.container().tensors().iter().filter(|t| t.name != "sem.fc1.bias") {
            c.insert(t.clone());
        }
        assert!(matches!(NetworkWeights::from_container(c.clone()), Err(Error::MissingTensor(_))));
        c.insert(Tensor::zeros("sem.fc1.bias", vec![31]));
        assert!(matches!(NetworkWeights::from_container(c), Err(Error::ShapeMismatch { .. })));
    }
}
