//! Three-class semantic head over descriptors.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::localization::SegmentMap;
use crate::nn::layers::{dense, relu, softmax};
use crate::nn::{Architecture, NetworkWeights};

/// Declaration order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticClass {
    Vehicle,
    Building,
    Other,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; 3] = [Self::Vehicle, Self::Building, Self::Other];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for SemanticClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vehicle => "vehicle",
            Self::Building => "building",
            Self::Other => "other",
        })
    }
}

impl FromStr for SemanticClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vehicle" => Ok(Self::Vehicle),
            "building" => Ok(Self::Building),
            "other" => Ok(Self::Other),
            _ => Err(Error::InvalidParameter(format!("unknown semantic class `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticPrediction {
    pub class: SemanticClass,
    pub probabilities: [f64; 3],
}

impl SemanticPrediction {
    /// Softmax of `logits`; the first maximal class wins ties.
    pub fn from_logits(logits: [f64; 3]) -> Self {
        let p = softmax(&logits);
        let probabilities = [p[0], p[1], p[2]];
        let mut best = 0;
        for i in 1..3 {
            if probabilities[i] > probabilities[best] {
                best = i;
            }
        }
        Self {
            class: SemanticClass::ALL[best],
            probabilities,
        }
    }
}

/// Raw scores of the head before softmax.
pub fn logits(d: &Descriptor, w: &NetworkWeights) -> Result<[f64; 3]> {
    w.require(Architecture::Semantics)?;
    let input_dim = w.tensor("sem.fc1.weight").dims[1];
    if d.len() != input_dim {
        return Err(Error::VariantMismatch {
            expected: format!("{input_dim}-d descriptor"),
            found: format!("{}-d descriptor", d.len()),
        });
    }
    let x: Vec<f64> = d.values.iter().map(|&v| f64::from(v)).collect();
    let mut h = dense(&x, &w.tensor("sem.fc1.weight").data, &w.tensor("sem.fc1.bias").data);
    relu(&mut h);
    let out = dense(&h, &w.tensor("sem.fc2.weight").data, &w.tensor("sem.fc2.bias").data);
    Ok([out[0], out[1], out[2]])
}

pub fn classify(d: &Descriptor, w: &NetworkWeights) -> Result<SemanticPrediction> {
    Ok(SemanticPrediction::from_logits(logits(d, w)?))
}

/// Copy of `map` without the entries whose class is in `drop`.
pub fn filter_map(map: &SegmentMap, drop: &BTreeSet<SemanticClass>) -> SegmentMap {
    map.filtered(|e| !drop.contains(&e.class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::DescriptorVariant;
    use crate::linalg::Vector3;
    use crate::localization::MapEntry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn descriptor(rng: &mut ChaCha8Rng) -> Descriptor {
        Descriptor::new((0..64).map(|_| rng.gen_range(-2.0f32..2.0)).collect(), DescriptorVariant::SegMap).unwrap()
    }

    fn map_with_classes(classes: &[SemanticClass], rng: &mut ChaCha8Rng) -> SegmentMap {
        let mut m = SegmentMap::new(DescriptorVariant::SegMap);
        for (i, &c) in classes.iter().enumerate() {
            m.upsert(MapEntry::new(i as u64, Vector3::new(i as f64, 0.0, 0.0), descriptor(rng), c, 10)).unwrap();
        }
        m
    }

    #[test]
    fn zero_head_is_uniform_and_picks_vehicle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = classify(&descriptor(&mut rng), &NetworkWeights::zeros(Architecture::Semantics)).unwrap();
        assert_eq!(p.class, SemanticClass::Vehicle);
        for v in p.probabilities {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn head_matches_hand_written_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = NetworkWeights::random(Architecture::Semantics, 2);
        let d = descriptor(&mut rng);
        let t = |n: &str| w.tensor(n).data.iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
        let (w1, b1, w2, b2) = (t("sem.fc1.weight"), t("sem.fc1.bias"), t("sem.fc2.weight"), t("sem.fc2.bias"));
        let h: Vec<f64> = (0..32)
            .map(|o| (b1[o] + (0..64).map(|i| w1[o * 64 + i] * f64::from(d.values[i])).sum::<f64>()).max(0.0))
            .collect();
        let z: Vec<f64> = (0..3).map(|o| b2[o] + (0..32).map(|i| w2[o * 32 + i] * h[i]).sum::<f64>()).collect();
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let p = classify(&d, &w).unwrap();
        for i in 0..3 {
            assert!((p.probabilities[i] - e[i] / s).abs() < 1e-5);
        }
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn logit_shift_changes_nothing() {
        let a = SemanticPrediction::from_logits([0.2, 1.7, -0.4]);
        let b = SemanticPrediction::from_logits([50.2, 51.7, 49.6]);
        assert_eq!(a.class, b.class);
        for i in 0..3 {
            assert!((a.probabilities[i] - b.probabilities[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn ties_follow_enum_order() {
        assert_eq!(SemanticPrediction::from_logits([0.0, 1.0, 1.0]).class, SemanticClass::Building);
    }

    #[test]
    fn dropping_vehicles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut classes = vec![SemanticClass::Vehicle; 284];
        classes.extend((0..1057).map(|i| if i % 2 == 0 { SemanticClass::Building } else { SemanticClass::Other }));
        let m = map_with_classes(&classes, &mut rng);
        assert_eq!(m.len(), 1341);
        let drop = BTreeSet::from([SemanticClass::Vehicle]);
        let f = filter_map(&m, &drop);
        assert_eq!(f.len(), 1057);
        assert_eq!(m.len(), 1341);
        assert_eq!(filter_map(&f, &drop), f);
        assert_eq!(filter_map(&m, &BTreeSet::new()), m);
    }

    #[test]
    fn random_labels_match_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let classes: Vec<_> = (0..300).map(|_| SemanticClass::ALL[rng.gen_range(0..3)]).collect();
        let m = map_with_classes(&classes, &mut rng);
        let drop = BTreeSet::from([SemanticClass::Other, SemanticClass::Building]);
        let expected = classes.iter().filter(|c| !drop.contains(c)).count();
        assert_eq!(filter_map(&m, &drop).len(), expected);
    }
}
