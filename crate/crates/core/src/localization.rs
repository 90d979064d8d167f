//! Global segment map, descriptor retrieval, geometric verification and
//! rigid transform estimation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::{Descriptor, DescriptorVariant};
use crate::error::{Error, Result};
use crate::geometry::{covariance, eig_sym3, Point3, SE3Transform};
use crate::kdtree::{KdTree, Neighbor};
use crate::linalg::{jacobi_eigen, DenseMatrix, Matrix3, Vector3};
use crate::nn::{Container, Tensor};
use crate::scalar::Real;
use crate::semantics::{filter_map, SemanticClass};

/// Largest integer stored exactly in an `f32` tensor.
const F32_EXACT_INT: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct MapEntry {
    pub id: u64,
    pub centroid: Point3<f64>,
    pub descriptor: Descriptor,
    pub class: SemanticClass,
    pub point_count: usize,
    /// Robot whose trajectory frame `centroid` is expressed in.
    pub robot: u32,
    /// Pose-graph node the segment was last observed from.
    pub anchor: u32,
    /// Symmetric extent of the described observation, meters; zero if unknown.
    pub extent: [f64; 3],
}

impl MapEntry {
    pub fn new(id: u64, centroid: Point3<f64>, descriptor: Descriptor, class: SemanticClass, point_count: usize) -> Self {
        Self {
            id,
            centroid,
            descriptor,
            class,
            point_count,
            robot: 0,
            anchor: 0,
            extent: [0.0; 3],
        }
    }

    pub fn with_origin(mut self, robot: u32, anchor: u32) -> Self {
        self.robot = robot;
        self.anchor = anchor;
        self
    }

    pub fn with_extent(mut self, extent: [f64; 3]) -> Self {
        self.extent = extent;
        self
    }
}

/// Segment map keyed by id, with a lazily rebuilt kd-index over descriptors.
#[derive(Debug, Clone)]
pub struct SegmentMap {
    variant: DescriptorVariant,
    entries: BTreeMap<u64, MapEntry>,
    index: OnceLock<KdTree>,
}

impl PartialEq for SegmentMap {
    fn eq(&self, other: &Self) -> bool {
        self.variant == other.variant && self.entries == other.entries
    }
}

impl SegmentMap {
    pub fn new(variant: DescriptorVariant) -> Self {
        Self {
            variant,
            entries: BTreeMap::new(),
            index: OnceLock::new(),
        }
    }

    pub fn variant(&self) -> DescriptorVariant {
        self.variant
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&MapEntry> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &MapEntry> {
        self.entries.values()
    }

    /// Inserts or replaces the entry with the same id.
    pub fn upsert(&mut self, entry: MapEntry) -> Result<()> {
        if entry.descriptor.variant != self.variant {
            return Err(Error::VariantMismatch {
                expected: format!("{:?}", self.variant),
                found: format!("{:?}", entry.descriptor.variant),
            });
        }
        self.entries.insert(entry.id, entry);
        self.index = OnceLock::new();
        Ok(())
    }

    pub fn remove(&mut self, id: u64) -> Option<MapEntry> {
        let out = self.entries.remove(&id);
        if out.is_some() {
            self.index = OnceLock::new();
        }
        out
    }

    pub fn filtered(&self, keep: impl Fn(&MapEntry) -> bool) -> SegmentMap {
        let mut out = SegmentMap::new(self.variant);
        out.entries = self.entries.iter().filter(|(_, e)| keep(e)).map(|(k, e)| (*k, e.clone())).collect();
        out
    }

    pub fn index(&self) -> &KdTree {
        self.index.get_or_init(|| {
            let dim = self.variant.dimension();
            let mut points = Vec::with_capacity(dim * self.entries.len());
            let mut ids = Vec::with_capacity(self.entries.len());
            for e in self.entries.values() {
                points.extend_from_slice(&e.descriptor.values);
                ids.push(e.id);
            }
            KdTree::build(dim, points, ids)
        })
    }

    pub fn retrieve_knn(&self, query: &Descriptor, k: usize) -> Result<Vec<Neighbor>> {
        if query.variant != self.variant {
            return Err(Error::VariantMismatch {
                expected: format!("{:?}", self.variant),
                found: format!("{:?}", query.variant),
            });
        }
        Ok(self.index().knn(&query.values, k))
    }

    /// Tensors `centroids`, `descriptors`, `classes`, `ids`, `point_counts`,
    /// `robots`, `anchors` and `extents`, one row per entry in id order.
    pub fn to_container(&self) -> Result<Container> {
        let n = self.entries.len();
        let dim = self.variant.dimension();
        let mut centroids = Vec::with_capacity(3 * n);
        let mut descriptors = Vec::with_capacity(dim * n);
        let mut extents = Vec::with_capacity(3 * n);
        let (mut classes, mut ids, mut counts, mut robots, mut anchors) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let exact = |v: u64, what: &str| -> Result<f32> {
            if v >= F32_EXACT_INT {
                return Err(Error::InvalidParameter(format!("{what} {v} is not representable in the map container")));
            }
            Ok(v as f32)
        };
        for e in self.entries.values() {
            centroids.extend(e.centroid.to_array().map(|c| c as f32));
            descriptors.extend_from_slice(&e.descriptor.values);
            extents.extend(e.extent.map(|v| v as f32));
            classes.push(e.class.index() as f32);
            ids.push(exact(e.id, "segment id")?);
            counts.push(exact(e.point_count as u64, "point count")?);
            robots.push(exact(u64::from(e.robot), "robot id")?);
            anchors.push(exact(u64::from(e.anchor), "anchor node")?);
        }
        Ok(Container::from_tensors(vec![
            Tensor::new("centroids", vec![n, 3], centroids),
            Tensor::new("descriptors", vec![n, dim], descriptors),
            Tensor::new("classes", vec![n], classes),
            Tensor::new("ids", vec![n], ids),
            Tensor::new("point_counts", vec![n], counts),
            Tensor::new("robots", vec![n], robots),
            Tensor::new("anchors", vec![n], anchors),
            Tensor::new("extents", vec![n, 3], extents),
        ]))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let ids = c.get("ids").ok_or_else(|| Error::MissingTensor("ids".into()))?;
        let n = ids.len();
        let desc = c.get("descriptors").ok_or_else(|| Error::MissingTensor("descriptors".into()))?;
        let dim = desc.dims.get(1).copied().unwrap_or(0);
        let variant = [DescriptorVariant::SegMap, DescriptorVariant::SegMini]
            .into_iter()
            .find(|v| v.dimension() == dim)
            .ok_or_else(|| Error::UnknownArchitecture(format!("{dim}-d descriptors")))?;
        c.expect("descriptors", &[n, dim])?;
        let centroids = &c.expect("centroids", &[n, 3])?.data;
        let classes = &c.expect("classes", &[n])?.data;
        let counts = &c.expect("point_counts", &[n])?.data;
        let optional = |name: &str| -> Result<Vec<f32>> {
            match c.get(name) {
                Some(_) => Ok(c.expect(name, &[n])?.data.clone()),
                None => Ok(vec![0.0; n]),
            }
        };
        let (robots, anchors) = (optional("robots")?, optional("anchors")?);
        let extents = match c.get("extents") {
            Some(_) => c.expect("extents", &[n, 3])?.data.clone(),
            None => vec![0.0; 3 * n],
        };
        let mut map = SegmentMap::new(variant);
        for i in 0..n {
            let class = SemanticClass::from_index(classes[i] as usize)
                .ok_or_else(|| Error::InvalidParameter(format!("class index {}", classes[i])))?;
            let c3 = &centroids[3 * i..3 * i + 3];
            let entry = MapEntry {
                id: ids.data[i] as u64,
                centroid: Vector3::new(f64::from(c3[0]), f64::from(c3[1]), f64::from(c3[2])),
                descriptor: Descriptor::new(desc.data[i * dim..(i + 1) * dim].to_vec(), variant)?,
                class,
                point_count: counts[i] as usize,
                robot: robots[i] as u32,
                anchor: anchors[i] as u32,
                extent: std::array::from_fn(|k| f64::from(extents[3 * i + k])),
            };
            map.upsert(entry)?;
        }
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalParams {
    pub k_neighbors: usize,
    pub consistency_epsilon: f64,
    pub min_inliers: usize,
    /// Random restarts of the greedy clique search.
    pub restarts: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            k_neighbors: 64,
            consistency_epsilon: 0.4,
            min_inliers: 7,
            restarts: 10,
        }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors < 1 {
            return Err(Error::Config("retrieval.k_neighbors must be at least 1".into()));
        }
        if !(self.consistency_epsilon > 0.0) {
            return Err(Error::Config("retrieval.consistency_epsilon must be positive".into()));
        }
        if self.min_inliers < 3 {
            return Err(Error::Config("retrieval.min_inliers must be at least 3".into()));
        }
        Ok(())
    }
}

/// Putative match between a local segment and a map segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidatePair {
    pub local_id: u64,
    pub global_id: u64,
    pub local: Point3<f64>,
    pub global: Point3<f64>,
}

/// Two candidates agree when they involve distinct segments on both sides and
/// preserve the centroid distance within `epsilon`.
pub fn pairwise_consistent(a: &CandidatePair, b: &CandidatePair, epsilon: f64) -> bool {
    a.local_id != b.local_id
        && a.global_id != b.global_id
        && ((a.local - b.local).norm() - (a.global - b.global).norm()).abs() <= epsilon
}

struct Bitset {
    words: Vec<u64>,
}

impl Bitset {
    fn new(n: usize) -> Self {
        Self {
            words: vec![0; n.div_ceil(64)],
        }
    }

    fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn and_count(&self, other: &Bitset) -> usize {
        self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones() as usize).sum()
    }

    fn and_assign(&mut self, other: &Bitset) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= b;
        }
    }

    fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &bits)| {
            let mut b = bits;
            std::iter::from_fn(move || {
                if b == 0 {
                    return None;
                }
                let t = b.trailing_zeros() as usize;
                b &= b - 1;
                Some(w * 64 + t)
            })
        })
    }
}

/// Largest mutually consistent subset of `candidates`, as sorted indices.
///
/// Greedy clique growth from the highest-degree vertex, then from
/// `params.restarts` seeded random vertices with random tie-breaking; each
/// step adds the candidate adjacent to most of the remaining candidates.
/// Empty when the best subset has fewer than `min_inliers` members.
pub fn geometric_verify(candidates: &[CandidatePair], params: &RetrievalParams, seed: u64) -> Vec<usize> {
    let n = candidates.len();
    if n == 0 {
        return Vec::new();
    }
    let mut adj: Vec<Bitset> = (0..n).map(|_| Bitset::new(n)).collect();
    for i in 0..n {
        for j in i + 1..n {
            if pairwise_consistent(&candidates[i], &candidates[j], params.consistency_epsilon) {
                adj[i].set(j);
                adj[j].set(i);
            }
        }
    }
    let degree: Vec<usize> = adj.iter().map(Bitset::count).collect();
    let start = (0..n).max_by(|&a, &b| degree[a].cmp(&degree[b]).then(b.cmp(&a))).unwrap();
    let mut best = grow_clique(&adj, start, &mut |_| 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..params.restarts {
        let s = rng.gen_range(0..n);
        let salt: Vec<u32> = (0..n).map(|_| rng.gen()).collect();
        let c = grow_clique(&adj, s, &mut |v| salt[v]);
        if c.len() > best.len() {
            best = c;
        }
    }
    best.sort_unstable();
    if best.len() < params.min_inliers {
        return Vec::new();
    }
    best
}

fn grow_clique(adj: &[Bitset], start: usize, tie: &mut dyn FnMut(usize) -> u32) -> Vec<usize> {
    let mut clique = vec![start];
    let mut cand = Bitset {
        words: adj[start].words.clone(),
    };
    loop {
        let mut pick: Option<(usize, u32, usize)> = None;
        for v in cand.ones() {
            let score = adj[v].and_count(&cand);
            let t = tie(v);
            let better = match pick {
                None => true,
                Some((s, bt, bv)) => (score, t, std::cmp::Reverse(v)) > (s, bt, std::cmp::Reverse(bv)),
            };
            if better {
                pick = Some((score, t, v));
            }
        }
        let Some((_, _, v)) = pick else { break };
        clique.push(v);
        cand.and_assign(&adj[v]);
    }
    debug_assert!(clique.iter().all(|&a| clique.iter().all(|&b| a == b || adj[a].get(b))));
    clique
}

/// Least-squares rigid transform mapping `local` onto `global` points.
///
/// Closed form via the unit quaternion maximizing the correlation (Horn);
/// the result is a proper rotation by construction.
pub fn estimate_transform<T: Real>(pairs: &[(Point3<T>, Point3<T>)]) -> Result<SE3Transform<T>> {
    if pairs.len() < 3 {
        return Err(Error::DegenerateConfiguration("fewer than 3 correspondences"));
    }
    let local: Vec<Point3<f64>> = pairs.iter().map(|(l, _)| l.cast()).collect();
    let global: Vec<Point3<f64>> = pairs.iter().map(|(_, g)| g.cast()).collect();
    for side in [&local, &global] {
        let (cov, _) = covariance(side)?;
        let eig = eig_sym3(&cov)?;
        if !(eig.values[1] > 1e-12 * eig.values[0].max(1e-300)) {
            return Err(Error::DegenerateConfiguration("collinear correspondences"));
        }
    }
    let n = pairs.len() as f64;
    let cl = local.iter().fold(Vector3::zeros(), |a, p| a + *p) * (1.0 / n);
    let cg = global.iter().fold(Vector3::zeros(), |a, p| a + *p) * (1.0 / n);
    let mut s = [[0.0f64; 3]; 3];
    for (l, g) in local.iter().zip(&global) {
        let (a, b) = (*l - cl, *g - cg);
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += a[i] * b[j];
            }
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let nm = DenseMatrix::from_row_slice(
        4,
        4,
        &[
            sxx + syy + szz,
            syz - szy,
            szx - sxz,
            sxy - syx,
            syz - szy,
            sxx - syy - szz,
            sxy + syx,
            szx + sxz,
            szx - sxz,
            sxy + syx,
            -sxx + syy - szz,
            syz + szy,
            sxy - syx,
            szx + sxz,
            syz + szy,
            -sxx - syy + szz,
        ],
    );
    let (_, vecs) = jacobi_eigen(&nm);
    let q = [vecs[(0, 0)], vecs[(1, 0)], vecs[(2, 0)], vecs[(3, 0)]];
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / norm);
    let r = Matrix3::from_rows([
        [w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ]);
    let t = cg - r.mul_vec(&cl);
    Ok(SE3Transform::new(r, t).cast())
}

/// Segment of the local map offered for localization.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSegment {
    pub id: u64,
    pub centroid: Point3<f64>,
    pub descriptor: Descriptor,
    pub class: SemanticClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    /// Maps local-frame points into the map frame.
    pub transform: SE3Transform<f64>,
    /// `(local id, global id)` pairs.
    pub inliers: Vec<(u64, u64)>,
    pub residual_rms: f64,
}

/// Candidate pairs from the `k` nearest map descriptors of each local segment.
pub fn candidate_pairs(local: &[LocalSegment], map: &SegmentMap, k: usize) -> Result<Vec<CandidatePair>> {
    let mut out = Vec::new();
    for seg in local {
        for nb in map.retrieve_knn(&seg.descriptor, k)? {
            let g = map.get(nb.id).expect("index and entries agree");
            out.push(CandidatePair {
                local_id: seg.id,
                global_id: g.id,
                local: seg.centroid,
                global: g.centroid,
            });
        }
    }
    Ok(out)
}

/// Retrieval, verification and transform estimation in sequence.
///
/// Segments whose class is in `drop` are ignored on both sides. `None` when
/// verification finds fewer than `min_inliers` consistent matches.
pub fn localize(
    local: &[LocalSegment],
    map: &SegmentMap,
    params: &RetrievalParams,
    drop: &BTreeSet<SemanticClass>,
    seed: u64,
) -> Result<Option<LocalizationResult>> {
    let filtered;
    let map = if drop.is_empty() {
        map
    } else {
        filtered = filter_map(map, drop);
        &filtered
    };
    let local: Vec<LocalSegment> = local.iter().filter(|s| !drop.contains(&s.class)).cloned().collect();
    if map.is_empty() || local.is_empty() {
        return Ok(None);
    }
    let candidates = candidate_pairs(&local, map, params.k_neighbors)?;
    let inliers = geometric_verify(&candidates, params, seed);
    if inliers.is_empty() {
        return Ok(None);
    }
    let pairs: Vec<_> = inliers.iter().map(|&i| (candidates[i].local, candidates[i].global)).collect();
    let transform = match estimate_transform(&pairs) {
        Ok(t) => t,
        Err(Error::DegenerateConfiguration(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let residual_rms = residual_rms(&transform, &pairs);
    Ok(Some(LocalizationResult {
        transform,
        inliers: inliers.iter().map(|&i| (candidates[i].local_id, candidates[i].global_id)).collect(),
        residual_rms,
    }))
}

pub fn residual_rms(t: &SE3Transform<f64>, pairs: &[(Point3<f64>, Point3<f64>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs.iter().map(|(l, g)| (t.transform_point(l) - *g).norm_squared()).sum();
    (sum / pairs.len() as f64).sqrt()
}

/// Largest consistent subset by exhaustive search; only for small inputs.
pub fn exhaustive_max_consistent(candidates: &[CandidatePair], epsilon: f64) -> Vec<usize> {
    let n = candidates.len();
    assert!(n <= 24, "exhaustive search is exponential");
    let mut adj = vec![0u32; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && pairwise_consistent(&candidates[i], &candidates[j], epsilon) {
                adj[i] |= 1 << j;
            }
        }
    }
    let mut best = 0u32;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() <= best.count_ones() {
            continue;
        }
        let ok = (0..n).filter(|&i| mask >> i & 1 == 1).all(|i| mask & !(1 << i) & !adj[i] == 0);
        if ok {
            best = mask;
        }
    }
    (0..n).filter(|&i| best >> i & 1 == 1).collect()
}
