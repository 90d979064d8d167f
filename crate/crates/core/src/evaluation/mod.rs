//! Ground-truth correspondences, retrieval curves, localization error CDFs
//! and map compression accounting.

pub mod hull;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::geometry::{centroid, Point3, PointCloud, SE3Transform};
use crate::localization::SegmentMap;
use crate::scalar::Real;

pub use hull::{hull_overlap, ConvexHull};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundTruthParams {
    pub overlap_p: f64,
    pub max_centroid_distance: f64,
}

impl Default for GroundTruthParams {
    fn default() -> Self {
        Self {
            overlap_p: 0.3,
            max_centroid_distance: 3.0,
        }
    }
}

impl GroundTruthParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.overlap_p > 0.0 && self.overlap_p <= 1.0) {
            return Err(Error::Config(format!("overlap_p must be in (0, 1], got {}", self.overlap_p)));
        }
        if !(self.max_centroid_distance.is_finite() && self.max_centroid_distance >= 0.0) {
            return Err(Error::Config(format!(
                "max_centroid_distance must be finite and non-negative, got {}",
                self.max_centroid_distance
            )));
        }
        Ok(())
    }
}

/// A segment cloud expressed in the map frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GtSegment<T> {
    pub id: u64,
    pub cloud: PointCloud<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub id_a: u64,
    pub id_b: u64,
    pub overlap: f64,
}

/// All pairs within the centroid gate whose hull overlap reaches `overlap_p`.
/// Segments with empty clouds or flat hulls never match.
pub fn generate_gt<T: Real>(segments: &[GtSegment<T>], params: &GroundTruthParams) -> Result<Vec<Correspondence>> {
    params.validate()?;
    let prepared: Vec<Option<(Point3<f64>, ConvexHull)>> = segments
        .par_iter()
        .map(|s| {
            let c = centroid(&s.cloud).ok()?.cast();
            let h = ConvexHull::new(&s.cloud).ok()?;
            Some((c, h))
        })
        .collect();
    let gate = params.max_centroid_distance;
    let mut pairs: Vec<Correspondence> = (0..segments.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let prepared = &prepared;
            (i + 1..segments.len()).filter_map(move |j| {
                let (ci, hi) = prepared[i].as_ref()?;
                let (cj, hj) = prepared[j].as_ref()?;
                if (*ci - *cj).norm() > gate {
                    return None;
                }
                let overlap = hull::overlap_of(hi, hj);
                (overlap >= params.overlap_p).then(|| {
                    let (a, b) = (segments[i].id, segments[j].id);
                    Correspondence {
                        id_a: a.min(b),
                        id_b: a.max(b),
                        overlap,
                    }
                })
            })
        })
        .collect();
    pairs.sort_by(|x, y| (x.id_a, x.id_b).cmp(&(y.id_a, y.id_b)));
    Ok(pairs)
}

pub fn correspondences_csv(pairs: &[Correspondence]) -> String {
    let mut s = String::from("id_a,id_b,overlap\n");
    for p in pairs {
        let _ = writeln!(s, "{},{},{}", p.id_a, p.id_b, p.overlap);
    }
    s
}

pub const NEGATIVES_PER_POSITIVE: usize = 1000;
pub const NEGATIVE_MIN_DISTANCE: f64 = 20.0;

/// For every positive `(a, b)`, draws `per_positive` partners of `a` whose
/// centroid lies more than `min_distance` away, uniformly with replacement.
pub fn sample_negatives(
    centroids: &[(u64, Point3<f64>)],
    positives: &[(u64, u64)],
    per_positive: usize,
    min_distance: f64,
    seed: u64,
) -> Result<Vec<(u64, u64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(positives.len() * per_positive);
    for &(a, _) in positives {
        let ca = centroids
            .iter()
            .find(|(id, _)| *id == a)
            .map(|(_, c)| *c)
            .ok_or_else(|| Error::InvalidParameter(format!("positive references unknown segment {a}")))?;
        let far: Vec<u64> = centroids.iter().filter(|(_, c)| (*c - ca).norm() > min_distance).map(|(id, _)| *id).collect();
        if far.is_empty() {
            return Err(Error::InvalidParameter(format!("no segment lies more than {min_distance} m from segment {a}")));
        }
        out.extend((0..per_positive).map(|_| (a, far[rng.gen_range(0..far.len())])));
    }
    Ok(out)
}

pub fn descriptor_distance(a: &Descriptor, b: &Descriptor) -> f64 {
    a.squared_distance(b).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Pairs with distance at most this value are called matches.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        s
    }
}

/// Sweeps the match threshold over every observed distance. The curve
/// starts at (0, 0) with a threshold of negative infinity.
pub fn build_roc(positives: &[f64], negatives: &[f64]) -> Result<RocCurve> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidParameter("ROC needs at least one positive and one negative".into()));
    }
    if positives.iter().chain(negatives).any(|d| !d.is_finite()) {
        return Err(Error::InvalidParameter("ROC distances must be finite".into()));
    }
    let mut pos = positives.to_vec();
    let mut neg = negatives.to_vec();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut ip, mut ineg) = (0, 0);
    for t in thresholds {
        while ip < pos.len() && pos[ip] <= t {
            ip += 1;
        }
        while ineg < neg.len() && neg[ineg] <= t {
            ineg += 1;
        }
        let p = RocPoint {
            threshold: t,
            fpr: ineg as f64 / nn,
            tpr: ip as f64 / np,
        };
        let last = points.last().unwrap();
        if (last.fpr, last.tpr) != (p.fpr, p.tpr) {
            points.push(p);
        }
    }
    let auc = points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) * 0.5).sum::<f64>();
    Ok(RocCurve {
        points,
        auc: auc.clamp(0.0, 1.0),
    })
}

pub const COMPLETENESS_BINS: usize = 10;

/// Bin of `points / final_points` among ten equal bins; full segments land
/// in the last bin.
pub fn completeness_bin(points: usize, final_points: usize) -> usize {
    if final_points == 0 {
        return COMPLETENESS_BINS - 1;
    }
    let frac = (points as f64 / final_points as f64).clamp(0.0, 1.0);
    ((frac * COMPLETENESS_BINS as f64).floor() as usize).min(COMPLETENESS_BINS - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnQuery {
    pub target_id: u64,
    pub descriptor: Descriptor,
    pub points: usize,
    pub final_points: usize,
}

/// 1-based position of `target` when the map is sorted by `(distance, id)`.
pub fn target_rank(map: &SegmentMap, query: &Descriptor, target: u64) -> Option<usize> {
    let t = map.get(target)?;
    let key = (query.squared_distance(&t.descriptor), target);
    let better = map
        .entries()
        .filter(|e| {
            let d = query.squared_distance(&e.descriptor);
            d.total_cmp(&key.0).then(e.id.cmp(&key.1)).is_lt()
        })
        .count();
    Some(better + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub median_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnCurve {
    pub bins: Vec<KnnBin>,
    pub skipped: usize,
}

impl KnnCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("completeness_lower,completeness_upper,count,median_k\n");
        for b in &self.bins {
            let m = b.median_k.map(|m| m.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", b.lower, b.upper, b.count, m);
        }
        s
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Median number of neighbours needed to reach the true target, per
/// completeness bin. Queries whose target is missing are skipped and counted.
pub fn knn_needed_curve(queries: &[KnnQuery], map: &SegmentMap) -> KnnCurve {
    let ranks: Vec<Option<(usize, usize)>> = queries
        .par_iter()
        .map(|q| target_rank(map, &q.descriptor, q.target_id).map(|r| (completeness_bin(q.points, q.final_points), r)))
        .collect();
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); COMPLETENESS_BINS];
    let mut skipped = 0;
    for r in ranks {
        match r {
            Some((b, k)) => per_bin[b].push(k as f64),
            None => skipped += 1,
        }
    }
    let bins = per_bin
        .into_iter()
        .enumerate()
        .map(|(i, mut ks)| KnnBin {
            lower: i as f64 / COMPLETENESS_BINS as f64,
            upper: (i + 1) as f64 / COMPLETENESS_BINS as f64,
            count: ks.len(),
            median_k: median(&mut ks),
        })
        .collect();
    KnnCurve { bins, skipped }
}

pub const POINT_BYTES: f64 = 12.0;
pub const LINKAGE_BITS: f64 = 288.0;

/// Bytes sent for one descriptor of dimension `dim`.
pub fn descriptor_wire_bytes(dim: usize) -> f64 {
    4.0 * dim as f64 + LINKAGE_BITS / 8.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub segments: usize,
    pub raw_bytes: f64,
    pub descriptor_bytes: f64,
    pub ratio: f64,
}

impl CompressionStats {
    pub fn from_totals(segments: usize, raw_bytes: f64, descriptor_bytes: f64) -> Self {
        let ratio = if descriptor_bytes > 0.0 { raw_bytes / descriptor_bytes } else { 0.0 };
        Self {
            segments,
            raw_bytes,
            descriptor_bytes,
            ratio,
        }
    }

    pub fn from_counts(segments: usize, points: f64, dim: usize) -> Self {
        Self::from_totals(segments, points * POINT_BYTES, segments as f64 * descriptor_wire_bytes(dim))
    }

    /// Same raw data with `dropped` segments left out of the descriptor map.
    pub fn without_segments(&self, dropped: usize) -> Self {
        let kept = self.segments.saturating_sub(dropped);
        let per_segment = if self.segments > 0 { self.descriptor_bytes / self.segments as f64 } else { 0.0 };
        Self::from_totals(kept, self.raw_bytes, per_segment * kept as f64)
    }
}

/// Raw bytes use the entries' point counts unless `raw_points_per_segment`
/// is given.
pub fn compression_stats(map: &SegmentMap, raw_points_per_segment: Option<f64>) -> CompressionStats {
    let points = match raw_points_per_segment {
        Some(p) => p * map.len() as f64,
        None => map.entries().map(|e| e.point_count as f64).sum(),
    };
    CompressionStats::from_counts(map.len(), points, map.variant().dimension())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub error: f64,
    pub fraction: f64,
}

/// Position-error CDF over all queries; failed queries (`None`) only count
/// in the denominator, so the curve saturates below 1.
pub fn localization_error_cdf(results: &[Option<SE3Transform<f64>>], gt: &[SE3Transform<f64>]) -> Result<Vec<CdfPoint>> {
    if results.len() != gt.len() {
        return Err(Error::InvalidParameter(format!(
            "{} localization results but {} ground-truth poses",
            results.len(),
            gt.len()
        )));
    }
    let mut errors: Vec<f64> = results
        .iter()
        .zip(gt)
        .filter_map(|(r, g)| r.as_ref().map(|r| (r.translation - g.translation).norm()))
        .collect();
    errors.sort_by(f64::total_cmp);
    let n = results.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::with_capacity(errors.len());
    for (i, e) in errors.into_iter().enumerate() {
        let p = CdfPoint {
            error: e,
            fraction: (i + 1) as f64 / n,
        };
        match out.last_mut() {
            Some(last) if last.error == e => *last = p,
            _ => out.push(p),
        }
    }
    Ok(out)
}

pub fn cdf_csv(points: &[CdfPoint]) -> String {
    let mut s = String::from("error_m,fraction\n");
    for p in points {
        let _ = writeln!(s, "{},{}", p.error, p.fraction);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::DescriptorVariant;
    use crate::linalg::Vector3;
    use crate::localization::MapEntry;
    use crate::semantics::SemanticClass;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn box_cloud(center: Vector3<f64>, half: Vector3<f64>, n: usize, rng: &mut ChaCha8Rng) -> PointCloud<f64> {
        let mut pts: Vec<Vector3<f64>> = (0..8)
            .map(|i| {
                center
                    + Vector3::new(
                        if i & 1 == 0 { -half.x } else { half.x },
                        if i & 2 == 0 { -half.y } else { half.y },
                        if i & 4 == 0 { -half.z } else { half.z },
                    )
            })
            .collect();
        pts.extend((0..n).map(|_| {
            center + Vector3::new(rng.gen_range(-half.x..half.x), rng.gen_range(-half.y..half.y), rng.gen_range(-half.z..half.z))
        }));
        PointCloud::new(pts)
    }

    fn box_iou(c1: Vector3<f64>, h1: Vector3<f64>, c2: Vector3<f64>, h2: Vector3<f64>) -> f64 {
        let mut inter = 1.0;
        for k in 0..3 {
            let lo = (c1[k] - h1[k]).max(c2[k] - h2[k]);
            let hi = (c1[k] + h1[k]).min(c2[k] + h2[k]);
            inter *= (hi - lo).max(0.0);
        }
        let v1 = 8.0 * h1.x * h1.y * h1.z;
        let v2 = 8.0 * h2.x * h2.y * h2.z;
        inter / (v1 + v2 - inter)
    }

    #[test]
    fn gt_same_segment_twice_and_distance_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = box_cloud(Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0), 20, &mut rng);
        let far = PointCloud::new(c.iter().map(|p| *p + Vector3::new(10.0, 0.0, 0.0)).collect());
        let segs = vec![
            GtSegment { id: 4, cloud: c.clone() },
            GtSegment { id: 2, cloud: c },
            GtSegment { id: 9, cloud: far },
        ];
        let pairs = generate_gt(&segs, &GroundTruthParams::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].id_a, pairs[0].id_b), (2, 4));
        assert_eq!(pairs[0].overlap, 1.0);
        assert_eq!(correspondences_csv(&pairs), "id_a,id_b,overlap\n2,4,1\n");
    }

    #[test]
    fn gt_matches_all_pairs_box_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut segs = Vec::new();
        let mut boxes = Vec::new();
        for id in 0..40u64 {
            let c = Vector3::new(rng.gen_range(0.0..12.0), rng.gen_range(0.0..6.0), 0.0);
            let h = Vector3::new(rng.gen_range(0.4..1.5), rng.gen_range(0.4..1.5), rng.gen_range(0.4..1.5));
            segs.push(GtSegment {
                id,
                cloud: box_cloud(c, h, 10, &mut rng),
            });
            boxes.push((c, h));
        }
        let params = GroundTruthParams::default();
        let got = generate_gt(&segs, &params).unwrap();
        let mut want = Vec::new();
        for i in 0..40 {
            for j in i + 1..40 {
                let ((ci, hi), (cj, hj)) = (boxes[i], boxes[j]);
                let iou = box_iou(ci, hi, cj, hj);
                if (ci - cj).norm() <= 3.0 && iou >= 0.3 {
                    want.push((i as u64, j as u64, iou));
                }
            }
        }
        assert!(!want.is_empty());
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert_eq!((g.id_a, g.id_b), (w.0, w.1));
            assert!((g.overlap - w.2).abs() < 1e-9);
        }
    }

    #[test]
    fn gt_params_validated() {
        let bad = GroundTruthParams {
            overlap_p: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<GroundTruthParams>(r#"{"overlap":0.3}"#).is_err());
    }

    #[test]
    fn negatives_are_far_and_counted() {
        let centroids: Vec<(u64, Point3<f64>)> = (0..50).map(|i| (i, Vector3::new(i as f64 * 2.0, 0.0, 0.0))).collect();
        let pos = vec![(0, 1), (25, 26)];
        let neg = sample_negatives(&centroids, &pos, NEGATIVES_PER_POSITIVE, NEGATIVE_MIN_DISTANCE, 3).unwrap();
        assert_eq!(neg.len(), 2 * NEGATIVES_PER_POSITIVE);
        for &(a, b) in &neg {
            assert!((centroids[a as usize].1 - centroids[b as usize].1).norm() > 20.0);
        }
        assert_eq!(neg, sample_negatives(&centroids, &pos, NEGATIVES_PER_POSITIVE, NEGATIVE_MIN_DISTANCE, 3).unwrap());
        assert!(sample_negatives(&centroids[..5], &[(0, 1)], 10, 20.0, 0).is_err());
    }

    #[test]
    fn roc_separable_and_hand_enumerated() {
        let r = build_roc(&[0.1, 0.2], &[0.5, 0.9]).unwrap();
        assert_eq!(r.auc, 1.0);

        // Thresholds 1..6 over pos {1, 3, 4} and neg {2, 5, 6}.
        let r = build_roc(&[3.0, 1.0, 4.0], &[5.0, 2.0, 6.0]).unwrap();
        let got: Vec<(f64, f64)> = r.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        let third = 1.0 / 3.0;
        let want = vec![(0.0, 0.0), (0.0, third), (third, third), (third, 2.0 * third), (third, 1.0), (2.0 * third, 1.0), (1.0, 1.0)];
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g.0 - w.0).abs() < 1e-15 && (g.1 - w.1).abs() < 1e-15);
        }
        assert!((r.auc - 7.0 / 9.0).abs() < 1e-12);
        assert!(build_roc(&[], &[1.0]).is_err());
    }

    #[test]
    fn roc_of_identical_distributions_is_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = Normal::new(1.0, 0.3).unwrap();
        let pos: Vec<f64> = (0..5000).map(|_| n.sample(&mut rng)).collect();
        let neg: Vec<f64> = (0..5000).map(|_| n.sample(&mut rng)).collect();
        assert!((build_roc(&pos, &neg).unwrap().auc - 0.5).abs() < 0.02);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn roc_invariant_under_monotone_maps(pos in prop::collection::vec(0.0f64..10.0, 1..40), neg in prop::collection::vec(0.0f64..10.0, 1..40)) {
            let a = build_roc(&pos, &neg).unwrap();
            let f = |v: &f64| (v * 0.7).exp() + 3.0;
            let b = build_roc(&pos.iter().map(f).collect::<Vec<_>>(), &neg.iter().map(f).collect::<Vec<_>>()).unwrap();
            prop_assert!((a.auc - b.auc).abs() < 1e-12);
            prop_assert_eq!(a.points.len(), b.points.len());
            for w in a.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, n: u64) -> SegmentMap {
        let mut m = SegmentMap::new(DescriptorVariant::SegMini);
        for id in 0..n {
            // Small integer values make distance ties common.
            let d = Descriptor::new((0..32).map(|_| rng.gen_range(0..3) as f32).collect(), DescriptorVariant::SegMini).unwrap();
            m.upsert(MapEntry::new(id * 3, Vector3::zeros(), d, SemanticClass::Other, 10)).unwrap();
        }
        m
    }

    #[test]
    fn ranks_match_sorting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = random_map(&mut rng, 60);
        for _ in 0..30 {
            let q = Descriptor::new((0..32).map(|_| rng.gen_range(0..3) as f32).collect(), DescriptorVariant::SegMini).unwrap();
            let mut sorted: Vec<(f64, u64)> = map.entries().map(|e| (q.squared_distance(&e.descriptor), e.id)).collect();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (pos, &(_, id)) in sorted.iter().enumerate() {
                assert_eq!(target_rank(&map, &q, id), Some(pos + 1));
            }
        }
    }

    #[test]
    fn knn_curve_bins_and_skips() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut map = random_map(&mut rng, 20);
        let exact = |id: u64, pts: usize| KnnQuery {
            target_id: id,
            descriptor: map.get(id).unwrap().descriptor.clone(),
            points: pts,
            final_points: 100,
        };
        let queries = vec![exact(0, 100), exact(3, 95), exact(6, 5), exact(9, 50)];
        map.remove(9);
        let c = knn_needed_curve(&queries, &map);
        assert_eq!(c.skipped, 1);
        assert_eq!(c.bins.len(), 10);
        assert_eq!(c.bins[9].count, 2);
        assert_eq!(c.bins[9].median_k, Some(1.0));
        assert_eq!(c.bins[0].median_k, Some(1.0));
        assert_eq!(c.bins[5].median_k, None);
        assert_eq!(completeness_bin(10, 100), 1);
        assert_eq!(completeness_bin(120, 100), 9);
        assert!(c.to_csv().starts_with("completeness_lower,completeness_upper,count,median_k\n0,0.1,1,1\n"));
    }

    #[test]
    fn compression_hand_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = SegmentMap::new(DescriptorVariant::SegMap);
        let d = Descriptor::new((0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), DescriptorVariant::SegMap).unwrap();
        m.upsert(MapEntry::new(1, Vector3::zeros(), d, SemanticClass::Other, 1)).unwrap();
        let s = compression_stats(&m, None);
        assert_eq!(s.raw_bytes, 12.0);
        assert_eq!(s.descriptor_bytes, 4.0 * 64.0 + 36.0);
        assert_eq!(s.ratio, 12.0 / 292.0);
        let doubled = compression_stats(&m, Some(2.0));
        assert_eq!(doubled.ratio, 2.0 * s.ratio);
    }

    #[test]
    fn compression_paper_figures() {
        let s = CompressionStats::from_totals(1341, 16.8e6, 386.2e3);
        assert!((s.ratio - 43.5).abs() < 0.1);
        let dropped = s.without_segments(284);
        assert_eq!(dropped.segments, 1057);
        assert!((dropped.ratio - 55.2).abs() < 0.1);
    }

    #[test]
    fn cdf_cases() {
        let gt: Vec<SE3Transform<f64>> = (0..4).map(|i| SE3Transform::from_translation(Vector3::new(i as f64, 0.0, 0.0))).collect();
        let exact: Vec<_> = gt.iter().map(|g| Some(*g)).collect();
        assert_eq!(localization_error_cdf(&exact, &gt).unwrap(), vec![CdfPoint { error: 0.0, fraction: 1.0 }]);

        let half = vec![Some(gt[0]), None, Some(gt[2]), None];
        let c = localization_error_cdf(&half, &gt).unwrap();
        assert_eq!(c.last().unwrap().fraction, 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let errs: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..2.0)).collect();
        let res: Vec<_> = gt.iter().zip(&errs).map(|(g, e)| Some(SE3Transform::from_translation(g.translation + Vector3::new(0.0, *e, 0.0)))).collect();
        let c = localization_error_cdf(&res, &gt).unwrap();
        let mut sorted = errs.clone();
        sorted.sort_by(f64::total_cmp);
        for (i, p) in c.iter().enumerate() {
            assert!((p.error - sorted[i]).abs() < 1e-12);
            assert_eq!(p.fraction, (i + 1) as f64 / 4.0);
        }
        assert!(localization_error_cdf(&res[..2], &gt).is_err());
    }
}
