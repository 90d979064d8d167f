//! Batch evaluation modes producing CSV curves and JSON summaries.
//!
//! Every mode reads its files from `config.inputs`; when they are absent and
//! `config.synthetic` is set, inputs are generated from the synthetic world
//! instead.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::slam::{run_slam, LocalizationLog};
use super::{build_map, describe_cloud, PipelineConfig, PipelineWeights, Scenario, SyntheticConfig, SyntheticWorld};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::evaluation::{
    build_roc, cdf_csv, compression_stats, correspondences_csv, descriptor_distance, generate_gt, knn_needed_curve,
    localization_error_cdf, sample_negatives, GtSegment, KnnQuery,
};
use crate::geometry::{Point3, PointCloud, SE3Transform};
use crate::io::{read_scan, write_atomic, write_json, write_segment, ScanFormat};
use crate::localization::SegmentMap;
use crate::nn::{Architecture, Container, NetworkWeights};
use crate::reconstruction::{correspondence_ratio, decode};
use crate::semantics::SemanticClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Roc,
    KnnCurve,
    ReconTable,
    Compression,
    LocCdf,
    GtGen,
}

impl EvalMode {
    pub const ALL: [EvalMode; 6] = [Self::Roc, Self::KnnCurve, Self::ReconTable, Self::Compression, Self::LocCdf, Self::GtGen];

    pub fn name(self) -> &'static str {
        match self {
            Self::Roc => "roc",
            Self::KnnCurve => "knn-curve",
            Self::ReconTable => "recon-table",
            Self::Compression => "compression",
            Self::LocCdf => "loc-cdf",
            Self::GtGen => "gt-gen",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown evaluation mode `{s}`")))
    }
}

fn missing(what: &str) -> Error {
    Error::Config(format!("{what} (or a `synthetic` section) is required"))
}

/// Segment cloud with its id and, when known, its class.
#[derive(Debug, Clone)]
struct LabeledSegment {
    id: u64,
    class: SemanticClass,
    cloud: PointCloud<f64>,
}

/// Reads every file in `dir` as one segment whose id is the file stem.
pub fn read_segments(dir: &Path) -> Result<Vec<(u64, PointCloud<f64>)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let id = p
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::Config(format!("segment file name {} is not a numeric id", p.display())))?;
        out.push((id, read_scan(&p, ScanFormat::from_path(&p))?));
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

/// Map with the known classes of the segments.
fn labeled_map(segments: &[LabeledSegment], weights: &PipelineWeights) -> Result<SegmentMap> {
    let clouds: Vec<(u64, PointCloud<f64>)> = segments.iter().map(|s| (s.id, s.cloud.clone())).collect();
    let mut map = build_map(&clouds, weights)?;
    for s in segments {
        if let Some(mut e) = map.get(s.id).cloned() {
            e.class = s.class;
            map.upsert(e)?;
        }
    }
    Ok(map)
}

fn synthetic_world(config: &PipelineConfig) -> Result<SyntheticWorld> {
    let cfg = config.synthetic.clone().unwrap_or_default();
    SyntheticWorld::generate(&cfg, config.seed)
}

fn synthetic_pairs(config: &PipelineConfig) -> Result<Vec<LabeledSegment>> {
    let world = synthetic_world(config)?;
    Ok(world
        .paired_segments(config.evaluation.segment_density, config.seed)
        .into_iter()
        .map(|(id, class, cloud)| LabeledSegment { id, class, cloud })
        .collect())
}

fn file_segments(dir: &Path) -> Result<Vec<LabeledSegment>> {
    Ok(read_segments(dir)?
        .into_iter()
        .map(|(id, cloud)| LabeledSegment {
            id,
            class: SemanticClass::Other,
            cloud,
        })
        .collect())
}

fn read_correspondences(path: &Path) -> Result<Vec<(u64, u64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |k: usize| {
            fields.get(k).and_then(|f| f.parse::<u64>().ok()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected `id_a,id_b,overlap`".into(),
            })
        };
        out.push((parse(0)?, parse(1)?));
    }
    Ok(out)
}

fn roc(config: &PipelineConfig, weights: &PipelineWeights, out: &Path) -> Result<Value> {
    let mode = EvalMode::Roc;
    let (map, positives) = match (&config.inputs.map, &config.inputs.correspondences) {
        (Some(m), Some(c)) => (SegmentMap::load(m)?, read_correspondences(c)?),
        _ if config.synthetic.is_some() => {
            let segs = synthetic_pairs(config)?;
            let map = labeled_map(&segs, weights)?;
            let pos = segs
                .iter()
                .filter(|s| s.id % 2 == 0 && map.get(s.id).is_some() && map.get(s.id + 1).is_some())
                .map(|s| (s.id, s.id + 1))
                .collect();
            (map, pos)
        }
        _ => return Err(missing("inputs.map and inputs.correspondences")),
    };
    let get = |id: u64| map.get(id).ok_or_else(|| Error::Config(format!("segment {id} is not in the map")));
    let mut pos_d = Vec::with_capacity(positives.len());
    for (a, b) in &positives {
        pos_d.push(descriptor_distance(&get(*a)?.descriptor, &get(*b)?.descriptor));
    }
    let centroids: Vec<(u64, Point3<f64>)> = map.entries().map(|e| (e.id, e.centroid)).collect();
    let ev = &config.evaluation;
    let negatives = sample_negatives(&centroids, &positives, ev.negatives_per_positive, ev.negative_min_distance, config.seed)?;
    let mut neg_d = Vec::with_capacity(negatives.len());
    for (a, b) in &negatives {
        neg_d.push(descriptor_distance(&get(*a)?.descriptor, &get(*b)?.descriptor));
    }
    let curve = build_roc(&pos_d, &neg_d)?;
    write_atomic(out.join("roc.csv"), curve.to_csv().as_bytes())?;
    Ok(json!({
        "mode": mode.name(),
        "auc": curve.auc,
        "positives": pos_d.len(),
        "negatives": neg_d.len(),
        "descriptor": weights.descriptor.architecture_id(),
    }))
}

/// Prefixes of the cloud ordered along a random horizontal direction, as a
/// segment is revealed while driving past it.
fn partial_views(cloud: &PointCloud<f64>, fractions: &[f64], rng: &mut ChaCha8Rng) -> Vec<PointCloud<f64>> {
    let a = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (a.cos(), a.sin());
    let mut pts = cloud.points.clone();
    pts.sort_by(|p, q| (p.x * dx + p.y * dy).total_cmp(&(q.x * dx + q.y * dy)));
    fractions
        .iter()
        .map(|f| PointCloud::new(pts[..((f * pts.len() as f64).ceil() as usize).min(pts.len())].to_vec()))
        .collect()
}

fn read_queries(path: &Path, map: &SegmentMap) -> Result<Vec<KnnQuery>> {
    let c = Container::load(path)?;
    let dim = map.variant().dimension();
    let ids = c.get("target_ids").ok_or_else(|| Error::MissingTensor("target_ids".into()))?;
    let n = ids.len();
    let desc = c.expect("descriptors", &[n, dim])?;
    let points = c.expect("points", &[n])?;
    let finals = c.expect("final_points", &[n])?;
    (0..n)
        .map(|i| {
            Ok(KnnQuery {
                target_id: ids.data[i] as u64,
                descriptor: Descriptor::new(desc.data[i * dim..(i + 1) * dim].to_vec(), map.variant())?,
                points: points.data[i] as usize,
                final_points: finals.data[i] as usize,
            })
        })
        .collect()
}

fn knn_curve(config: &PipelineConfig, weights: &PipelineWeights, out: &Path) -> Result<Value> {
    let mode = EvalMode::KnnCurve;
    let (map, queries) = match (&config.inputs.map, &config.inputs.queries) {
        (Some(m), Some(q)) => {
            let map = SegmentMap::load(m)?;
            let queries = read_queries(q, &map)?;
            (map, queries)
        }
        _ if config.synthetic.is_some() => {
            let segs = synthetic_pairs(config)?;
            let (targets, sources): (Vec<LabeledSegment>, Vec<LabeledSegment>) = segs.into_iter().partition(|s| s.id % 2 == 0);
            let map = labeled_map(&targets, weights)?;
            let fractions: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6b6e_6e00);
            let mut partial = Vec::new();
            for s in &sources {
                for v in partial_views(&s.cloud, &fractions, &mut rng) {
                    partial.push((s.id - 1, v, s.cloud.len()));
                }
            }
            let queries: Vec<Option<KnnQuery>> = partial
                .par_iter()
                .map(|(target, cloud, full)| {
                    Ok(describe_cloud(cloud, weights)?.map(|d| KnnQuery {
                        target_id: *target,
                        descriptor: d.descriptor,
                        points: cloud.len(),
                        final_points: *full,
                    }))
                })
                .collect::<Result<_>>()?;
            (map, queries.into_iter().flatten().collect())
        }
        _ => return Err(missing("inputs.map and inputs.queries")),
    };
    let curve = knn_needed_curve(&queries, &map);
    write_atomic(out.join("knn_curve.csv"), curve.to_csv().as_bytes())?;
    Ok(json!({
        "mode": mode.name(),
        "queries": queries.len(),
        "map_size": map.len(),
        "skipped": curve.skipped,
        "bins": curve.bins,
    }))
}

fn recon_table(config: &PipelineConfig, weights: &PipelineWeights, out: &Path) -> Result<Value> {
    let mode = EvalMode::ReconTable;
    let segs = match &config.inputs.segments_dir {
        Some(d) => file_segments(d)?,
        None if config.synthetic.is_some() => synthetic_pairs(config)?.into_iter().filter(|s| s.id % 2 == 0).collect(),
        None => return Err(missing("inputs.segments_dir")),
    };
    let decoder = match &weights.decoder {
        Some(w) => w.clone(),
        None => {
            log::warn!("{mode}: no decoder weights configured; using seeded random decoder weights");
            NetworkWeights::random(Architecture::Decoder, config.seed)
        }
    };
    let threshold = config.evaluation.reconstruction_threshold;
    let rows: Vec<Option<(u64, usize, usize, f64)>> = segs
        .par_iter()
        .map(|s| {
            let Some(d) = describe_cloud(&s.cloud, weights)? else { return Ok(None) };
            let grid = decode(&d.descriptor, &decoder, d.input.voxel_sides)?;
            let ratio = match correspondence_ratio(&d.input, &grid, threshold) {
                Ok(r) => r,
                Err(Error::EmptyOriginal) => return Ok(None),
                Err(e) => return Err(e),
            };
            Ok(Some((s.id, s.cloud.len(), d.input.occupied_count(), ratio)))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<_> = rows.into_iter().flatten().collect();
    let mut csv = String::from("id,points,occupied_voxels,correspondence_ratio\n");
    for (id, pts, occ, r) in &rows {
        csv.push_str(&format!("{id},{pts},{occ},{r}\n"));
    }
    write_atomic(out.join("recon_table.csv"), csv.as_bytes())?;
    let mean = if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r.3).sum::<f64>() / rows.len() as f64 };
    Ok(json!({
        "mode": mode.name(),
        "segments": rows.len(),
        "skipped": segs.len() - rows.len(),
        "threshold": threshold,
        "mean_correspondence_ratio": mean,
        "descriptor": weights.descriptor.architecture_id(),
    }))
}

fn compression(config: &PipelineConfig) -> Result<Value> {
    let mode = EvalMode::Compression;
    let path = config.inputs.map.as_ref().ok_or_else(|| Error::Config("inputs.map is required".into()))?;
    let map = SegmentMap::load(path)?;
    let stats = compression_stats(&map, None);
    let vehicles = map.entries().filter(|e| e.class == SemanticClass::Vehicle).count();
    let without = stats.without_segments(vehicles);
    Ok(json!({
        "mode": mode.name(),
        "segments": stats.segments,
        "raw_bytes": stats.raw_bytes,
        "descriptor_bytes": stats.descriptor_bytes,
        "ratio": stats.ratio,
        "vehicle_segments": vehicles,
        "ratio_without_vehicles": without.ratio,
    }))
}

fn loc_cdf(config: &PipelineConfig, out: &Path) -> Result<Value> {
    let mode = EvalMode::LocCdf;
    let log: LocalizationLog = match &config.inputs.localizations {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None if config.synthetic.is_some() => run_slam(config)?.localizations,
        None => return Err(missing("inputs.localizations")),
    };
    let (results, gt): (Vec<Option<SE3Transform<f64>>>, Vec<SE3Transform<f64>>) = log
        .attempts
        .iter()
        .filter(|a| a.robot != a.target_robot)
        .filter_map(|a| a.ground_truth.map(|g| (a.estimate, g)))
        .unzip();
    let cdf = localization_error_cdf(&results, &gt)?;
    write_atomic(out.join("loc_cdf.csv"), cdf_csv(&cdf).as_bytes())?;
    Ok(json!({
        "mode": mode.name(),
        "queries": results.len(),
        "localized": results.iter().filter(|r| r.is_some()).count(),
        "final_fraction": cdf.last().map_or(0.0, |p| p.fraction),
    }))
}

fn gt_gen(config: &PipelineConfig, out: &Path) -> Result<Value> {
    let mode = EvalMode::GtGen;
    let segs = match &config.inputs.segments_dir {
        Some(d) => file_segments(d)?,
        None if config.synthetic.is_some() => {
            let segs = synthetic_pairs(config)?;
            for s in &segs {
                write_segment(out.join("segments").join(format!("{}.xyz", s.id)), &s.cloud.points)?;
            }
            segs
        }
        None => return Err(missing("inputs.segments_dir")),
    };
    let gt: Vec<GtSegment<f64>> = segs.iter().map(|s| GtSegment { id: s.id, cloud: s.cloud.clone() }).collect();
    let pairs = generate_gt(&gt, &config.evaluation.ground_truth)?;
    write_atomic(out.join("correspondences.csv"), correspondences_csv(&pairs).as_bytes())?;
    Ok(json!({
        "mode": mode.name(),
        "segments": segs.len(),
        "correspondences": pairs.len(),
        "overlap_p": config.evaluation.ground_truth.overlap_p,
    }))
}

/// Runs one evaluation mode, writing its curve or table plus `<mode>.json`
/// into `out`, and returns the JSON summary.
pub fn run_eval(config: &PipelineConfig, mode: EvalMode, out: impl AsRef<Path>) -> Result<Value> {
    config.validate()?;
    let out = out.as_ref();
    let summary = match mode {
        EvalMode::Compression => compression(config),
        EvalMode::LocCdf => loc_cdf(config, out),
        EvalMode::GtGen => gt_gen(config, out),
        _ => {
            let weights = PipelineWeights::load(config)?;
            match mode {
                EvalMode::Roc => roc(config, &weights, out),
                EvalMode::KnnCurve => knn_curve(config, &weights, out),
                _ => recon_table(config, &weights, out),
            }
        }
    }
    .map_err(|e| e.in_stage(format!("eval {mode}")))?;
    write_json(out.join(format!("{}.json", mode.name().replace('-', "_"))), &summary)?;
    Ok(summary)
}

/// Small world for quick evaluation runs and tests.
pub fn small_synthetic(objects: usize) -> SyntheticConfig {
    SyntheticConfig {
        scenario: Scenario::Intersection,
        objects,
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_parse_and_print() {
        for m in EvalMode::ALL {
            assert_eq!(m.name().parse::<EvalMode>().unwrap(), m);
        }
        assert!("rocs".parse::<EvalMode>().is_err());
    }

    #[test]
    fn missing_inputs_name_the_mode() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig::default();
        for m in EvalMode::ALL {
            let err = run_eval(&config, m, dir.path()).unwrap_err().to_string();
            assert!(err.contains(m.name()), "{err}");
        }
    }

    #[test]
    fn gt_gen_on_synthetic_pairs_finds_each_object() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = PipelineConfig::default();
        config.synthetic = Some(small_synthetic(6));
        let summary = run_eval(&config, EvalMode::GtGen, dir.path()).unwrap();
        assert_eq!(summary["segments"], 12);
        let pairs = read_correspondences(&dir.path().join("correspondences.csv")).unwrap();
        for k in 0..6u64 {
            assert!(pairs.contains(&(2 * k, 2 * k + 1)));
        }
        assert_eq!(read_segments(&dir.path().join("segments")).unwrap().len(), 12);
    }
}
