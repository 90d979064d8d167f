//! Configuration, input streams and orchestration of mapping, localization
//! and evaluation runs.

pub mod eval;
pub mod slam;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{describe, Descriptor, DescriptorVariant};
use crate::error::{Error, Result};
use crate::evaluation::{GroundTruthParams, NEGATIVES_PER_POSITIVE, NEGATIVE_MIN_DISTANCE};
use crate::geometry::{Point3, PointCloud, SE3Transform};
use crate::io::{parse_poses, read_poses, read_scan, ScanFormat};
use crate::localization::{MapEntry, RetrievalParams, SegmentMap};
use crate::nn::{Architecture, NetworkWeights};
use crate::pose_graph::SolverParams;
use crate::preprocess::{preprocess, VoxelizedInput};
use crate::segmentation::{SegmentId, SegmentObservation, Segmenter, SegmenterParams};
use crate::semantics::{classify, SemanticClass};
use crate::voxel_map::{CellIndex, DistanceMetric, DynamicVoxelGrid, VoxelGridParams};

pub use eval::{run_eval, EvalMode};
pub use slam::{run_slam, run_streams, write_slam_outputs, LocalizationLog, SlamReport, SlamStats};
pub use synthetic::{Scenario, SyntheticConfig, SyntheticWorld};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalMapParams {
    pub radius: f64,
    pub metric: DistanceMetric,
}

impl Default for LocalMapParams {
    fn default() -> Self {
        Self {
            radius: 50.0,
            metric: DistanceMetric::Cylindrical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizationParams {
    /// A localization query is issued every this many scans and after the
    /// last scan of a stream.
    pub every_n_scans: usize,
    /// Own-map segments anchored within this many nodes of the query are
    /// not used for loop closure.
    pub self_exclusion_nodes: u32,
    /// Results whose inlier RMS exceeds this are rejected, meters.
    pub max_residual_rms: f64,
    pub drop_classes: BTreeSet<SemanticClass>,
}

impl Default for LocalizationParams {
    fn default() -> Self {
        Self {
            every_n_scans: 5,
            self_exclusion_nodes: 30,
            max_residual_rms: 0.4,
            drop_classes: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseGraphParams {
    pub solver: SolverParams,
    pub odometry_sigma_rotation: f64,
    pub odometry_sigma_translation: f64,
    pub loop_closure_sigma_rotation: f64,
    pub loop_closure_sigma_translation: f64,
    pub prior_sigma: f64,
}

impl Default for PoseGraphParams {
    fn default() -> Self {
        Self {
            solver: SolverParams::default(),
            odometry_sigma_rotation: 0.002,
            odometry_sigma_translation: 0.02,
            loop_closure_sigma_rotation: 0.02,
            loop_closure_sigma_translation: 0.2,
            prior_sigma: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationParams {
    pub ground_truth: GroundTruthParams,
    pub negatives_per_positive: usize,
    pub negative_min_distance: f64,
    /// Occupancy probability at which reconstructions count as filled.
    pub reconstruction_threshold: f64,
    /// Time between consecutive scans, seconds, for bandwidth accounting.
    pub scan_period_s: f64,
    /// Surface samples per square meter for synthetic evaluation segments.
    pub segment_density: f64,
}

impl Default for EvaluationParams {
    fn default() -> Self {
        Self {
            ground_truth: GroundTruthParams::default(),
            negatives_per_positive: NEGATIVES_PER_POSITIVE,
            negative_min_distance: NEGATIVE_MIN_DISTANCE,
            reconstruction_threshold: 0.5,
            scan_period_s: 0.1,
            segment_density: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsConfig {
    pub descriptor: Option<PathBuf>,
    pub decoder: Option<PathBuf>,
    pub semantics: Option<PathBuf>,
    /// Architecture of the seeded random encoder used when `descriptor` is
    /// not given.
    pub fallback_architecture: String,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        Self {
            descriptor: None,
            decoder: None,
            semantics: None,
            fallback_architecture: Architecture::SegMini.id().to_string(),
        }
    }
}

/// Ordered scans of one robot plus where its poses come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobotStream {
    pub name: String,
    pub scans: Vec<PathBuf>,
    /// Alternative to `scans`: every file in this directory, sorted by name.
    pub scan_dir: Option<PathBuf>,
    /// Defaults to the file extension (`.bin` is Velodyne, anything else text).
    pub format: Option<ScanFormat>,
    /// One absolute pose per scan.
    pub poses: Option<PathBuf>,
    /// One relative motion per consecutive scan pair.
    pub odometry: Option<PathBuf>,
    /// Optional reference poses, one per scan.
    pub ground_truth: Option<PathBuf>,
}

/// Input files of the evaluation modes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    pub map: Option<PathBuf>,
    pub correspondences: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub segments_dir: Option<PathBuf>,
    pub localizations: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root of all randomness in a run.
    pub seed: u64,
    pub voxel_grid: VoxelGridParams,
    pub local_map: LocalMapParams,
    pub segmenter: SegmenterParams,
    pub retrieval: RetrievalParams,
    pub localization: LocalizationParams,
    pub pose_graph: PoseGraphParams,
    pub evaluation: EvaluationParams,
    pub weights: WeightsConfig,
    pub robots: Vec<RobotStream>,
    /// Replaces `robots` with a generated world when present.
    pub synthetic: Option<SyntheticConfig>,
    pub inputs: InputPaths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            voxel_grid: VoxelGridParams::default(),
            local_map: LocalMapParams::default(),
            segmenter: SegmenterParams::default(),
            retrieval: RetrievalParams::default(),
            localization: LocalizationParams::default(),
            pose_graph: PoseGraphParams::default(),
            evaluation: EvaluationParams::default(),
            weights: WeightsConfig::default(),
            robots: Vec::new(),
            synthetic: None,
            inputs: InputPaths::default(),
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl PipelineConfig {
    /// Settings tuned for the generated worlds: coarser voxels and smaller
    /// segments than the street-scale defaults.
    pub fn synthetic(scenario: Scenario) -> Self {
        let mut c = Self {
            synthetic: Some(SyntheticConfig {
                scenario,
                ..Default::default()
            }),
            ..Default::default()
        };
        c.voxel_grid.voxel_size = 0.2;
        c.segmenter.euclidean_distance_threshold = 0.5;
        c.segmenter.min_segment_points = 60;
        c.segmenter.max_segment_points = 40_000;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.voxel_grid.validate()?;
        self.segmenter.validate().map_err(|e| Error::Config(format!("segmenter: {e}")))?;
        self.retrieval.validate()?;
        self.pose_graph.solver.validate()?;
        self.evaluation.ground_truth.validate()?;
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        let lm = &self.local_map;
        check(lm.radius > 0.0 && lm.radius.is_finite(), || format!("local_map.radius must be positive, got {}", lm.radius))?;
        let loc = &self.localization;
        check(loc.every_n_scans >= 1, || "localization.every_n_scans must be at least 1".into())?;
        check(loc.max_residual_rms > 0.0, || "localization.max_residual_rms must be positive".into())?;
        let pg = &self.pose_graph;
        for (name, v) in [
            ("odometry_sigma_rotation", pg.odometry_sigma_rotation),
            ("odometry_sigma_translation", pg.odometry_sigma_translation),
            ("loop_closure_sigma_rotation", pg.loop_closure_sigma_rotation),
            ("loop_closure_sigma_translation", pg.loop_closure_sigma_translation),
            ("prior_sigma", pg.prior_sigma),
        ] {
            check(v > 0.0 && v.is_finite(), || format!("pose_graph.{name} must be positive, got {v}"))?;
        }
        let ev = &self.evaluation;
        check(ev.negatives_per_positive >= 1, || "evaluation.negatives_per_positive must be at least 1".into())?;
        check(ev.negative_min_distance >= 0.0, || "evaluation.negative_min_distance must be non-negative".into())?;
        check(ev.reconstruction_threshold > 0.0 && ev.reconstruction_threshold < 1.0, || {
            "evaluation.reconstruction_threshold must be in (0, 1)".into()
        })?;
        check(ev.scan_period_s > 0.0, || "evaluation.scan_period_s must be positive".into())?;
        check(ev.segment_density > 0.0, || "evaluation.segment_density must be positive".into())?;
        let arch = Architecture::from_id(&self.weights.fallback_architecture)
            .map_err(|_| Error::Config(format!("unknown weights.fallback_architecture `{}`", self.weights.fallback_architecture)))?;
        check(arch.encoder().is_some(), || "weights.fallback_architecture must be an encoder".into())?;
        for (i, r) in self.robots.iter().enumerate() {
            check(r.poses.is_some() != r.odometry.is_some(), || {
                format!("robots[{i}] needs exactly one of `poses` and `odometry`")
            })?;
            check(r.scans.is_empty() || r.scan_dir.is_none(), || format!("robots[{i}] gives both `scans` and `scan_dir`"))?;
        }
        Ok(())
    }
}

/// Networks used by a run.
#[derive(Debug, Clone)]
pub struct PipelineWeights {
    pub descriptor: NetworkWeights,
    pub decoder: Option<NetworkWeights>,
    pub semantics: Option<NetworkWeights>,
}

impl PipelineWeights {
    /// Loads the configured files; a missing encoder is replaced by seeded
    /// random weights, with a warning.
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let w = &config.weights;
        let descriptor = match &w.descriptor {
            Some(p) => NetworkWeights::load(p)?,
            None => {
                let arch = Architecture::from_id(&w.fallback_architecture)?;
                log::warn!("no descriptor weights configured; using seeded random {} weights", arch.id());
                NetworkWeights::random(arch, config.seed)
            }
        };
        DescriptorVariant::from_architecture(descriptor.architecture())?;
        let load_as = |p: &Option<PathBuf>, arch: Architecture| -> Result<Option<NetworkWeights>> {
            p.as_ref()
                .map(|p| {
                    let n = NetworkWeights::load(p)?;
                    n.require(arch)?;
                    Ok(n)
                })
                .transpose()
        };
        Ok(Self {
            decoder: load_as(&w.decoder, Architecture::Decoder)?,
            semantics: load_as(&w.semantics, Architecture::Semantics)?,
            descriptor,
        })
    }

    pub fn variant(&self) -> DescriptorVariant {
        DescriptorVariant::from_architecture(self.descriptor.architecture()).expect("checked at load")
    }
}

/// Scans held in memory or read on demand.
#[derive(Debug, Clone, PartialEq)]
pub enum ScanSource {
    Files { paths: Vec<PathBuf>, format: Option<ScanFormat> },
    Memory(Vec<PointCloud<f64>>),
}

impl ScanSource {
    pub fn len(&self) -> usize {
        match self {
            Self::Files { paths, .. } => paths.len(),
            Self::Memory(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(&self, i: usize) -> Result<PointCloud<f64>> {
        match self {
            Self::Files { paths, format } => {
                let p = &paths[i];
                read_scan(p, format.unwrap_or_else(|| ScanFormat::from_path(p)))
            }
            Self::Memory(v) => Ok(v[i].clone()),
        }
    }
}

/// One robot's input, ready for the mapping loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamData {
    pub name: String,
    pub scans: ScanSource,
    /// Relative motion from scan `i` to scan `i + 1`.
    pub odometry: Vec<SE3Transform<f64>>,
    pub ground_truth: Option<Vec<SE3Transform<f64>>>,
}

fn increments(poses: &[SE3Transform<f64>]) -> Vec<SE3Transform<f64>> {
    poses.windows(2).map(|w| w[0].inverse().compose(&w[1])).collect()
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    out.sort();
    Ok(out)
}

impl StreamData {
    pub fn from_config(r: &RobotStream) -> Result<Self> {
        let paths = match &r.scan_dir {
            Some(d) => list_dir(d)?,
            None => r.scans.clone(),
        };
        let n = paths.len();
        let odometry = match (&r.poses, &r.odometry) {
            (Some(p), None) => {
                let poses = read_poses(p)?;
                if poses.len() != n {
                    return Err(Error::Config(format!(
                        "robot `{}`: {} scans but {} poses in {}",
                        r.name,
                        n,
                        poses.len(),
                        p.display()
                    )));
                }
                increments(&poses)
            }
            (None, Some(p)) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let (steps, _) = parse_poses(&text, p)?;
                if steps.len() + 1 != n.max(1) {
                    return Err(Error::Config(format!(
                        "robot `{}`: {} scans need {} odometry lines, found {}",
                        r.name,
                        n,
                        n.saturating_sub(1),
                        steps.len()
                    )));
                }
                steps
            }
            _ => return Err(Error::Config(format!("robot `{}` needs exactly one of `poses` and `odometry`", r.name))),
        };
        let ground_truth = match &r.ground_truth {
            Some(p) => {
                let gt = read_poses(p)?;
                if gt.len() != n {
                    return Err(Error::Config(format!("robot `{}`: {} scans but {} ground-truth poses", r.name, n, gt.len())));
                }
                Some(gt)
            }
            None => None,
        };
        Ok(Self {
            name: r.name.clone(),
            scans: ScanSource::Files { paths, format: r.format },
            odometry,
            ground_truth,
        })
    }
}

/// Streams of the configured robots, or of the generated world.
pub fn load_streams(config: &PipelineConfig) -> Result<Vec<StreamData>> {
    if let Some(s) = &config.synthetic {
        let world = SyntheticWorld::generate(s, config.seed)?;
        return Ok(world
            .simulate(config.seed)
            .into_iter()
            .enumerate()
            .map(|(i, sim)| StreamData {
                name: format!("robot{i}"),
                scans: ScanSource::Memory(sim.scans),
                odometry: sim.odometry,
                ground_truth: Some(sim.ground_truth),
            })
            .collect());
    }
    config.robots.iter().map(StreamData::from_config).collect()
}

/// Descriptor and class of one segment cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct DescribedCloud {
    pub input: VoxelizedInput,
    pub descriptor: Descriptor,
    pub class: SemanticClass,
    pub centroid: Point3<f64>,
}

/// Preprocesses and describes `cloud`, classifying it when semantic weights
/// are loaded. `None` for empty or degenerate clouds.
pub fn describe_cloud(cloud: &PointCloud<f64>, weights: &PipelineWeights) -> Result<Option<DescribedCloud>> {
    let obs = match SegmentObservation::new(cloud.clone(), 0) {
        Ok(o) => o,
        Err(Error::EmptyCloud) => return Ok(None),
        Err(e) => return Err(e),
    };
    let input = match preprocess(&obs) {
        Ok(i) => i,
        Err(Error::DegenerateSegment(_) | Error::EmptyCloud) => return Ok(None),
        Err(e) => return Err(e),
    };
    let descriptor = describe(&input, &weights.descriptor)?;
    let class = match &weights.semantics {
        Some(w) => classify(&descriptor, w)?.class,
        None => SemanticClass::Other,
    };
    Ok(Some(DescribedCloud {
        input,
        descriptor,
        class,
        centroid: obs.centroid,
    }))
}

/// Map of the given segments, keyed by their ids; degenerate segments are
/// left out.
pub fn build_map(segments: &[(u64, PointCloud<f64>)], weights: &PipelineWeights) -> Result<SegmentMap> {
    let described: Vec<Option<DescribedCloud>> = segments.par_iter().map(|(_, c)| describe_cloud(c, weights)).collect::<Result<_>>()?;
    let mut map = SegmentMap::new(weights.variant());
    for ((id, cloud), d) in segments.iter().zip(described) {
        let Some(d) = d else {
            log::warn!("segment {id} is degenerate and was not added to the map");
            continue;
        };
        map.upsert(MapEntry::new(*id, d.centroid, d.descriptor, d.class, cloud.len()).with_extent(d.input.original_extent))?;
    }
    Ok(map)
}

/// Latest observation of one segment extracted from a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedSegment {
    pub id: SegmentId,
    pub complete: bool,
    pub observation: SegmentObservation<f64>,
}

/// Accumulates and segments one stream in its odometry frame. Complete
/// segments are reported with the observation they completed with; segments
/// still growing at the end are reported as incomplete.
pub fn segment_stream(config: &PipelineConfig, stream: &StreamData) -> Result<Vec<ExtractedSegment>> {
    let lm = &config.local_map;
    let mut grid = DynamicVoxelGrid::from_params(&config.voxel_grid);
    let mut segmenter = Segmenter::new(config.segmenter.clone(), config.seed)?;
    let mut out: BTreeMap<SegmentId, ExtractedSegment> = BTreeMap::new();
    let mut pose = SE3Transform::identity();
    for i in 0..stream.scans.len() {
        if i > 0 {
            pose = pose.compose(&stream.odometry[i - 1]);
        }
        let scan = stream.scans.load(i).map_err(|e| e.in_stage(format!("read scan {i}")))?;
        let evicted = grid.retain_near(&pose.translation, lm.radius, lm.metric);
        segmenter.forget(&evicted);
        let touched: BTreeSet<CellIndex> = scan.iter().map(|p| grid.cell_of(&pose.transform_point(p))).collect();
        let newly = grid.insert_scan(&scan, &pose);
        let view = grid.extract_local(&pose.translation, lm.radius, lm.metric);
        let report = segmenter.process(&grid, &newly, &touched, &view);
        for m in &report.update.merges {
            out.remove(&m.absorbed);
        }
        for id in report.update.touched() {
            out.remove(&id);
        }
        for id in report.newly_complete {
            if let Some(obs) = segmenter.state().segment(id).and_then(|s| s.latest()) {
                out.insert(id, ExtractedSegment { id, complete: true, observation: obs.clone() });
            }
        }
    }
    for seg in segmenter.state().segments() {
        if let (false, Some(obs)) = (out.contains_key(&seg.id), seg.latest()) {
            out.insert(seg.id, ExtractedSegment { id: seg.id, complete: seg.complete, observation: obs.clone() });
        }
    }
    Ok(out.into_values().collect())
}
