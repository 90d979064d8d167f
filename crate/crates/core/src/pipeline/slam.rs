//! Multi-robot mapping loop: accumulate, segment, describe, publish to the
//! shared map, localize against it and optimize the pose graph.
//!
//! Robots advance in lockstep rounds. Within a round every robot processes
//! its next scan independently; a single dispatcher then applies map writes,
//! localizations and graph updates in robot order, so results do not depend
//! on thread scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_streams, PipelineConfig, PipelineWeights, StreamData};
use crate::descriptor::{describe, Descriptor};
use crate::error::{Error, Result};
use crate::evaluation::{descriptor_wire_bytes, CompressionStats, POINT_BYTES};
use crate::geometry::{Point3, SE3Transform};
use crate::io::{write_atomic, write_json, write_poses};
use crate::localization::{localize, LocalSegment, MapEntry, SegmentMap};
use crate::pose_graph::{format_trajectory, isotropic_information, Factor, FactorKind, NodeKey, PoseGraph, Prior};
use crate::preprocess::preprocess;
use crate::segmentation::{SegmentId, Segmenter};
use crate::semantics::{classify, SemanticClass};
use crate::voxel_map::{CellIndex, DistanceMetric, DynamicVoxelGrid};

type Pose = SE3Transform<f64>;

/// One accepted localization, turned into a loop-closure factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationEvent {
    pub robot: u32,
    pub scan: u32,
    pub target_robot: u32,
    /// Target node the closure is attached to.
    pub anchor: u32,
    /// Maps the querying robot's odometry frame into the target's.
    pub transform: Pose,
    pub inliers: Vec<(u64, u64)>,
    pub residual_rms: f64,
    /// Querying pose expressed in the target's odometry frame.
    pub estimate: Pose,
    /// The same pose from ground truth, relative to the target's first pose.
    pub ground_truth: Option<Pose>,
}

/// One query of a robot against one other robot's part of the map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationAttempt {
    pub robot: u32,
    pub scan: u32,
    pub target_robot: u32,
    /// Querying pose in the target's odometry frame when accepted.
    pub estimate: Option<Pose>,
    pub ground_truth: Option<Pose>,
}

/// Contents of `localizations.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalizationLog {
    pub events: Vec<LocalizationEvent>,
    pub attempts: Vec<LocalizationAttempt>,
}

/// Bandwidth and map-size accounting; key names follow the rows of the
/// paper's multi-robot table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlamStats {
    pub duration_s: f64,
    pub number_of_robots: usize,
    pub number_of_segmented_local_clouds: usize,
    pub average_number_of_segments_per_cloud: f64,
    pub bandwidth_for_transmitting_local_clouds_kb_s: f64,
    pub bandwidth_for_transmitting_segments_kb_s: f64,
    pub bandwidth_for_transmitting_descriptors_kb_s: f64,
    pub final_map_size_with_the_segmap_descriptor_kb: f64,
    pub number_of_successful_localizations: usize,
    pub compression_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct SlamReport {
    pub robot_names: Vec<String>,
    /// Optimized poses of all robots in the frame of their component's root.
    pub trajectory: BTreeMap<NodeKey, Pose>,
    /// Dead-reckoned poses, each robot in its own odometry frame.
    pub odometry: BTreeMap<NodeKey, Pose>,
    pub ground_truth: Option<BTreeMap<NodeKey, Pose>>,
    pub map: SegmentMap,
    pub localizations: LocalizationLog,
    /// Root robot of each robot's connected component after the run.
    pub components: Vec<u32>,
    pub stats: SlamStats,
}

impl SlamReport {
    /// True when every robot ended up in one connected graph.
    pub fn connected(&self) -> bool {
        self.components.iter().all(|&c| c == self.components[0])
    }

    pub fn poses_of(&self, poses: &BTreeMap<NodeKey, Pose>, robot: u32) -> Vec<Pose> {
        poses.range(NodeKey::new(robot, 0)..=NodeKey::new(robot, u32::MAX)).map(|(_, p)| *p).collect()
    }

    /// Translation error of the estimated transform between the first poses
    /// of robots `a` and `b`.
    pub fn inter_trajectory_error(&self, a: u32, b: u32) -> Option<f64> {
        let gt = self.ground_truth.as_ref()?;
        let (ea, eb) = (self.trajectory.get(&NodeKey::new(a, 0))?, self.trajectory.get(&NodeKey::new(b, 0))?);
        let (ga, gb) = (gt.get(&NodeKey::new(a, 0))?, gt.get(&NodeKey::new(b, 0))?);
        let est = ea.inverse().compose(eb);
        let truth = ga.inverse().compose(gb);
        Some((est.translation - truth.translation).norm())
    }

    /// RMS position error of `estimate` against ground truth for one robot,
    /// both expressed relative to their first pose.
    pub fn trajectory_error(&self, estimate: &BTreeMap<NodeKey, Pose>, robot: u32) -> Option<f64> {
        let gt = self.poses_of(self.ground_truth.as_ref()?, robot);
        let est = self.poses_of(estimate, robot);
        relative_rms(&est, &gt)
    }
}

/// RMS translation difference after expressing both trajectories relative to
/// their first pose.
pub fn relative_rms(est: &[Pose], gt: &[Pose]) -> Option<f64> {
    if est.is_empty() || est.len() != gt.len() {
        return None;
    }
    let (e0, g0) = (est[0].inverse(), gt[0].inverse());
    let sum: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (e0.compose(e).translation - g0.compose(g).translation).norm_squared())
        .sum();
    Some((sum / est.len() as f64).sqrt())
}

#[derive(Debug, Clone)]
struct Described {
    timestamp: u64,
    descriptor: Descriptor,
    class: SemanticClass,
    centroid: Point3<f64>,
    extent: [f64; 3],
    points: usize,
}

#[derive(Debug, Default)]
struct StepOutput {
    upserts: Vec<MapEntry>,
    removals: Vec<u64>,
    query: Option<Vec<LocalSegment>>,
    local_points: usize,
    segment_points: usize,
    descriptors_sent: usize,
    segments_in_view: usize,
}

struct Worker<'a> {
    robot: u32,
    robots: u32,
    stream: &'a StreamData,
    grid: DynamicVoxelGrid<f64>,
    segmenter: Segmenter<f64>,
    odom: Vec<Pose>,
    cache: BTreeMap<SegmentId, Described>,
    published: BTreeSet<SegmentId>,
}

fn within(metric: DistanceMetric, center: &Point3<f64>, p: &Point3<f64>, radius: f64) -> bool {
    let d = *p - *center;
    let r2 = match metric {
        DistanceMetric::Cylindrical => d.x * d.x + d.y * d.y,
        DistanceMetric::Spherical => d.norm_squared(),
    };
    r2 <= radius * radius
}

fn degenerate(e: &Error) -> bool {
    matches!(e, Error::DegenerateSegment(_) | Error::EmptyCloud)
}

impl<'a> Worker<'a> {
    fn new(robot: u32, robots: u32, stream: &'a StreamData, config: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            robot,
            robots,
            stream,
            grid: DynamicVoxelGrid::from_params(&config.voxel_grid),
            segmenter: Segmenter::new(config.segmenter.clone(), config.seed ^ (0x5e9_0000 + u64::from(robot)))?,
            odom: Vec::with_capacity(stream.scans.len()),
            cache: BTreeMap::new(),
            published: BTreeSet::new(),
        })
    }

    fn global_id(&self, id: SegmentId) -> u64 {
        id * u64::from(self.robots) + u64::from(self.robot)
    }

    /// Descriptor of the segment's latest observation, reusing the cache
    /// while the observation is unchanged. `None` for degenerate segments.
    fn describe_segment(&mut self, id: SegmentId, weights: &PipelineWeights) -> Result<Option<(Described, bool)>> {
        let Some(seg) = self.segmenter.state().segment(id) else { return Ok(None) };
        let Some(obs) = seg.latest() else { return Ok(None) };
        if let Some(d) = self.cache.get(&id).filter(|d| d.timestamp == obs.timestamp) {
            return Ok(Some((d.clone(), false)));
        }
        let input = match preprocess(obs) {
            Ok(i) => i,
            Err(e) if degenerate(&e) => return Ok(None),
            Err(e) => return Err(e.in_stage("preprocess")),
        };
        let descriptor = describe(&input, &weights.descriptor).map_err(|e| e.in_stage("describe"))?;
        let class = match &weights.semantics {
            Some(w) => classify(&descriptor, w).map_err(|e| e.in_stage("semantics"))?.class,
            None => SemanticClass::Other,
        };
        let d = Described {
            timestamp: obs.timestamp,
            descriptor,
            class,
            centroid: obs.centroid,
            extent: input.original_extent,
            points: obs.cloud.len(),
        };
        self.cache.insert(id, d.clone());
        Ok(Some((d, true)))
    }

    fn step(&mut self, i: usize, config: &PipelineConfig, weights: &PipelineWeights) -> Result<StepOutput> {
        let scan = self.stream.scans.load(i).map_err(|e| e.in_stage(format!("read scan {i} of `{}`", self.stream.name)))?;
        let pose = match i {
            0 => Pose::identity(),
            _ => self.odom[i - 1].compose(&self.stream.odometry[i - 1]),
        };
        self.odom.push(pose);
        let lm = &config.local_map;

        let evicted = self.grid.retain_near(&pose.translation, lm.radius, lm.metric);
        let mut out = StepOutput::default();
        for id in self.segmenter.forget(&evicted) {
            self.cache.remove(&id);
            self.published.remove(&id);
        }
        let touched: BTreeSet<CellIndex> = scan.iter().map(|p| self.grid.cell_of(&pose.transform_point(p))).collect();
        let newly = self.grid.insert_scan(&scan, &pose);
        let view = self.grid.extract_local(&pose.translation, lm.radius, lm.metric);
        out.local_points = view.cells.iter().filter_map(|c| self.grid.cell(c)).map(|c| c.points.len()).sum();
        let report = self.segmenter.process(&self.grid, &newly, &touched, &view);

        for m in &report.update.merges {
            self.cache.remove(&m.absorbed);
            if self.published.remove(&m.absorbed) {
                out.removals.push(self.global_id(m.absorbed));
            }
        }

        let last = i + 1 == self.stream.scans.len();
        let query_round = (i + 1) % config.localization.every_n_scans == 0 || last;
        let in_view: Vec<SegmentId> = self
            .segmenter
            .state()
            .segments()
            .filter(|s| s.latest().is_some_and(|o| within(lm.metric, &pose.translation, &o.centroid, lm.radius)))
            .map(|s| s.id)
            .collect();
        out.segments_in_view = in_view.len();

        let mut publish: BTreeSet<SegmentId> = report.newly_complete.iter().copied().collect();
        if last {
            publish.extend(in_view.iter().copied());
        }
        let mut to_describe = publish.clone();
        if query_round {
            to_describe.extend(in_view.iter().copied());
        }
        let anchor = i as u32;
        let mut query = Vec::new();
        for id in to_describe {
            let Some((d, fresh)) = self.describe_segment(id, weights)? else { continue };
            if fresh {
                out.segment_points += d.points;
            }
            let gid = self.global_id(id);
            if publish.contains(&id) {
                self.published.insert(id);
                out.descriptors_sent += 1;
                out.upserts.push(
                    MapEntry::new(gid, d.centroid, d.descriptor.clone(), d.class, d.points)
                        .with_origin(self.robot, anchor)
                        .with_extent(d.extent),
                );
            }
            if query_round && in_view.binary_search(&id).is_ok() {
                query.push(LocalSegment {
                    id: gid,
                    centroid: d.centroid,
                    descriptor: d.descriptor,
                    class: d.class,
                });
            }
        }
        if query_round {
            out.query = Some(query);
        }
        Ok(out)
    }
}

/// Union-find over robots, keeping the smallest robot index as root.
#[derive(Debug, Clone)]
struct Components(Vec<u32>);

impl Components {
    fn find(&self, mut r: u32) -> u32 {
        while self.0[r as usize] != r {
            r = self.0[r as usize];
        }
        r
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra.max(rb) as usize] = ra.min(rb);
    }
}

struct Dispatcher<'c> {
    config: &'c PipelineConfig,
    robots: u32,
    map: SegmentMap,
    estimates: BTreeMap<NodeKey, Pose>,
    odometry: BTreeMap<NodeKey, Pose>,
    closures: Vec<Factor<f64>>,
    components: Components,
    log: LocalizationLog,
}

impl Dispatcher<'_> {
    fn odom(&self, robot: u32, index: u32) -> Pose {
        self.odometry[&NodeKey::new(robot, index)]
    }

    fn add_node(&mut self, robot: u32, index: u32, odom: Pose, increment: Option<&Pose>) {
        let key = NodeKey::new(robot, index);
        let est = match increment {
            Some(d) => self.estimates[&NodeKey::new(robot, index - 1)].compose(d),
            None => Pose::identity(),
        };
        self.estimates.insert(key, est);
        self.odometry.insert(key, odom);
    }

    /// Localizes robot `r` at scan `i` against each robot's part of the map.
    /// Returns whether any closure was accepted.
    fn localize_query(
        &mut self,
        r: u32,
        i: u32,
        local: &[LocalSegment],
        streams: &[StreamData],
        round: usize,
    ) -> Result<bool> {
        let loc = &self.config.localization;
        let local_ids: BTreeSet<u64> = local.iter().map(|s| s.id).collect();
        let mut accepted = false;
        for t in 0..self.robots {
            let target = self.map.filtered(|e| {
                e.robot == t && (t != r || (e.anchor + loc.self_exclusion_nodes < i && !local_ids.contains(&e.id)))
            });
            if target.is_empty() {
                continue;
            }
            let seed = self.config.seed ^ ((round as u64) << 20 | u64::from(r) << 10 | u64::from(t));
            let result = localize(local, &target, &self.config.retrieval, &loc.drop_classes, seed)
                .map_err(|e| e.in_stage(format!("localize robot {r} scan {i} against robot {t}")))?;
            let ground_truth = match (&streams[t as usize].ground_truth, &streams[r as usize].ground_truth) {
                (Some(gt_t), Some(gt_r)) => Some(gt_t[0].inverse().compose(&gt_r[i as usize])),
                _ => None,
            };
            self.log.attempts.push(LocalizationAttempt {
                robot: r,
                scan: i,
                target_robot: t,
                estimate: None,
                ground_truth,
            });
            let Some(res) = result else { continue };
            if res.residual_rms > loc.max_residual_rms {
                log::debug!("robot {r} scan {i}: rejected match against robot {t}, rms {:.3}", res.residual_rms);
                continue;
            }
            let mut anchors: Vec<u32> = res.inliers.iter().filter_map(|(_, g)| target.get(*g)).map(|e| e.anchor).collect();
            anchors.sort_unstable();
            let a = anchors[anchors.len() / 2];
            let o_r = self.odom(r, i);
            let estimate = res.transform.compose(&o_r);
            let z = self.odom(t, a).inverse().compose(&estimate);
            let from = NodeKey::new(t, a);
            let to = NodeKey::new(r, i);
            if self.components.find(t) != self.components.find(r) {
                self.link(from, to, &z);
            }
            self.closures.push(Factor {
                kind: FactorKind::LoopClosure,
                from,
                to,
                measurement: z,
                information: isotropic_information(
                    self.config.pose_graph.loop_closure_sigma_rotation,
                    self.config.pose_graph.loop_closure_sigma_translation,
                ),
            });
            self.log.attempts.last_mut().unwrap().estimate = Some(estimate);
            log::info!(
                "robot {r} scan {i} localized against robot {t} ({} inliers, rms {:.3} m)",
                res.inliers.len(),
                res.residual_rms
            );
            self.log.events.push(LocalizationEvent {
                robot: r,
                scan: i,
                target_robot: t,
                anchor: a,
                transform: res.transform,
                inliers: res.inliers,
                residual_rms: res.residual_rms,
                estimate,
                ground_truth,
            });
            accepted = true;
        }
        Ok(accepted)
    }

    /// First link between two components: moves the one not holding the
    /// smaller root so that the closure holds exactly.
    fn link(&mut self, from: NodeKey, to: NodeKey, z: &Pose) {
        let (rf, rt) = (self.components.find(from.robot), self.components.find(to.robot));
        let (moved_root, c) = if rf < rt {
            let c = self.estimates[&from].compose(z).compose(&self.estimates[&to].inverse());
            (rt, c)
        } else {
            let c = self.estimates[&to].compose(&z.inverse()).compose(&self.estimates[&from].inverse());
            (rf, c)
        };
        for (k, p) in self.estimates.iter_mut() {
            if self.components.find(k.robot) == moved_root {
                *p = c.compose(p);
            }
        }
        self.components.union(from.robot, to.robot);
    }

    fn optimize(&mut self, streams: &[StreamData]) -> Result<()> {
        let pg = &self.config.pose_graph;
        let mut graph = PoseGraph::new();
        for (k, p) in &self.estimates {
            graph.add_node(*k, *p)?;
        }
        let odo_info = isotropic_information(pg.odometry_sigma_rotation, pg.odometry_sigma_translation);
        for (r, s) in streams.iter().enumerate() {
            let r = r as u32;
            for (j, d) in s.odometry.iter().enumerate() {
                let (a, b) = (NodeKey::new(r, j as u32), NodeKey::new(r, j as u32 + 1));
                if self.estimates.contains_key(&b) {
                    graph.add_odometry(a, b, *d, odo_info)?;
                }
            }
        }
        for f in &self.closures {
            graph.add_factor(f.clone())?;
        }
        let roots: BTreeSet<u32> = (0..self.robots).map(|r| self.components.find(r)).collect();
        for root in roots {
            let node = NodeKey::new(root, 0);
            if self.estimates.contains_key(&node) {
                graph.add_prior(Prior {
                    node,
                    measurement: self.estimates[&node],
                    information: isotropic_information(pg.prior_sigma, pg.prior_sigma),
                })?;
            }
        }
        let solution = graph.optimize(&pg.solver)?;
        self.estimates = solution.poses;
        Ok(())
    }
}

/// Runs the mapping loop over the configured or generated streams.
pub fn run_slam(config: &PipelineConfig) -> Result<SlamReport> {
    config.validate()?;
    let streams = load_streams(config).map_err(|e| e.in_stage("load streams"))?;
    let weights = PipelineWeights::load(config).map_err(|e| e.in_stage("load weights"))?;
    run_streams(config, &weights, &streams)
}

/// Mapping loop over already loaded streams.
pub fn run_streams(config: &PipelineConfig, weights: &PipelineWeights, streams: &[StreamData]) -> Result<SlamReport> {
    let robots = streams.len() as u32;
    let variant = weights.variant();
    let mut dispatcher = Dispatcher {
        config,
        robots,
        map: SegmentMap::new(variant),
        estimates: BTreeMap::new(),
        odometry: BTreeMap::new(),
        closures: Vec::new(),
        components: Components((0..robots).collect()),
        log: LocalizationLog::default(),
    };
    let rounds = streams.iter().map(|s| s.scans.len()).max().unwrap_or(0);
    if rounds == 0 {
        log::warn!("no scans to process; writing empty outputs");
    }
    let mut workers = streams
        .iter()
        .enumerate()
        .map(|(r, s)| Worker::new(r as u32, robots, s, config))
        .collect::<Result<Vec<_>>>()?;

    let mut clouds = 0usize;
    let mut segments_in_view = 0usize;
    let (mut local_bytes, mut segment_bytes, mut descriptor_count) = (0.0, 0.0, 0usize);
    for round in 0..rounds {
        let outputs: Vec<Option<Result<StepOutput>>> = workers
            .par_iter_mut()
            .map(|w| (round < w.stream.scans.len()).then(|| w.step(round, config, weights)))
            .collect();
        let mut closed = false;
        for (r, out) in outputs.into_iter().enumerate() {
            let Some(out) = out else { continue };
            let out = out?;
            let r = r as u32;
            let i = round as u32;
            let increment = (round > 0).then(|| &streams[r as usize].odometry[round - 1]);
            dispatcher.add_node(r, i, workers[r as usize].odom[round], increment);
            for id in &out.removals {
                dispatcher.map.remove(*id);
            }
            for e in out.upserts {
                dispatcher.map.upsert(e).map_err(|e| e.in_stage("map update"))?;
            }
            clouds += 1;
            segments_in_view += out.segments_in_view;
            local_bytes += out.local_points as f64 * POINT_BYTES;
            segment_bytes += out.segment_points as f64 * POINT_BYTES;
            descriptor_count += out.descriptors_sent;
            if let Some(local) = out.query.filter(|q| !q.is_empty()) {
                closed |= dispatcher.localize_query(r, i, &local, streams, round)?;
            }
        }
        if closed {
            dispatcher.optimize(streams).map_err(|e| e.in_stage("pose-graph optimization"))?;
        }
    }
    if !dispatcher.estimates.is_empty() {
        dispatcher.optimize(streams).map_err(|e| e.in_stage("pose-graph optimization"))?;
    }

    let duration_s = rounds as f64 * config.evaluation.scan_period_s;
    let per_s = |bytes: f64| if duration_s > 0.0 { bytes / 1000.0 / duration_s } else { 0.0 };
    let dim = variant.dimension();
    let map_points: f64 = dispatcher.map.entries().map(|e| e.point_count as f64).sum();
    let compression = CompressionStats::from_totals(
        dispatcher.map.len(),
        map_points * POINT_BYTES,
        dispatcher.map.len() as f64 * descriptor_wire_bytes(dim),
    );
    let stats = SlamStats {
        duration_s,
        number_of_robots: streams.len(),
        number_of_segmented_local_clouds: clouds,
        average_number_of_segments_per_cloud: if clouds > 0 { segments_in_view as f64 / clouds as f64 } else { 0.0 },
        bandwidth_for_transmitting_local_clouds_kb_s: per_s(local_bytes),
        bandwidth_for_transmitting_segments_kb_s: per_s(segment_bytes),
        bandwidth_for_transmitting_descriptors_kb_s: per_s(descriptor_count as f64 * descriptor_wire_bytes(dim)),
        final_map_size_with_the_segmap_descriptor_kb: compression.descriptor_bytes / 1000.0,
        number_of_successful_localizations: dispatcher.log.events.len(),
        compression_ratio: compression.ratio,
    };
    let ground_truth = streams.iter().all(|s| s.ground_truth.is_some()).then(|| {
        streams
            .iter()
            .enumerate()
            .flat_map(|(r, s)| {
                s.ground_truth.as_ref().unwrap().iter().enumerate().map(move |(i, p)| (NodeKey::new(r as u32, i as u32), *p))
            })
            .collect()
    });
    Ok(SlamReport {
        robot_names: streams.iter().map(|s| s.name.clone()).collect(),
        components: (0..robots).map(|r| dispatcher.components.find(r)).collect(),
        trajectory: dispatcher.estimates,
        odometry: dispatcher.odometry,
        ground_truth,
        map: dispatcher.map,
        localizations: dispatcher.log,
        stats,
    })
}

/// Writes `trajectory.txt`, `odometry.txt`, `map.segw`, `stats.json` and
/// `localizations.json`, plus per-robot ground-truth pose files when known.
pub fn write_slam_outputs(report: &SlamReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    write_atomic(dir.join("trajectory.txt"), format_trajectory(&report.trajectory).as_bytes())?;
    write_atomic(dir.join("odometry.txt"), format_trajectory(&report.odometry).as_bytes())?;
    let bytes = report.map.to_container()?.to_bytes();
    write_atomic(dir.join("map.segw"), &bytes)?;
    write_json(dir.join("stats.json"), &report.stats)?;
    write_json(dir.join("localizations.json"), &report.localizations)?;
    if let Some(gt) = &report.ground_truth {
        for (r, name) in report.robot_names.iter().enumerate() {
            write_poses(dir.join(format!("ground_truth_{name}.txt")), &report.poses_of(gt, r as u32))?;
        }
    }
    Ok(())
}
