//! Command-line front end of the segment mapping pipeline.
//!
//! Every command reads its tunables from `--config` (JSON, see
//! `PipelineConfig`) and writes artifacts below `--output-dir`.
//!
//! `stats` and `slam` emit `stats.json` with these keys:
//! `duration_s`, `number_of_robots`, `number_of_segmented_local_clouds`,
//! `average_number_of_segments_per_cloud`,
//! `bandwidth_for_transmitting_local_clouds_kb_s`,
//! `bandwidth_for_transmitting_segments_kb_s`,
//! `bandwidth_for_transmitting_descriptors_kb_s`,
//! `final_map_size_with_the_segmap_descriptor_kb`,
//! `number_of_successful_localizations`, `compression_ratio`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use segmap::evaluation::{compression_stats, CompressionStats};
use segmap::io::{read_scan, write_atomic, write_json, write_segment, ScanFormat};
use segmap::localization::{localize, LocalSegment, SegmentMap};
use segmap::nn::{Architecture, NetworkWeights};
use segmap::pipeline::eval::read_segments;
use segmap::pipeline::{
    build_map, describe_cloud, load_streams, run_eval, run_slam, segment_stream, write_slam_outputs, EvalMode, PipelineConfig,
    PipelineWeights, Scenario,
};
use segmap::reconstruction::{correspondence_ratio, decode, marching_cubes};
use segmap::semantics::SemanticClass;
use segmap::Cloud;

#[derive(Debug, Parser)]
#[command(name = "segmap", version, about = "Segment-based LiDAR mapping and localization")]
struct Cli {
    /// Pipeline configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving all artifacts.
    #[arg(long, global = true, default_value = "out")]
    output_dir: PathBuf,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct SegmentInputs {
    /// Segment files (xyz text or Velodyne `.bin`) or directories of them;
    /// file stems are the segment ids.
    #[arg(required = true)]
    segments: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Accumulate and segment the first configured robot stream (or the
    /// given scans and poses) and write each segment as an xyz file.
    Segment {
        /// Scan files in order; overrides the configured robots.
        scans: Vec<PathBuf>,
        /// One absolute pose per scan.
        #[arg(long, requires = "scans")]
        poses: Option<PathBuf>,
    },
    /// Compute descriptors (and classes) of segment files.
    Describe(SegmentInputs),
    /// Describe segment files and store them as a segment map.
    BuildMap(SegmentInputs),
    /// Localize a set of segments against a segment map.
    Localize {
        #[arg(long)]
        map: PathBuf,
        #[command(flatten)]
        inputs: SegmentInputs,
        /// Semantic classes to ignore on both sides.
        #[arg(long, value_delimiter = ',')]
        drop: Vec<SemanticClass>,
    },
    /// Run the multi-robot mapping and localization loop.
    Slam {
        /// Use a generated world instead of the configured robots.
        #[arg(long, value_parser = parse_scenario)]
        synthetic: Option<Scenario>,
    },
    /// Reconstruct segments from their descriptors and write OBJ meshes.
    Reconstruct {
        #[command(flatten)]
        inputs: SegmentInputs,
    },
    /// Run one evaluation mode.
    Eval {
        /// roc, knn-curve, recon-table, compression, loc-cdf or gt-gen.
        #[arg(value_parser = parse_mode)]
        mode: EvalMode,
    },
    /// Generate overlap-based ground-truth correspondences.
    GtGen,
    /// Compression statistics of a segment map.
    Stats {
        #[arg(long)]
        map: PathBuf,
    },
    /// Weight-file utilities.
    #[command(subcommand)]
    Weights(WeightsCommand),
}

#[derive(Debug, Subcommand)]
enum WeightsCommand {
    /// Write seeded random weights for an architecture.
    Init {
        /// One of segmap-v1, segmini-v1, decoder-v1, semantics-v1.
        #[arg(long)]
        arch: String,
        /// Output path; defaults to `<output-dir>/<arch>.segw`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the architecture and parameter count of a weight file.
    Inspect { path: PathBuf },
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown scenario `{s}` (intersection, figure-eight)"))
}

fn parse_mode(s: &str) -> std::result::Result<EvalMode, String> {
    s.parse().map_err(|e: segmap::Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Expands files and directories into `(id, cloud)` pairs.
fn read_segment_inputs(inputs: &SegmentInputs) -> Result<Vec<(u64, Cloud)>> {
    let mut out = Vec::new();
    for p in &inputs.segments {
        if p.is_dir() {
            out.extend(read_segments(p)?);
        } else {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<u64>().ok())
                .with_context(|| format!("segment file name {} is not a numeric id", p.display()))?;
            out.push((id, read_scan(p, ScanFormat::from_path(p))?));
        }
    }
    let ids: BTreeSet<u64> = out.iter().map(|(id, _)| *id).collect();
    if ids.len() != out.len() {
        bail!("duplicate segment ids among the inputs");
    }
    Ok(out)
}

fn cmd_segment(config: &PipelineConfig, out: &Path, scans: &[PathBuf], poses: &Option<PathBuf>) -> Result<()> {
    let stream = if scans.is_empty() {
        load_streams(config)?.into_iter().next().context("segment: no robot stream configured")?
    } else {
        let robot = segmap::pipeline::RobotStream {
            name: "cli".into(),
            scans: scans.to_vec(),
            poses: Some(poses.clone().context("segment: --poses is required with scan files")?),
            ..Default::default()
        };
        segmap::pipeline::StreamData::from_config(&robot)?
    };
    let segments = segment_stream(config, &stream)?;
    let mut csv = String::from("id,points,complete,cx,cy,cz\n");
    for s in &segments {
        let c = s.observation.centroid;
        write_segment(out.join("segments").join(format!("{}.xyz", s.id)), &s.observation.cloud.points)?;
        csv.push_str(&format!("{},{},{},{},{},{}\n", s.id, s.observation.cloud.len(), s.complete, c.x, c.y, c.z));
    }
    write_atomic(out.join("segments.csv"), csv.as_bytes())?;
    println!("{} segments written to {}", segments.len(), out.join("segments").display());
    Ok(())
}

fn cmd_describe(config: &PipelineConfig, out: &Path, inputs: &SegmentInputs) -> Result<()> {
    let weights = PipelineWeights::load(config)?;
    let mut csv = String::from("id,class");
    for k in 0..weights.variant().dimension() {
        csv.push_str(&format!(",d{k}"));
    }
    csv.push('\n');
    let mut skipped = 0;
    for (id, cloud) in read_segment_inputs(inputs)? {
        let Some(d) = describe_cloud(&cloud, &weights)? else {
            skipped += 1;
            continue;
        };
        csv.push_str(&format!("{id},{}", d.class));
        for v in &d.descriptor.values {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write_atomic(out.join("descriptors.csv"), csv.as_bytes())?;
    if skipped > 0 {
        log::warn!("{skipped} degenerate segments skipped");
    }
    Ok(())
}

fn cmd_build_map(config: &PipelineConfig, out: &Path, inputs: &SegmentInputs) -> Result<()> {
    let weights = PipelineWeights::load(config)?;
    let map = build_map(&read_segment_inputs(inputs)?, &weights)?;
    map.save(out.join("map.segw"))?;
    println!("{} segments in {}", map.len(), out.join("map.segw").display());
    Ok(())
}

fn cmd_localize(config: &PipelineConfig, out: &Path, map: &Path, inputs: &SegmentInputs, drop: &[SemanticClass]) -> Result<bool> {
    let weights = PipelineWeights::load(config)?;
    let map = SegmentMap::load(map)?;
    let mut local = Vec::new();
    for (id, cloud) in read_segment_inputs(inputs)? {
        if let Some(d) = describe_cloud(&cloud, &weights)? {
            local.push(LocalSegment {
                id,
                centroid: d.centroid,
                descriptor: d.descriptor,
                class: d.class,
            });
        }
    }
    let mut drop_set: BTreeSet<SemanticClass> = config.localization.drop_classes.clone();
    drop_set.extend(drop.iter().copied());
    let result = localize(&local, &map, &config.retrieval, &drop_set, config.seed)?;
    write_json(out.join("localization.json"), &result)?;
    match &result {
        Some(r) => println!("localized with {} inliers, rms {:.3} m", r.inliers.len(), r.residual_rms),
        None => println!("no localization"),
    }
    Ok(result.is_some())
}

fn cmd_slam(mut config: PipelineConfig, out: &Path, synthetic: Option<Scenario>) -> Result<()> {
    if let Some(s) = synthetic {
        let seed = config.seed;
        config = PipelineConfig::synthetic(s);
        config.seed = seed;
    }
    let report = run_slam(&config)?;
    write_slam_outputs(&report, out)?;
    println!("{}", serde_json::to_string_pretty(&report.stats)?);
    Ok(())
}

fn cmd_reconstruct(config: &PipelineConfig, out: &Path, inputs: &SegmentInputs) -> Result<()> {
    let weights = PipelineWeights::load(config)?;
    let decoder = match &weights.decoder {
        Some(w) => w.clone(),
        None => {
            log::warn!("no decoder weights configured; using seeded random decoder weights");
            NetworkWeights::random(Architecture::Decoder, config.seed)
        }
    };
    let threshold = config.evaluation.reconstruction_threshold;
    let mut rows = Vec::new();
    for (id, cloud) in read_segment_inputs(inputs)? {
        let Some(d) = describe_cloud(&cloud, &weights)? else {
            log::warn!("segment {id} is degenerate; skipped");
            continue;
        };
        let grid = decode(&d.descriptor, &decoder, d.input.voxel_sides)?;
        marching_cubes(&grid, threshold)?.write_obj(out.join(format!("{id}.obj")))?;
        let ratio = correspondence_ratio(&d.input, &grid, threshold).ok();
        rows.push(json!({ "id": id, "correspondence_ratio": ratio }));
    }
    write_json(out.join("reconstruction.json"), &rows)?;
    Ok(())
}

fn cmd_stats(out: &Path, map: &Path) -> Result<()> {
    let map = SegmentMap::load(map)?;
    let stats: CompressionStats = compression_stats(&map, None);
    let mut classes = serde_json::Map::new();
    for c in SemanticClass::ALL {
        classes.insert(c.to_string(), json!(map.entries().filter(|e| e.class == c).count()));
    }
    let summary = json!({
        "segments": stats.segments,
        "descriptor": map.variant(),
        "raw_bytes": stats.raw_bytes,
        "descriptor_bytes": stats.descriptor_bytes,
        "final_map_size_with_the_segmap_descriptor_kb": stats.descriptor_bytes / 1000.0,
        "compression_ratio": stats.ratio,
        "classes": classes,
    });
    write_json(out.join("map_stats.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_weights(config: &PipelineConfig, out: &Path, cmd: &WeightsCommand) -> Result<()> {
    match cmd {
        WeightsCommand::Init { arch, out: path } => {
            let arch = Architecture::from_id(arch)?;
            let path = path.clone().unwrap_or_else(|| out.join(format!("{}.segw", arch.id())));
            NetworkWeights::random(arch, config.seed).save(&path)?;
            println!("{} weights written to {}", arch.id(), path.display());
        }
        WeightsCommand::Inspect { path } => {
            let w = NetworkWeights::load(path)?;
            let arch = w.architecture();
            println!("{} ({} parameters)", arch.id(), arch.parameter_count());
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let config = load_config(cli)?;
    let out = cli.output_dir.as_path();
    match &cli.command {
        Command::Segment { scans, poses } => cmd_segment(&config, out, scans, poses)?,
        Command::Describe(inputs) => cmd_describe(&config, out, inputs)?,
        Command::BuildMap(inputs) => cmd_build_map(&config, out, inputs)?,
        Command::Localize { map, inputs, drop } => return cmd_localize(&config, out, map, inputs, drop),
        Command::Slam { synthetic } => cmd_slam(config, out, *synthetic)?,
        Command::Reconstruct { inputs } => cmd_reconstruct(&config, out, inputs)?,
        Command::Eval { mode } => println!("{}", serde_json::to_string_pretty(&run_eval(&config, *mode, out)?)?),
        Command::GtGen => println!("{}", serde_json::to_string_pretty(&run_eval(&config, EvalMode::GtGen, out)?)?),
        Command::Stats { map } => cmd_stats(out, map)?,
        Command::Weights(cmd) => cmd_weights(&config, out, cmd)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
