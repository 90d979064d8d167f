use std::path::Path;
use std::process::{Command, Output};

use segmap::evaluation::descriptor_wire_bytes;
use segmap::localization::SegmentMap;

fn segmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segmap")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gt_gen_build_map_and_compression_agree_with_hand_formula() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), r#"{"seed": 5, "synthetic": {"objects": 6}}"#);
    let o = segmap(&["--config", &cfg, "--output-dir", s(&out), "gt-gen"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("correspondences.csv")).unwrap();
    assert!(csv.starts_with("id_a,id_b,overlap\n"));
    assert_eq!(csv.lines().count(), 7);

    let o = segmap(&["--config", &cfg, "--output-dir", s(&out), "build-map", s(&out.join("segments"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let map_path = out.join("map.segw");
    let map = SegmentMap::load(&map_path).unwrap();
    assert_eq!(map.len(), 12);

    let cfg = write_config(dir.path(), &format!(r#"{{"inputs": {{"map": "{}"}}}}"#, s(&map_path)));
    let o = segmap(&["--config", &cfg, "--output-dir", s(&out), "eval", "compression"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("compression.json")).unwrap()).unwrap();
    let points: usize = map.entries().map(|e| e.point_count).sum();
    let expected = points as f64 * 12.0 / (12.0 * descriptor_wire_bytes(map.variant().dimension()));
    assert!((json["ratio"].as_f64().unwrap() - expected).abs() < 1e-9);
}

#[test]
fn eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 9, "synthetic": {"objects": 6}}"#);
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let o = segmap(&["--config", &cfg, "--output-dir", s(&out), "eval", "roc"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push((std::fs::read(out.join("roc.csv")).unwrap(), std::fs::read(out.join("roc.json")).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn missing_inputs_name_the_mode() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["roc", "knn-curve", "recon-table", "compression", "loc-cdf", "gt-gen"] {
        let o = segmap(&["--output-dir", s(dir.path()), "eval", mode]);
        assert!(!o.status.success());
        assert!(String::from_utf8_lossy(&o.stderr).contains(mode), "{mode}");
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"segmenter": {"min_points": 3}}"#);
    let o = segmap(&["--config", &cfg, "--output-dir", s(dir.path()), "gt-gen"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("min_points"));
}

#[test]
fn empty_stream_succeeds_with_empty_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let poses = dir.path().join("poses.txt");
    std::fs::write(&poses, "").unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(r#"{{"robots": [{{"name": "a", "scans": [], "poses": "{}"}}]}}"#, s(&poses)),
    );
    let out = dir.path().join("out");
    let o = segmap(&["--config", &cfg, "--output-dir", s(&out), "slam"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no scans"));
    assert_eq!(std::fs::read_to_string(out.join("trajectory.txt")).unwrap(), "");
    assert_eq!(SegmentMap::load(out.join("map.segw")).unwrap().len(), 0);
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["number_of_successful_localizations"], 0);
}

#[test]
fn truncated_scan_reports_the_offset() {
    let dir = tempfile::tempdir().unwrap();
    let scan = dir.path().join("000.bin");
    std::fs::write(&scan, [0u8; 17]).unwrap();
    let poses = dir.path().join("poses.txt");
    std::fs::write(&poses, "1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
    let o = segmap(&["--output-dir", s(dir.path()), "segment", s(&scan), "--poses", s(&poses)]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("offset 16"), "{err}");
}

#[test]
fn segment_then_localize_against_own_map() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), r#"{"seed": 2, "synthetic": {"objects": 8}}"#);
    let o = segmap(&["--config", &cfg, "--output-dir", s(&out), "gt-gen"]);
    assert!(o.status.success());
    let segs = out.join("segments");
    let o = segmap(&["--config", &cfg, "--output-dir", s(&out), "build-map", s(&segs)]);
    assert!(o.status.success());
    let o = segmap(&["--config", &cfg, "--output-dir", s(&out), "localize", "--map", s(&out.join("map.segw")), s(&segs)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let loc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("localization.json")).unwrap()).unwrap();
    assert!(loc["residual_rms"].as_f64().unwrap() < 1e-3);
}

#[test]
fn weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let o = segmap(&["--output-dir", s(dir.path()), "weights", "init", "--arch", "segmini-v1"]);
    assert!(o.status.success());
    let o = segmap(&["weights", "inspect", s(&dir.path().join("segmini-v1.segw"))]);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("segmini-v1"));
    let o = segmap(&["weights", "init", "--arch", "nope"]);
    assert!(!o.status.success());
}

#[test]
fn committed_configs_parse() {
    use segmap::pipeline::{PipelineConfig, Scenario};
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        PipelineConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 8);
    for (file, scenario) in [("slam_intersection.json", Scenario::Intersection), ("slam_figure_eight.json", Scenario::FigureEight)] {
        assert_eq!(PipelineConfig::load(dir.join(file)).unwrap(), PipelineConfig::synthetic(scenario));
    }
}
