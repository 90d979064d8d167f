//! Scan, pose and artifact file I/O.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, SE3Transform};
use crate::linalg::Vector3;

/// Rotation drift above which parsed poses are re-orthonormalized.
pub const POSE_DRIFT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanFormat {
    /// One `x y z` line per point.
    XyzText,
    /// Little-endian `f32` quadruples `x y z intensity`.
    VelodyneBin,
}

impl ScanFormat {
    /// `.bin` is Velodyne, anything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => Self::VelodyneBin,
            _ => Self::XyzText,
        }
    }
}

impl FromStr for ScanFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz-text" => Ok(Self::XyzText),
            "velodyne-bin" => Ok(Self::VelodyneBin),
            _ => Err(Error::InvalidParameter(format!("unknown scan format `{s}`"))),
        }
    }
}

pub fn read_scan(path: impl AsRef<Path>, format: ScanFormat) -> Result<PointCloud<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        ScanFormat::XyzText => parse_xyz(&String::from_utf8_lossy(&bytes), path),
        ScanFormat::VelodyneBin => parse_velodyne(&bytes, path),
    }
}

fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud<f64>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_floats(line, 3, path, i + 1)?;
        let p = Vector3::new(v[0], v[1], v[2]);
        if !p.is_finite() {
            return Err(parse_error(path, i + 1, "non-finite coordinate"));
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

fn parse_velodyne(bytes: &[u8], path: &Path) -> Result<PointCloud<f64>> {
    if bytes.len() % 16 != 0 {
        return Err(Error::TruncatedRecord {
            path: path.to_path_buf(),
            offset: bytes.len() / 16 * 16,
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f64::from(f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()));
        let p = Vector3::new(f(0), f(1), f(2));
        if !p.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "non-finite coordinate in record".into(),
            });
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_floats(line: &str, n: usize, path: &Path, lineno: usize) -> Result<Vec<f64>> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != n {
        return Err(parse_error(path, lineno, format!("expected {n} values, found {}", tokens.len())));
    }
    tokens
        .iter()
        .map(|t| t.parse::<f64>().map_err(|_| parse_error(path, lineno, format!("invalid number `{t}`"))))
        .collect()
}

pub fn scan_to_xyz(cloud: &PointCloud<f64>) -> String {
    let mut s = String::new();
    for p in cloud.iter() {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

pub fn scan_to_velodyne(cloud: &PointCloud<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.iter() {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_scan(path: impl AsRef<Path>, cloud: &PointCloud<f64>, format: ScanFormat) -> Result<()> {
    match format {
        ScanFormat::XyzText => write_atomic(path, scan_to_xyz(cloud).as_bytes()),
        ScanFormat::VelodyneBin => write_atomic(path, &scan_to_velodyne(cloud)),
    }
}

/// Parses one 12-float row-major `[R|t]` pose per line. Rotations that drift
/// from orthonormal are projected back and reported in the second vector.
pub fn parse_poses(text: &str, path: &Path) -> Result<(Vec<SE3Transform<f64>>, Vec<usize>)> {
    let mut poses = Vec::new();
    let mut fixed = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_floats(line, 12, path, i + 1)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(parse_error(path, i + 1, "non-finite pose value"));
        }
        let mut t = SE3Transform::from_row_major_3x4(&v.try_into().unwrap());
        if t.orthonormality_error() > POSE_DRIFT_TOLERANCE {
            t = t.reorthonormalized();
            fixed.push(i + 1);
        }
        poses.push(t);
    }
    Ok((poses, fixed))
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<SE3Transform<f64>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (poses, fixed) = parse_poses(&text, path)?;
    if !fixed.is_empty() {
        log::warn!("{}: re-orthonormalized rotations on lines {:?}", path.display(), fixed);
    }
    Ok(poses)
}

pub fn poses_to_string(poses: &[SE3Transform<f64>]) -> String {
    let mut s = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major_3x4().iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn write_poses(path: impl AsRef<Path>, poses: &[SE3Transform<f64>]) -> Result<()> {
    write_atomic(path, poses_to_string(poses).as_bytes())
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<S: Serialize>(path: impl AsRef<Path>, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Segment cloud as exchanged with the training tools: xyz text, or Velodyne
/// records for `.bin` paths.
pub fn write_segment(path: impl AsRef<Path>, points: &[Point3<f64>]) -> Result<()> {
    let path = path.as_ref();
    write_scan(path, &PointCloud::new(points.to_vec()), ScanFormat::from_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_and_hand_built_scans() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("e.bin");
        std::fs::write(&empty, b"").unwrap();
        assert!(read_scan(&empty, ScanFormat::VelodyneBin).unwrap().is_empty());
        std::fs::write(dir.path().join("e.xyz"), b"").unwrap();
        assert!(read_scan(dir.path().join("e.xyz"), ScanFormat::XyzText).unwrap().is_empty());

        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let one = dir.path().join("one.bin");
        std::fs::write(&one, &bytes).unwrap();
        let c = read_scan(&one, ScanFormat::VelodyneBin).unwrap();
        assert_eq!(c.points, vec![Vector3::new(1.0, 2.0, 3.0)]);

        bytes.push(0);
        std::fs::write(&one, &bytes).unwrap();
        assert!(matches!(read_scan(&one, ScanFormat::VelodyneBin), Err(Error::TruncatedRecord { offset: 16, .. })));
    }

    #[test]
    fn xyz_errors_name_the_line() {
        let p = Path::new("scan.xyz");
        assert_eq!(parse_xyz("1 2 3\n\n4 5 6\n", p).unwrap().len(), 2);
        match parse_xyz("1 2 3\n4 5\n", p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_xyz("1 x 3\n", p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn poses_identity_and_token_count() {
        let p = Path::new("poses.txt");
        let (poses, fixed) = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n", p).unwrap();
        assert_eq!(poses, vec![SE3Transform::identity()]);
        assert!(fixed.is_empty());
        assert!(matches!(parse_poses("1 0 0 0 0 1 0 0 0 0 1\n", p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn drifted_rotation_is_repaired_and_flagged() {
        let (poses, fixed) = parse_poses("1.001 0 0 0 0 1 0 0 0 0 1 0\n", Path::new("p")).unwrap();
        assert_eq!(fixed, vec![1]);
        assert!(poses[0].orthonormality_error() < 1e-12);
    }

    #[test]
    fn pose_and_scan_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let poses: Vec<SE3Transform<f64>> = (0..20)
            .map(|_| SE3Transform::exp(&std::array::from_fn(|_| rng.gen_range(-3.0..3.0))))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/poses.txt");
        write_poses(&path, &poses).unwrap();
        let back = read_poses(&path).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert!(a.rotation.max_abs_diff(&b.rotation) < 1e-9);
            assert!((a.translation - b.translation).norm() < 1e-9);
        }

        let cloud = PointCloud::new((0..50).map(|_| Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))).collect());
        let xyz = dir.path().join("c.xyz");
        write_scan(&xyz, &cloud, ScanFormat::XyzText).unwrap();
        assert_eq!(read_scan(&xyz, ScanFormat::XyzText).unwrap(), cloud);
        let bin = dir.path().join("c.bin");
        write_segment(&bin, &cloud.points).unwrap();
        let back = read_scan(&bin, ScanFormat::from_path(&bin)).unwrap();
        for (a, b) in cloud.iter().zip(back.iter()) {
            assert!((*a - *b).norm() < 1e-5);
        }
    }
}
