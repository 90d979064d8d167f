//! Procedural worlds of boxes and cylinders on a ground plane, with robot
//! trajectories, simulated scans and noisy odometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, SE3Transform};
use crate::linalg::Vector3;
use crate::semantics::SemanticClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Two streets crossing at the origin. One robot drives east along the
    /// first; the other comes down the second and turns west onto the first.
    #[default]
    Intersection,
    /// One robot driving a figure-eight twice through its crossing.
    FigureEight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub scenario: Scenario,
    pub objects: usize,
    /// Half length of each street, or lobe radius of the figure-eight, meters.
    pub extent: f64,
    /// Distance between consecutive scans, meters.
    pub step: f64,
    pub sensor_range: f64,
    /// Object surface samples per square meter and scan.
    pub surface_density: f64,
    /// Ground samples per square meter and scan.
    pub ground_density: f64,
    pub point_noise: f64,
    /// Per-step standard deviation of odometry translation noise, meters.
    pub odometry_sigma_translation: f64,
    /// Per-step standard deviation of odometry yaw noise, radians.
    pub odometry_sigma_rotation: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Intersection,
            objects: 40,
            extent: 36.0,
            step: 2.0,
            sensor_range: 20.0,
            surface_density: 6.0,
            ground_density: 0.4,
            point_noise: 0.01,
            odometry_sigma_translation: 0.01,
            odometry_sigma_rotation: 0.001,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("extent", self.extent),
            ("step", self.step),
            ("sensor_range", self.sensor_range),
            ("surface_density", self.surface_density),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("synthetic.{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("ground_density", self.ground_density),
            ("point_noise", self.point_noise),
            ("odometry_sigma_translation", self.odometry_sigma_translation),
            ("odometry_sigma_rotation", self.odometry_sigma_rotation),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("synthetic.{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Box standing on the ground, rotated by `yaw` about its vertical axis.
    Box { center: Point3<f64>, half: Vector3<f64>, yaw: f64 },
    /// Upright cylinder with its base at `base`.
    Cylinder { base: Point3<f64>, radius: f64, height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldObject {
    pub id: u64,
    pub class: SemanticClass,
    pub shape: Shape,
}

impl WorldObject {
    pub fn ground_position(&self) -> Point3<f64> {
        match self.shape {
            Shape::Box { center, .. } => Vector3::new(center.x, center.y, 0.0),
            Shape::Cylinder { base, .. } => base,
        }
    }

    /// Radius of a vertical cylinder enclosing the object.
    pub fn footprint_radius(&self) -> f64 {
        match self.shape {
            Shape::Box { half, .. } => half.x.hypot(half.y),
            Shape::Cylinder { radius, .. } => radius,
        }
    }

    /// Area of the sides and top.
    pub fn visible_area(&self) -> f64 {
        match self.shape {
            Shape::Box { half, .. } => 8.0 * half.z * (half.x + half.y) + 4.0 * half.x * half.y,
            Shape::Cylinder { radius, height, .. } => std::f64::consts::TAU * radius * height + std::f64::consts::PI * radius * radius,
        }
    }

    /// Uniform samples of the sides and top, `density` per square meter.
    pub fn sample_surface(&self, density: f64, noise: f64, rng: &mut impl Rng) -> Vec<Point3<f64>> {
        let n = (self.visible_area() * density).ceil() as usize;
        let jitter = Normal::new(0.0, noise.max(1e-12)).unwrap();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let p = match self.shape {
                Shape::Box { center, half, yaw } => {
                    let (ax, ay, top) = (4.0 * half.x * half.z, 4.0 * half.y * half.z, 4.0 * half.x * half.y);
                    let pick = rng.gen_range(0.0..2.0 * ax + 2.0 * ay + top);
                    let u = rng.gen_range(-1.0..1.0);
                    let v = rng.gen_range(-1.0..1.0);
                    let local = if pick < 2.0 * ax {
                        let side = if pick < ax { -1.0 } else { 1.0 };
                        Vector3::new(u * half.x, side * half.y, v * half.z)
                    } else if pick < 2.0 * ax + 2.0 * ay {
                        let side = if pick < 2.0 * ax + ay { -1.0 } else { 1.0 };
                        Vector3::new(side * half.x, u * half.y, v * half.z)
                    } else {
                        Vector3::new(u * half.x, v * half.y, half.z)
                    };
                    SE3Transform::rot_z(yaw).transform_point(&local) + center
                }
                Shape::Cylinder { base, radius, height } => {
                    let side = std::f64::consts::TAU * radius * height;
                    let top = std::f64::consts::PI * radius * radius;
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    if rng.gen_range(0.0..side + top) < side {
                        base + Vector3::new(radius * a.cos(), radius * a.sin(), rng.gen_range(0.0..height))
                    } else {
                        let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
                        base + Vector3::new(r * a.cos(), r * a.sin(), height)
                    }
                }
            };
            out.push(if noise > 0.0 {
                p + Vector3::new(jitter.sample(rng), jitter.sample(rng), jitter.sample(rng))
            } else {
                p
            });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: SyntheticConfig,
    pub objects: Vec<WorldObject>,
    /// Ground-truth poses per robot.
    pub trajectories: Vec<Vec<SE3Transform<f64>>>,
}

/// Ground-truth robot data for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedStream {
    pub scans: Vec<PointCloud<f64>>,
    /// Noisy increments between consecutive scans.
    pub odometry: Vec<SE3Transform<f64>>,
    pub ground_truth: Vec<SE3Transform<f64>>,
}

const ROAD_CLEARANCE: f64 = 5.0;
const OBJECT_GAP: f64 = 1.5;

fn pose_2d(x: f64, y: f64, yaw: f64) -> SE3Transform<f64> {
    let mut t = SE3Transform::rot_z(yaw);
    t.translation = Vector3::new(x, y, 0.0);
    t
}

fn trajectories(cfg: &SyntheticConfig) -> Vec<Vec<SE3Transform<f64>>> {
    match cfg.scenario {
        Scenario::Intersection => {
            let n = (2.0 * cfg.extent / cfg.step).floor() as usize + 1;
            let east = (0..n).map(|i| pose_2d(-cfg.extent + i as f64 * cfg.step, 0.0, 0.0)).collect();
            // South down the cross street, then west along the first robot's street.
            let south_west = (0..n)
                .map(|i| {
                    let s = i as f64 * cfg.step;
                    if s < cfg.extent {
                        pose_2d(0.0, cfg.extent - s, -std::f64::consts::FRAC_PI_2)
                    } else {
                        pose_2d(cfg.extent - s, 0.0, std::f64::consts::PI)
                    }
                })
                .collect();
            vec![east, south_west]
        }
        Scenario::FigureEight => {
            // Gerono lemniscate x = a sin t, y = a sin t cos t, resampled by arc length.
            let a = cfg.extent;
            let curve = |t: f64| Vector3::new(a * t.sin(), a * t.sin() * t.cos(), 0.0);
            let fine = 20_000;
            let laps = 1.25;
            let mut poses = Vec::new();
            let mut travelled = 0.0;
            let mut next = 0.0;
            let mut prev = curve(0.0);
            for k in 0..=fine {
                let t = laps * std::f64::consts::TAU * k as f64 / fine as f64;
                let p = curve(t);
                travelled += (p - prev).norm();
                if travelled >= next {
                    let ahead = curve(t + 1e-4) - p;
                    poses.push(pose_2d(p.x, p.y, ahead.y.atan2(ahead.x)));
                    next += cfg.step;
                }
                prev = p;
            }
            vec![poses]
        }
    }
}

fn clearance_to_paths(p: &Point3<f64>, paths: &[Vec<SE3Transform<f64>>]) -> f64 {
    paths
        .iter()
        .flatten()
        .map(|t| (t.translation.x - p.x).hypot(t.translation.y - p.y))
        .fold(f64::INFINITY, f64::min)
}

fn random_object(id: u64, at: Point3<f64>, rng: &mut ChaCha8Rng) -> WorldObject {
    let yaw = rng.gen_range(0.0..std::f64::consts::PI);
    let roll = rng.gen_range(0.0..1.0);
    let (class, shape) = if roll < 0.3 {
        let half = Vector3::new(rng.gen_range(2.0..2.4), rng.gen_range(0.85..1.0), rng.gen_range(0.7..0.8));
        (SemanticClass::Vehicle, Shape::Box { center: at + Vector3::new(0.0, 0.0, half.z), half, yaw })
    } else if roll < 0.55 {
        let half = Vector3::new(rng.gen_range(1.5..3.0), rng.gen_range(1.5..3.0), rng.gen_range(1.5..3.0));
        (SemanticClass::Building, Shape::Box { center: at + Vector3::new(0.0, 0.0, half.z), half, yaw })
    } else if roll < 0.8 {
        (
            SemanticClass::Other,
            Shape::Cylinder {
                base: at,
                radius: rng.gen_range(0.3..0.8),
                height: rng.gen_range(2.0..5.0),
            },
        )
    } else {
        let half = Vector3::new(rng.gen_range(0.4..1.2), rng.gen_range(0.4..1.2), rng.gen_range(0.5..1.5));
        (SemanticClass::Other, Shape::Box { center: at + Vector3::new(0.0, 0.0, half.z), half, yaw })
    };
    WorldObject { id, class, shape }
}

impl SyntheticWorld {
    pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let paths = trajectories(cfg);
        let reach = cfg.extent + 0.6 * cfg.sensor_range;
        let mut objects: Vec<WorldObject> = Vec::with_capacity(cfg.objects);
        let mut attempts = 0;
        while objects.len() < cfg.objects {
            attempts += 1;
            if attempts > 10_000 * cfg.objects.max(1) {
                return Err(Error::Config(format!("could not place {} objects in the synthetic world", cfg.objects)));
            }
            let at = Vector3::new(rng.gen_range(-reach..reach), rng.gen_range(-reach..reach), 0.0);
            let obj = random_object(objects.len() as u64, at, &mut rng);
            let r = obj.footprint_radius();
            let clearance = clearance_to_paths(&at, &paths);
            if clearance < ROAD_CLEARANCE + r || clearance > 0.6 * cfg.sensor_range {
                continue;
            }
            let crowded = objects
                .iter()
                .any(|o| (o.ground_position() - at).norm() < o.footprint_radius() + r + OBJECT_GAP);
            if !crowded {
                objects.push(obj);
            }
        }
        Ok(Self {
            config: cfg.clone(),
            objects,
            trajectories: paths,
        })
    }

    /// Points seen from `pose`, in the sensor frame: every object whose base
    /// lies within sensor range, plus the ground disk around the sensor.
    pub fn scan(&self, pose: &SE3Transform<f64>, rng: &mut impl Rng) -> PointCloud<f64> {
        let cfg = &self.config;
        let origin = pose.translation;
        let mut world = Vec::new();
        for o in &self.objects {
            let g = o.ground_position();
            if (g.x - origin.x).hypot(g.y - origin.y) <= cfg.sensor_range {
                world.extend(o.sample_surface(cfg.surface_density, cfg.point_noise, rng));
            }
        }
        let r = cfg.sensor_range;
        let n_ground = (std::f64::consts::PI * r * r * cfg.ground_density).round() as usize;
        let noise = Normal::new(0.0, cfg.point_noise.max(1e-12)).unwrap();
        for _ in 0..n_ground {
            let rad = r * rng.gen_range(0.0f64..1.0).sqrt();
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let z = if cfg.point_noise > 0.0 { noise.sample(rng) } else { 0.0 };
            world.push(Vector3::new(origin.x + rad * a.cos(), origin.y + rad * a.sin(), z));
        }
        let inv = pose.inverse();
        PointCloud::new(world.iter().map(|p| inv.transform_point(p)).collect())
    }

    /// Scans and noisy odometry for every robot, from one seed.
    pub fn simulate(&self, seed: u64) -> Vec<SimulatedStream> {
        let cfg = &self.config;
        self.trajectories
            .iter()
            .enumerate()
            .map(|(r, gt)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + r as u64));
                let scans = gt.iter().map(|p| self.scan(p, &mut rng)).collect();
                let odometry = gt
                    .windows(2)
                    .map(|w| {
                        let exact = w[0].inverse().compose(&w[1]);
                        let gauss = |s: f64, rng: &mut ChaCha8Rng| if s > 0.0 { Normal::new(0.0, s).unwrap().sample(rng) } else { 0.0 };
                        let xi = [
                            0.0,
                            0.0,
                            gauss(cfg.odometry_sigma_rotation, &mut rng),
                            gauss(cfg.odometry_sigma_translation, &mut rng),
                            gauss(cfg.odometry_sigma_translation, &mut rng),
                            0.0,
                        ];
                        exact.compose(&SE3Transform::exp(&xi))
                    })
                    .collect();
                SimulatedStream {
                    scans,
                    odometry,
                    ground_truth: gt.clone(),
                }
            })
            .collect()
    }

    /// Two independent full-surface samplings per object, ids `2k` and
    /// `2k + 1`, in the world frame.
    pub fn paired_segments(&self, density: f64, seed: u64) -> Vec<(u64, SemanticClass, PointCloud<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(2 * self.objects.len());
        for o in &self.objects {
            for copy in 0..2 {
                let pts = o.sample_surface(density, self.config.point_noise, &mut rng);
                out.push((2 * o.id + copy, o.class, PointCloud::new(pts)));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objects_keep_clear_of_roads_and_each_other() {
        let cfg = SyntheticConfig::default();
        let w = SyntheticWorld::generate(&cfg, 1).unwrap();
        assert_eq!(w.objects.len(), cfg.objects);
        assert_eq!(w.trajectories.len(), 2);
        for (i, a) in w.objects.iter().enumerate() {
            assert!(clearance_to_paths(&a.ground_position(), &w.trajectories) >= ROAD_CLEARANCE);
            for b in &w.objects[i + 1..] {
                let d = (a.ground_position() - b.ground_position()).norm();
                assert!(d >= a.footprint_radius() + b.footprint_radius() + OBJECT_GAP - 1e-9);
            }
        }
        assert_eq!(w, SyntheticWorld::generate(&cfg, 1).unwrap());
    }

    #[test]
    fn scan_is_in_sensor_frame() {
        let cfg = SyntheticConfig {
            point_noise: 0.0,
            ..Default::default()
        };
        let w = SyntheticWorld::generate(&cfg, 2).unwrap();
        let pose = w.trajectories[1][10];
        let scan = w.scan(&pose, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(!scan.is_empty());
        for p in scan.iter() {
            let q = pose.transform_point(p);
            assert!(q.z > -1e-9);
            assert!((q.x - pose.translation.x).hypot(q.y - pose.translation.y) <= cfg.sensor_range + 5.0);
        }
    }

    #[test]
    fn box_samples_lie_on_the_surface() {
        let o = WorldObject {
            id: 0,
            class: SemanticClass::Building,
            shape: Shape::Box {
                center: Vector3::new(1.0, 2.0, 1.0),
                half: Vector3::new(2.0, 1.0, 1.0),
                yaw: 0.0,
            },
        };
        let pts = o.sample_surface(50.0, 0.0, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(pts.len(), (o.visible_area() * 50.0).ceil() as usize);
        for p in pts {
            let l = p - Vector3::new(1.0, 2.0, 1.0);
            let on = (l.x.abs() - 2.0).abs() < 1e-9 || (l.y.abs() - 1.0).abs() < 1e-9 || (l.z - 1.0).abs() < 1e-9;
            assert!(on && l.x.abs() <= 2.0 + 1e-9 && l.y.abs() <= 1.0 + 1e-9 && l.z.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn noiseless_odometry_integrates_to_ground_truth() {
        let cfg = SyntheticConfig {
            scenario: Scenario::FigureEight,
            objects: 10,
            odometry_sigma_translation: 0.0,
            odometry_sigma_rotation: 0.0,
            ..Default::default()
        };
        let w = SyntheticWorld::generate(&cfg, 4).unwrap();
        let s = &w.simulate(4)[0];
        let mut pose = s.ground_truth[0];
        for (k, d) in s.odometry.iter().enumerate() {
            pose = pose.compose(d);
            assert!((pose.translation - s.ground_truth[k + 1].translation).norm() < 1e-9);
        }
    }
}
