//! SE(3) pose graph with odometry, loop-closure and prior factors, solved by
//! Levenberg–Marquardt.
//!
//! Poses are perturbed on the left, `T ← exp(δ) · T`, with `δ = [φ; ρ]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mat6_mul, se3_right_jacobian_inv, Matrix6, SE3Transform, Tangent6};
use crate::linalg::DenseMatrix;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeKey {
    pub robot: u32,
    pub index: u32,
}

impl NodeKey {
    pub fn new(robot: u32, index: u32) -> Self {
        Self { robot, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorKind {
    Odometry,
    LoopClosure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor<T> {
    pub kind: FactorKind,
    pub from: NodeKey,
    pub to: NodeKey,
    /// Expected `T_from⁻¹ · T_to`.
    pub measurement: SE3Transform<T>,
    pub information: Matrix6<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prior<T> {
    pub node: NodeKey,
    pub measurement: SE3Transform<T>,
    pub information: Matrix6<T>,
}

/// Diagonal information from rotation and translation standard deviations.
pub fn isotropic_information<T: Real>(sigma_rotation: f64, sigma_translation: f64) -> Matrix6<T> {
    let mut m = [[T::zero(); 6]; 6];
    for i in 0..3 {
        m[i][i] = T::lit(1.0 / (sigma_rotation * sigma_rotation));
        m[i + 3][i + 3] = T::lit(1.0 / (sigma_translation * sigma_translation));
    }
    m
}

fn check_information<T: Real>(info: &Matrix6<T>) -> Result<()> {
    let d = DenseMatrix::from_row_slice(6, 6, &info.concat());
    let scale = info.iter().flatten().fold(T::zero(), |a, v| a.max(v.abs()));
    if !d.is_symmetric(T::lit(1e-9) * scale.max(T::one())) || d.cholesky().is_none() {
        return Err(Error::NonSpdInformation);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverParams {
    pub max_iterations: usize,
    /// Stop when the relative cost decrease of an accepted step is below this.
    pub tolerance: f64,
    /// Huber threshold on the Mahalanobis norm of loop-closure residuals.
    pub huber_delta: f64,
    pub initial_lambda: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-9,
            huber_delta: 1.0,
            initial_lambda: 1e-4,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.tolerance >= 0.0
            && self.huber_delta > 0.0
            && self.initial_lambda > 0.0
            && [self.tolerance, self.huber_delta, self.initial_lambda].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::Config(format!("invalid pose-graph solver parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSolution<T> {
    pub poses: BTreeMap<NodeKey, SE3Transform<T>>,
    pub initial_chi2: T,
    pub chi2: T,
    /// Cost after every accepted step, starting with the initial cost.
    pub chi2_history: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseGraph<T> {
    nodes: BTreeMap<NodeKey, SE3Transform<T>>,
    factors: Vec<Factor<T>>,
    priors: Vec<Prior<T>>,
}

impl<T: Real> PoseGraph<T> {
    pub fn new() -> Self {
        Self {
            nodes: BTreeMap::new(),
            factors: Vec::new(),
            priors: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn nodes(&self) -> &BTreeMap<NodeKey, SE3Transform<T>> {
        &self.nodes
    }

    pub fn factors(&self) -> &[Factor<T>] {
        &self.factors
    }

    pub fn priors(&self) -> &[Prior<T>] {
        &self.priors
    }

    pub fn pose(&self, key: NodeKey) -> Option<&SE3Transform<T>> {
        self.nodes.get(&key)
    }

    pub fn add_node(&mut self, key: NodeKey, initial: SE3Transform<T>) -> Result<()> {
        if self.nodes.contains_key(&key) {
            return Err(Error::DuplicateNode {
                robot: key.robot,
                index: key.index,
            });
        }
        self.nodes.insert(key, initial);
        Ok(())
    }

    fn require(&self, key: NodeKey) -> Result<&SE3Transform<T>> {
        self.nodes.get(&key).ok_or(Error::MissingNode {
            robot: key.robot,
            index: key.index,
        })
    }

    pub fn add_factor(&mut self, factor: Factor<T>) -> Result<()> {
        self.require(factor.from)?;
        self.require(factor.to)?;
        check_information(&factor.information)?;
        self.factors.push(factor);
        Ok(())
    }

    pub fn add_prior(&mut self, prior: Prior<T>) -> Result<()> {
        self.require(prior.node)?;
        check_information(&prior.information)?;
        self.priors.push(prior);
        Ok(())
    }

    /// Adds an odometry factor `from → to`, creating `to` by dead reckoning
    /// when it does not exist yet.
    pub fn add_odometry(&mut self, from: NodeKey, to: NodeKey, measurement: SE3Transform<T>, information: Matrix6<T>) -> Result<()> {
        let start = *self.require(from)?;
        if !self.nodes.contains_key(&to) {
            self.nodes.insert(to, start.compose(&measurement));
        }
        self.add_factor(Factor {
            kind: FactorKind::Odometry,
            from,
            to,
            measurement,
            information,
        })
    }

    pub fn set_poses(&mut self, poses: &BTreeMap<NodeKey, SE3Transform<T>>) {
        for (k, p) in poses {
            if let Some(slot) = self.nodes.get_mut(k) {
                *slot = *p;
            }
        }
    }

    /// Every connected component must contain a prior.
    fn check_gauge(&self) -> Result<()> {
        let keys: Vec<NodeKey> = self.nodes.keys().copied().collect();
        let pos: BTreeMap<NodeKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let mut parent: Vec<usize> = (0..keys.len()).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for f in &self.factors {
            let (a, b) = (find(&mut parent, pos[&f.from]), find(&mut parent, pos[&f.to]));
            parent[a.max(b)] = a.min(b);
        }
        let mut anchored = vec![false; keys.len()];
        for p in &self.priors {
            let r = find(&mut parent, pos[&p.node]);
            anchored[r] = true;
        }
        for (i, k) in keys.iter().enumerate() {
            if !anchored[find(&mut parent, i)] {
                return Err(Error::DisconnectedGauge {
                    robot: k.robot,
                    index: k.index,
                });
            }
        }
        Ok(())
    }

    /// Robust total cost of the graph at `poses`.
    pub fn chi2(&self, poses: &BTreeMap<NodeKey, SE3Transform<T>>, huber_delta: f64) -> T {
        let mut total = T::zero();
        for f in &self.factors {
            let r = between_residual(&poses[&f.from], &poses[&f.to], &f.measurement);
            total = total + robust_cost(f.kind, mahalanobis(&r, &f.information), huber_delta).0;
        }
        for p in &self.priors {
            let r = prior_residual(&poses[&p.node], &p.measurement);
            total = total + mahalanobis(&r, &p.information);
        }
        total
    }

    pub fn optimize(&self, params: &SolverParams) -> Result<GraphSolution<T>> {
        for p in &self.priors {
            self.require(p.node)?;
        }
        self.check_gauge()?;
        let keys: Vec<NodeKey> = self.nodes.keys().copied().collect();
        let slot: BTreeMap<NodeKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let n = 6 * keys.len();
        let mut poses = self.nodes.clone();
        let mut cost = self.chi2(&poses, params.huber_delta);
        let initial = cost;
        let mut history = vec![cost];
        let mut lambda = T::lit(params.initial_lambda);
        let mut converged = n == 0;
        let mut iterations = 0;
        while !converged && iterations < params.max_iterations {
            iterations += 1;
            let (h, b) = self.normal_equations(&poses, &slot, n, params.huber_delta);
            let mut accepted = false;
            while lambda < T::lit(1e12) {
                let mut a = h.clone();
                for i in 0..n {
                    a[(i, i)] = a[(i, i)] + lambda * h[(i, i)].max(T::lit(1e-9));
                }
                let chol = a.cholesky().ok_or(Error::SingularSystem)?;
                let rhs: Vec<T> = b.iter().map(|v| -*v).collect();
                let step = chol.solve(&rhs);
                let mut trial = poses.clone();
                for (k, i) in &slot {
                    let d: Tangent6<T> = std::array::from_fn(|c| step[6 * i + c]);
                    let p = trial.get_mut(k).unwrap();
                    *p = SE3Transform::exp(&d).compose(p);
                }
                let trial_cost = self.chi2(&trial, params.huber_delta);
                if trial_cost < cost {
                    let rel = (cost - trial_cost) / cost.max(T::min_positive_value());
                    poses = trial;
                    cost = trial_cost;
                    history.push(cost);
                    lambda = (lambda * T::lit(0.1)).max(T::lit(1e-12));
                    accepted = true;
                    let step_norm = step.iter().fold(T::zero(), |a, v| a.max(v.abs()));
                    if rel < T::lit(params.tolerance) || cost < T::lit(1e-24) || step_norm < T::lit(1e-14) {
                        converged = true;
                    }
                    break;
                }
                lambda = lambda * T::lit(10.0);
            }
            if !accepted {
                // No decrease possible at any damping: at a minimum up to rounding.
                converged = true;
            }
        }
        Ok(GraphSolution {
            poses,
            initial_chi2: initial,
            chi2: cost,
            chi2_history: history,
            iterations,
            converged,
        })
    }

    fn normal_equations(
        &self,
        poses: &BTreeMap<NodeKey, SE3Transform<T>>,
        slot: &BTreeMap<NodeKey, usize>,
        n: usize,
        huber_delta: f64,
    ) -> (DenseMatrix<T>, Vec<T>) {
        let mut h = DenseMatrix::zeros(n, n);
        let mut b = vec![T::zero(); n];
        let mut add = |blocks: &[(usize, Matrix6<T>)], r: &Tangent6<T>, info: &Matrix6<T>, w: T| {
            for (bi, ji) in blocks {
                let jt_info = mat6_mul(&transpose6(ji), info);
                for (bj, jj) in blocks {
                    let blk = mat6_mul(&jt_info, jj);
                    for rr in 0..6 {
                        for cc in 0..6 {
                            let e = &mut h[(6 * bi + rr, 6 * bj + cc)];
                            *e = *e + w * blk[rr][cc];
                        }
                    }
                }
                for rr in 0..6 {
                    let g = (0..6).fold(T::zero(), |a, k| a + jt_info[rr][k] * r[k]);
                    b[6 * bi + rr] = b[6 * bi + rr] + w * g;
                }
            }
        };
        for f in &self.factors {
            let (r, ji, jj) = between_jacobians(&poses[&f.from], &poses[&f.to], &f.measurement);
            let (_, w) = robust_cost(f.kind, mahalanobis(&r, &f.information), huber_delta);
            add(&[(slot[&f.from], ji), (slot[&f.to], jj)], &r, &f.information, w);
        }
        for p in &self.priors {
            let (r, j) = prior_jacobian(&poses[&p.node], &p.measurement);
            add(&[(slot[&p.node], j)], &r, &p.information, T::one());
        }
        (h, b)
    }
}

fn transpose6<T: Real>(m: &Matrix6<T>) -> Matrix6<T> {
    std::array::from_fn(|r| std::array::from_fn(|c| m[c][r]))
}

fn mahalanobis<T: Real>(r: &Tangent6<T>, info: &Matrix6<T>) -> T {
    let mut s = T::zero();
    for i in 0..6 {
        for j in 0..6 {
            s = s + r[i] * info[i][j] * r[j];
        }
    }
    s
}

/// Robust cost of squared norm `e2` and its IRLS weight. Only loop closures
/// are robustified.
fn robust_cost<T: Real>(kind: FactorKind, e2: T, delta: f64) -> (T, T) {
    let d = T::lit(delta);
    let e = e2.sqrt();
    if kind == FactorKind::LoopClosure && e > d {
        (T::lit(2.0) * d * e - d * d, d / e)
    } else {
        (e2, T::one())
    }
}

/// `log(Z⁻¹ · Tᵢ⁻¹ · Tⱼ)`.
pub fn between_residual<T: Real>(ti: &SE3Transform<T>, tj: &SE3Transform<T>, z: &SE3Transform<T>) -> Tangent6<T> {
    z.inverse().compose(&ti.inverse()).compose(tj).log()
}

/// Residual with its Jacobians with respect to left perturbations of `Tᵢ`
/// and `Tⱼ`.
pub fn between_jacobians<T: Real>(
    ti: &SE3Transform<T>,
    tj: &SE3Transform<T>,
    z: &SE3Transform<T>,
) -> (Tangent6<T>, Matrix6<T>, Matrix6<T>) {
    let r = between_residual(ti, tj, z);
    let jj = mat6_mul(&se3_right_jacobian_inv(&r), &tj.inverse().adjoint());
    let ji = jj.map(|row| row.map(|v| -v));
    (r, ji, jj)
}

/// `log(Z⁻¹ · T)`.
pub fn prior_residual<T: Real>(t: &SE3Transform<T>, z: &SE3Transform<T>) -> Tangent6<T> {
    z.inverse().compose(t).log()
}

pub fn prior_jacobian<T: Real>(t: &SE3Transform<T>, z: &SE3Transform<T>) -> (Tangent6<T>, Matrix6<T>) {
    let r = prior_residual(t, z);
    (r, mat6_mul(&se3_right_jacobian_inv(&r), &t.inverse().adjoint()))
}

/// One line per node: `robot index r11 r12 r13 tx r21 r22 r23 ty r31 r32 r33 tz`.
pub fn format_trajectory<T: Real>(poses: &BTreeMap<NodeKey, SE3Transform<T>>) -> String {
    let mut s = String::new();
    for (k, p) in poses {
        let _ = write!(s, "{} {}", k.robot, k.index);
        for v in p.to_row_major_3x4() {
            let _ = write!(s, " {:e}", v.as_f64());
        }
        s.push('\n');
    }
    s
}

pub fn write_trajectory<T: Real>(poses: &BTreeMap<NodeKey, SE3Transform<T>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_trajectory(poses)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> SE3Transform<f64> {
        let xi: [f64; 6] = std::array::from_fn(|i| if i < 3 { rng.gen_range(-rot..rot) } else { rng.gen_range(-trans..trans) });
        SE3Transform::exp(&xi)
    }

    fn info() -> Matrix6<f64> {
        isotropic_information(0.02, 0.1)
    }

    fn perturbed(t: &SE3Transform<f64>, k: usize, h: f64) -> SE3Transform<f64> {
        let mut d = [0.0; 6];
        d[k] = h;
        SE3Transform::exp(&d).compose(t)
    }

    #[test]
    fn node_bookkeeping() {
        let mut g = PoseGraph::<f64>::new();
        g.add_node(NodeKey::new(0, 0), SE3Transform::identity()).unwrap();
        assert_eq!(g.node_count(), 1);
        assert!(matches!(
            g.add_node(NodeKey::new(0, 0), SE3Transform::identity()),
            Err(Error::DuplicateNode { robot: 0, index: 0 })
        ));
        let f = Factor {
            kind: FactorKind::LoopClosure,
            from: NodeKey::new(0, 0),
            to: NodeKey::new(1, 4),
            measurement: SE3Transform::identity(),
            information: info(),
        };
        assert!(matches!(g.add_factor(f), Err(Error::MissingNode { robot: 1, index: 4 })));
        let mut bad = info();
        bad[0][1] = 5.0;
        assert!(matches!(
            g.add_prior(Prior {
                node: NodeKey::new(0, 0),
                measurement: SE3Transform::identity(),
                information: bad
            }),
            Err(Error::NonSpdInformation)
        ));
    }

    #[test]
    fn random_insertions_match_replay_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = PoseGraph::<f64>::new();
        let (mut nodes, mut factors) = (0, 0);
        let mut next = [0u32; 3];
        for _ in 0..300 {
            let robot = rng.gen_range(0..3u32);
            if next[robot as usize] == 0 {
                g.add_node(NodeKey::new(robot, 0), SE3Transform::identity()).unwrap();
                next[robot as usize] = 1;
                nodes += 1;
                continue;
            }
            if rng.gen_bool(0.8) {
                let i = next[robot as usize];
                g.add_odometry(NodeKey::new(robot, i - 1), NodeKey::new(robot, i), random_pose(&mut rng, 0.1, 1.0), info())
                    .unwrap();
                next[robot as usize] += 1;
                nodes += 1;
                factors += 1;
            } else {
                let other = rng.gen_range(0..3u32);
                let (a, b) = (next[robot as usize], next[other as usize]);
                if b == 0 {
                    continue;
                }
                let f = Factor {
                    kind: FactorKind::LoopClosure,
                    from: NodeKey::new(robot, rng.gen_range(0..a)),
                    to: NodeKey::new(other, rng.gen_range(0..b)),
                    measurement: random_pose(&mut rng, 0.1, 1.0),
                    information: info(),
                };
                g.add_factor(f).unwrap();
                factors += 1;
            }
        }
        assert_eq!((g.node_count(), g.factor_count()), (nodes, factors));
    }

    fn chain(measurements: &[SE3Transform<f64>]) -> PoseGraph<f64> {
        let mut g = PoseGraph::new();
        g.add_node(NodeKey::new(0, 0), SE3Transform::identity()).unwrap();
        g.add_prior(Prior {
            node: NodeKey::new(0, 0),
            measurement: SE3Transform::identity(),
            information: isotropic_information(1e-4, 1e-4),
        })
        .unwrap();
        for (i, m) in measurements.iter().enumerate() {
            g.add_odometry(NodeKey::new(0, i as u32), NodeKey::new(0, i as u32 + 1), *m, info()).unwrap();
        }
        g
    }

    #[test]
    fn exact_chain_is_dead_reckoning() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ms: Vec<_> = (0..4).map(|_| random_pose(&mut rng, 0.3, 2.0)).collect();
        let g = chain(&ms);
        let sol = g.optimize(&SolverParams::default()).unwrap();
        assert!(sol.chi2 < 1e-18);
        let mut dr = SE3Transform::identity();
        for (i, m) in ms.iter().enumerate() {
            dr = dr.compose(m);
            let p = sol.poses[&NodeKey::new(0, i as u32 + 1)];
            assert!((p.translation - dr.translation).norm() < 1e-9);
            assert!(p.rotation.max_abs_diff(&dr.rotation) < 1e-9);
        }
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..100 {
            let ti = random_pose(&mut rng, 1.0, 5.0);
            let tj = random_pose(&mut rng, 1.0, 5.0);
            let z = ti.inverse().compose(&tj).compose(&random_pose(&mut rng, 0.3, 0.5));
            let (_, ji, jj) = between_jacobians(&ti, &tj, &z);
            for k in 0..6 {
                let num_i: [f64; 6] = {
                    let (p, m) = (between_residual(&perturbed(&ti, k, h), &tj, &z), between_residual(&perturbed(&ti, k, -h), &tj, &z));
                    std::array::from_fn(|r| (p[r] - m[r]) / (2.0 * h))
                };
                let num_j: [f64; 6] = {
                    let (p, m) = (between_residual(&ti, &perturbed(&tj, k, h), &z), between_residual(&ti, &perturbed(&tj, k, -h), &z));
                    std::array::from_fn(|r| (p[r] - m[r]) / (2.0 * h))
                };
                for r in 0..6 {
                    for (a, n) in [(ji[r][k], num_i[r]), (jj[r][k], num_j[r])] {
                        assert!((a - n).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {n}");
                    }
                }
            }
            let (_, jp) = prior_jacobian(&tj, &z);
            for k in 0..6 {
                let (p, m) = (prior_residual(&perturbed(&tj, k, h), &z), prior_residual(&perturbed(&tj, k, -h), &z));
                for r in 0..6 {
                    let n = (p[r] - m[r]) / (2.0 * h);
                    assert!((jp[r][k] - n).abs() <= 1e-5 * jp[r][k].abs().max(1.0));
                }
            }
        }
    }

    /// Square loop of `n` unit steps with noisy odometry and one exact closure.
    fn square_loop(seed: u64, n: usize) -> (PoseGraph<f64>, Vec<SE3Transform<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = n / 4;
        let mut truth = vec![SE3Transform::identity()];
        for i in 1..n {
            let turn = if i % side == 0 { std::f64::consts::FRAC_PI_2 } else { 0.0 };
            let step = SE3Transform::new(SE3Transform::rot_z(turn).rotation, Vector3::new(1.0, 0.0, 0.0));
            truth.push(truth[i - 1].compose(&step));
        }
        let nt = Normal::new(0.0, 0.01).unwrap();
        let mut g = PoseGraph::new();
        g.add_node(NodeKey::new(0, 0), SE3Transform::identity()).unwrap();
        g.add_prior(Prior {
            node: NodeKey::new(0, 0),
            measurement: SE3Transform::identity(),
            information: isotropic_information(1e-4, 1e-4),
        })
        .unwrap();
        for i in 1..n {
            let exact = truth[i - 1].inverse().compose(&truth[i]);
            let noise: [f64; 6] = std::array::from_fn(|_| nt.sample(&mut rng));
            g.add_odometry(NodeKey::new(0, i as u32 - 1), NodeKey::new(0, i as u32), exact.compose(&SE3Transform::exp(&noise)), isotropic_information(0.01, 0.01))
                .unwrap();
        }
        let closure = truth[n - 1].inverse().compose(&truth[0]);
        g.add_factor(Factor {
            kind: FactorKind::LoopClosure,
            from: NodeKey::new(0, n as u32 - 1),
            to: NodeKey::new(0, 0),
            measurement: closure,
            information: isotropic_information(0.001, 0.001),
        })
        .unwrap();
        (g, truth)
    }

    #[test]
    fn loop_closure_halves_drift() {
        for seed in 0..5 {
            let (g, truth) = square_loop(seed, 100);
            let last = NodeKey::new(0, 99);
            let open = (g.pose(last).unwrap().translation - truth[99].translation).norm();
            let sol = g.optimize(&SolverParams::default()).unwrap();
            let closed = (sol.poses[&last].translation - truth[99].translation).norm();
            assert!(closed <= 0.5 * open, "seed {seed}: {closed} vs {open}");
            assert!(sol.chi2_history.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn solution_is_gauge_equivariant() {
        let (g, _) = square_loop(7, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_pose(&mut rng, 1.0, 10.0);
        let mut moved = PoseGraph::new();
        for (k, p) in g.nodes() {
            moved.add_node(*k, t.compose(p)).unwrap();
        }
        for f in g.factors() {
            moved.add_factor(f.clone()).unwrap();
        }
        for p in g.priors() {
            moved
                .add_prior(Prior {
                    node: p.node,
                    measurement: t.compose(&p.measurement),
                    information: p.information,
                })
                .unwrap();
        }
        let a = g.optimize(&SolverParams::default()).unwrap();
        let b = moved.optimize(&SolverParams::default()).unwrap();
        for (k, pa) in &a.poses {
            let expected = t.compose(pa);
            let pb = b.poses[k];
            assert!((pb.translation - expected.translation).norm() < 1e-6);
            assert!(pb.rotation.max_abs_diff(&expected.rotation) < 1e-6);
        }
    }

    #[test]
    fn noise_free_ground_truth_has_zero_cost() {
        let mut g = PoseGraph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth: Vec<_> = (0..10).map(|_| random_pose(&mut rng, 2.0, 10.0)).collect();
        for (i, t) in truth.iter().enumerate() {
            g.add_node(NodeKey::new(0, i as u32), *t).unwrap();
        }
        for i in 0..9 {
            for j in [i + 1, (i + 3) % 10] {
                g.add_factor(Factor {
                    kind: if j == i + 1 { FactorKind::Odometry } else { FactorKind::LoopClosure },
                    from: NodeKey::new(0, i as u32),
                    to: NodeKey::new(0, j as u32),
                    measurement: truth[i].inverse().compose(&truth[j]),
                    information: info(),
                })
                .unwrap();
            }
        }
        assert!(g.chi2(g.nodes(), 1.0) < 1e-18);
    }

    #[test]
    fn unanchored_component_is_rejected() {
        let mut g = chain(&[SE3Transform::identity()]);
        g.add_node(NodeKey::new(1, 0), SE3Transform::identity()).unwrap();
        assert!(matches!(
            g.optimize(&SolverParams::default()),
            Err(Error::DisconnectedGauge { robot: 1, index: 0 })
        ));
    }

    #[test]
    fn trajectory_lines_have_fourteen_fields() {
        let g = chain(&[SE3Transform::from_translation(Vector3::new(1.0, 2.0, 3.0))]);
        let text = format_trajectory(g.nodes());
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let f: Vec<f64> = lines[1].split_whitespace().map(|t| t.parse().unwrap()).collect();
        assert_eq!(f.len(), 14);
        assert_eq!(&f[..2], &[0.0, 1.0]);
        assert_eq!((f[5], f[9], f[13]), (1.0, 2.0, 3.0));
    }
}
