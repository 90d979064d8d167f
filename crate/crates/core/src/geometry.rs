//! Points, clouds, rigid transforms and the small eigen-solver shared by the
//! rest of the crate.
//!
//! Tangent vectors of SE(3) are ordered rotation first: `[φ; ρ]`, and
//! perturbations are applied on the left (`exp(δ) · T`).

use std::ops::Mul;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigen, DenseMatrix, Matrix3, Vector3};
use crate::scalar::Real;

pub type Point3<T> = Vector3<T>;

/// 6-vector in the SE(3) tangent space, `[φx, φy, φz, ρx, ρy, ρz]`.
pub type Tangent6<T> = [T; 6];
pub type Matrix6<T> = [[T; 6]; 6];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud<T> {
    pub points: Vec<Point3<T>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Point3<T>>) -> Self {
        Self { points }
    }

    /// Builds a cloud, rejecting any non-finite coordinate.
    pub fn try_from_points(points: Vec<Point3<T>>) -> Result<Self> {
        if let Some(index) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinitePoint { index });
        }
        Ok(Self { points })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3<T>> {
        self.points.iter()
    }

    /// Axis-aligned bounding box `(min, max)`, `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point3<T>, Point3<T>)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (
                Vector3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z)),
                Vector3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z)),
            )
        }))
    }
}

impl<T> FromIterator<Point3<T>> for PointCloud<T> {
    fn from_iter<I: IntoIterator<Item = Point3<T>>>(iter: I) -> Self {
        Self {
            points: iter.into_iter().collect(),
        }
    }
}

pub fn centroid<T: Real>(cloud: &PointCloud<T>) -> Result<Point3<T>> {
    centroid_of(&cloud.points)
}

pub fn centroid_of<T: Real>(points: &[Point3<T>]) -> Result<Point3<T>> {
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + *p);
    Ok(sum * (T::one() / T::from_usize_lossy(points.len())))
}

/// Sample covariance (normalised by `n`) and mean of a point set.
pub fn covariance<T: Real>(points: &[Point3<T>]) -> Result<(Matrix3<T>, Point3<T>)> {
    let mean = centroid_of(points)?;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = *p - mean;
        cov = cov + d.outer(&d);
    }
    Ok((cov.scale(T::one() / T::from_usize_lossy(points.len())), mean))
}

/// Rigid transform `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SE3Transform<T> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for SE3Transform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> SE3Transform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Rotation by `angle` radians about +z, no translation.
    pub fn rot_z(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let o = T::zero();
        Self::new(
            Matrix3::from_rows([[c, -s, o], [s, c, o], [o, o, T::one()]]),
            Vector3::zeros(),
        )
    }

    /// Builds a transform from the 12 values of a row-major `[R | t]` matrix.
    pub fn from_row_major_3x4(v: &[T; 12]) -> Self {
        Self::new(
            Matrix3::from_rows([[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]]),
            Vector3::new(v[3], v[7], v[11]),
        )
    }

    pub fn to_row_major_3x4(&self) -> [T; 12] {
        let r = &self.rotation.m;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t.x, r[1][0], r[1][1], r[1][2], t.y, r[2][0], r[2][1],
            r[2][2], t.z,
        ]
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -rt.mul_vec(&self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation.mul_vec(&other.translation) + self.translation,
        )
    }

    #[inline]
    pub fn transform_point(&self, p: &Point3<T>) -> Point3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    /// Checks orthonormality and unit determinant within `tol`.
    pub fn is_valid(&self, tol: T) -> bool {
        let rrt = self.rotation * self.rotation.transpose();
        self.rotation.is_finite()
            && self.translation.is_finite()
            && rrt.max_abs_diff(&Matrix3::identity()) <= tol
            && (self.rotation.determinant() - T::one()).abs() <= tol
    }

    /// Largest deviation of `R Rᵀ` from identity.
    pub fn orthonormality_error(&self) -> T {
        (self.rotation * self.rotation.transpose()).max_abs_diff(&Matrix3::identity())
    }

    /// Projects the rotation back onto SO(3).
    pub fn reorthonormalized(&self) -> Self {
        Self::new(nearest_rotation(&self.rotation), self.translation)
    }

    pub fn exp(xi: &Tangent6<T>) -> Self {
        let phi = Vector3::new(xi[0], xi[1], xi[2]);
        let rho = Vector3::new(xi[3], xi[4], xi[5]);
        Self::new(so3_exp(&phi), so3_left_jacobian(&phi).mul_vec(&rho))
    }

    pub fn log(&self) -> Tangent6<T> {
        let phi = so3_log(&self.rotation);
        let rho = so3_left_jacobian_inv(&phi).mul_vec(&self.translation);
        [phi.x, phi.y, phi.z, rho.x, rho.y, rho.z]
    }

    /// Adjoint in `[φ; ρ]` ordering: `[[R, 0], [t^ R, R]]`.
    pub fn adjoint(&self) -> Matrix6<T> {
        let r = self.rotation;
        let tr = self.translation.hat() * r;
        let mut ad = [[T::zero(); 6]; 6];
        put_block(&mut ad, 0, 0, &r);
        put_block(&mut ad, 3, 0, &tr);
        put_block(&mut ad, 3, 3, &r);
        ad
    }

    /// Rotation angle of `R` in radians.
    pub fn rotation_angle(&self) -> T {
        so3_log(&self.rotation).norm()
    }

    pub fn cast<U: Real>(&self) -> SE3Transform<U> {
        SE3Transform::new(self.rotation.cast(), self.translation.cast())
    }
}

impl<T: Real> Mul for SE3Transform<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.compose(&rhs)
    }
}

pub fn apply_transform<T: Real>(transform: &SE3Transform<T>, cloud: &PointCloud<T>) -> PointCloud<T> {
    cloud.iter().map(|p| transform.transform_point(p)).collect()
}

pub fn so3_exp<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let w = phi.hat();
    let w2 = w * w;
    let (a, b) = if theta < T::lit(1e-5) {
        (
            T::one() - theta2 / T::lit(6.0),
            T::lit(0.5) - theta2 / T::lit(24.0),
        )
    } else {
        (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
    };
    Matrix3::identity() + w.scale(a) + w2.scale(b)
}

fn vee<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    Vector3::new(
        m.m[2][1] - m.m[1][2],
        m.m[0][2] - m.m[2][0],
        m.m[1][0] - m.m[0][1],
    )
}

pub fn so3_log<T: Real>(r: &Matrix3<T>) -> Vector3<T> {
    let v = vee(r);
    let s = v.norm() * T::lit(0.5);
    let c = (r.trace() - T::one()) * T::lit(0.5);
    let theta = s.atan2(c);
    if theta < T::lit(1e-5) {
        return v * (T::lit(0.5) * (T::one() + theta * theta / T::lit(6.0)));
    }
    if theta < T::lit(std::f64::consts::PI - 1e-2) {
        return v * (theta / (T::lit(2.0) * theta.sin()));
    }
    // Near π: recover the axis from the symmetric part, R_sym = c I + (1 - c) a aᵀ.
    let sym = (*r + r.transpose()).scale(T::lit(0.5));
    let aat = (sym - Matrix3::identity().scale(c)).scale(T::one() / (T::one() - c));
    let k = (0..3)
        .max_by(|&i, &j| aat.m[i][i].partial_cmp(&aat.m[j][j]).unwrap())
        .unwrap();
    let mut axis = aat.column(k).normalized();
    if axis.dot(&v) < T::zero() {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let w = phi.hat();
    let (a, b) = if theta < T::lit(1e-3) {
        (
            T::lit(0.5) - theta2 / T::lit(24.0) + theta2 * theta2 / T::lit(720.0),
            T::lit(1.0 / 6.0) - theta2 / T::lit(120.0) + theta2 * theta2 / T::lit(5040.0),
        )
    } else {
        (
            (T::one() - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + w.scale(a) + (w * w).scale(b)
}

pub fn so3_left_jacobian_inv<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let w = phi.hat();
    let c = if theta < T::lit(1e-3) {
        T::lit(1.0 / 12.0) + theta2 / T::lit(720.0) + theta2 * theta2 / T::lit(30240.0)
    } else {
        T::one() / theta2 - (T::one() + theta.cos()) / (T::lit(2.0) * theta * theta.sin())
    };
    Matrix3::identity() - w.scale(T::lit(0.5)) + (w * w).scale(c)
}

/// The coupling block `Q(ρ, φ)` of the SE(3) left Jacobian.
fn se3_q_block<T: Real>(phi: &Vector3<T>, rho: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let p = phi.hat();
    let r = rho.hat();
    let (c1, c2, c3) = if theta < T::lit(0.05) {
        let t4 = theta2 * theta2;
        (
            T::lit(1.0 / 6.0) - theta2 / T::lit(120.0) + t4 / T::lit(5040.0),
            T::lit(1.0 / 24.0) - theta2 / T::lit(720.0) + t4 / T::lit(40320.0),
            T::lit(1.0 / 120.0) - theta2 / T::lit(2520.0) + t4 / T::lit(120960.0),
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta2 * theta;
        let t4 = theta2 * theta2;
        (
            (theta - s) / t3,
            (theta2 + T::lit(2.0) * c - T::lit(2.0)) / (T::lit(2.0) * t4),
            (T::lit(2.0) * theta - T::lit(3.0) * s + theta * c) / (T::lit(2.0) * t4 * theta),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let pp = p * p;
    r.scale(T::lit(0.5))
        + (pr + rp + prp).scale(c1)
        + (pp * r + rp * p - prp.scale(T::lit(3.0))).scale(c2)
        + (prp * p + pp * r * p).scale(c3)
}

/// Left Jacobian of SE(3) in `[φ; ρ]` ordering.
pub fn se3_left_jacobian<T: Real>(xi: &Tangent6<T>) -> Matrix6<T> {
    let phi = Vector3::new(xi[0], xi[1], xi[2]);
    let rho = Vector3::new(xi[3], xi[4], xi[5]);
    let j = so3_left_jacobian(&phi);
    let q = se3_q_block(&phi, &rho);
    let mut out = [[T::zero(); 6]; 6];
    put_block(&mut out, 0, 0, &j);
    put_block(&mut out, 3, 0, &q);
    put_block(&mut out, 3, 3, &j);
    out
}

pub fn se3_left_jacobian_inv<T: Real>(xi: &Tangent6<T>) -> Matrix6<T> {
    let phi = Vector3::new(xi[0], xi[1], xi[2]);
    let rho = Vector3::new(xi[3], xi[4], xi[5]);
    let ji = so3_left_jacobian_inv(&phi);
    let q = se3_q_block(&phi, &rho);
    let lower = (ji * q * ji).scale(-T::one());
    let mut out = [[T::zero(); 6]; 6];
    put_block(&mut out, 0, 0, &ji);
    put_block(&mut out, 3, 0, &lower);
    put_block(&mut out, 3, 3, &ji);
    out
}

/// Inverse right Jacobian, `J_r⁻¹(ξ) = J_l⁻¹(-ξ)`.
pub fn se3_right_jacobian_inv<T: Real>(xi: &Tangent6<T>) -> Matrix6<T> {
    let neg = xi.map(|v| -v);
    se3_left_jacobian_inv(&neg)
}

fn put_block<T: Real>(dst: &mut Matrix6<T>, r0: usize, c0: usize, m: &Matrix3<T>) {
    for r in 0..3 {
        for c in 0..3 {
            dst[r0 + r][c0 + c] = m.m[r][c];
        }
    }
}

pub fn mat6_mul<T: Real>(a: &Matrix6<T>, b: &Matrix6<T>) -> Matrix6<T> {
    let mut out = [[T::zero(); 6]; 6];
    for r in 0..6 {
        for c in 0..6 {
            let mut acc = T::zero();
            for k in 0..6 {
                acc = acc + a[r][k] * b[k][c];
            }
            out[r][c] = acc;
        }
    }
    out
}

pub fn mat6_mul_vec<T: Real>(a: &Matrix6<T>, v: &Tangent6<T>) -> Tangent6<T> {
    let mut out = [T::zero(); 6];
    for r in 0..6 {
        for k in 0..6 {
            out[r] = out[r] + a[r][k] * v[k];
        }
    }
    out
}

/// Closest rotation matrix to `m` in the Frobenius sense.
pub fn nearest_rotation<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    // Polar factor via the eigen-decomposition of MᵀM.
    let mtm = m.transpose() * *m;
    let mut d = DenseMatrix::zeros(3, 3);
    for r in 0..3 {
        for c in 0..3 {
            d[(r, c)] = mtm.m[r][c];
        }
    }
    let (vals, vecs) = jacobi_eigen(&d);
    let mut inv_sqrt = Matrix3::zeros();
    for i in 0..3 {
        let v = Vector3::new(vecs[(0, i)], vecs[(1, i)], vecs[(2, i)]);
        let s = vals[i].max(T::epsilon()).sqrt();
        inv_sqrt = inv_sqrt + v.outer(&v).scale(T::one() / s);
    }
    let r = *m * inv_sqrt;
    if r.determinant() < T::zero() {
        // Reflection: flip the axis of the smallest singular value.
        let v = Vector3::new(vecs[(0, 2)], vecs[(1, 2)], vecs[(2, 2)]);
        r * (Matrix3::identity() - v.outer(&v).scale(T::lit(2.0)))
    } else {
        r
    }
}

/// Eigen-decomposition of a symmetric 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetricEigen3<T> {
    /// Eigenvalues, descending.
    pub values: [T; 3],
    /// Unit eigenvectors; `vectors[i]` belongs to `values[i]`.
    pub vectors: [Vector3<T>; 3],
}

impl<T: Real> SymmetricEigen3<T> {
    pub fn reconstruct(&self) -> Matrix3<T> {
        let mut m = Matrix3::zeros();
        for i in 0..3 {
            m = m + self.vectors[i].outer(&self.vectors[i]).scale(self.values[i]);
        }
        m
    }
}

/// Closed-form (trigonometric Cardano) eigen-decomposition of a symmetric
/// 3x3 matrix, falling back to Jacobi iteration when eigenvalues are
/// (nearly) repeated or the closed-form vectors fail the residual check.
pub fn eig_sym3<T: Real>(m: &Matrix3<T>) -> Result<SymmetricEigen3<T>> {
    let scale = m
        .m
        .iter()
        .flatten()
        .fold(T::zero(), |acc, v| acc.max(v.abs()));
    let asym = (0..3)
        .flat_map(|r| (0..3).map(move |c| (r, c)))
        .fold(T::zero(), |acc, (r, c)| acc.max((m.m[r][c] - m.m[c][r]).abs()));
    if asym > T::lit(1e-9) * scale.max(T::one()) {
        return Err(Error::NotSymmetric {
            asymmetry: asym.as_f64(),
        });
    }
    if scale == T::zero() {
        return Ok(SymmetricEigen3 {
            values: [T::zero(); 3],
            vectors: axes(),
        });
    }
    let a = m.m;
    let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    if off == T::zero() {
        return Ok(diagonal_eigen(m));
    }
    let q = m.trace() / T::lit(3.0);
    let d0 = a[0][0] - q;
    let d1 = a[1][1] - q;
    let d2 = a[2][2] - q;
    let p = ((d0 * d0 + d1 * d1 + d2 * d2 + T::lit(2.0) * off) / T::lit(6.0)).sqrt();
    let b = (*m - Matrix3::identity().scale(q)).scale(T::one() / p);
    let r = (b.determinant() * T::lit(0.5)).max(-T::one()).min(T::one());
    let phi = r.acos() / T::lit(3.0);
    let two_pi_3 = T::lit(2.0 * std::f64::consts::PI / 3.0);
    let l1 = q + T::lit(2.0) * p * phi.cos();
    let l3 = q + T::lit(2.0) * p * (phi + two_pi_3).cos();
    let l2 = T::lit(3.0) * q - l1 - l3;

    let gap_tol = T::lit(1e-12) * scale;
    if (l1 - l2).abs() <= gap_tol || (l2 - l3).abs() <= gap_tol {
        return Ok(jacobi_eigen3(m));
    }
    let (Some(v1), Some(v3)) = (null_vector(m, l1), null_vector(m, l3)) else {
        return Ok(jacobi_eigen3(m));
    };
    let v2 = v3.cross(&v1).normalized();
    let out = SymmetricEigen3 {
        values: [l1, l2, l3],
        vectors: [v1, v2, v3],
    };
    let tol = T::lit(1e-10) * scale;
    let ok = (0..3).all(|i| {
        (m.mul_vec(&out.vectors[i]) - out.vectors[i] * out.values[i]).norm() <= tol
    });
    if ok {
        Ok(out)
    } else {
        Ok(jacobi_eigen3(m))
    }
}

fn axes<T: Real>() -> [Vector3<T>; 3] {
    let (o, i) = (T::zero(), T::one());
    [Vector3::new(i, o, o), Vector3::new(o, i, o), Vector3::new(o, o, i)]
}

fn diagonal_eigen<T: Real>(m: &Matrix3<T>) -> SymmetricEigen3<T> {
    let ax = axes::<T>();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| m.m[j][j].partial_cmp(&m.m[i][i]).unwrap());
    SymmetricEigen3 {
        values: idx.map(|i| m.m[i][i]),
        vectors: idx.map(|i| ax[i]),
    }
}

/// Unit vector spanning the null space of `m - λI`, from the best-conditioned
/// cross product of its rows.
fn null_vector<T: Real>(m: &Matrix3<T>, lambda: T) -> Option<Vector3<T>> {
    let s = *m - Matrix3::identity().scale(lambda);
    let (r0, r1, r2) = (s.row(0), s.row(1), s.row(2));
    let cands = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
    let best = cands
        .iter()
        .max_by(|a, b| a.norm_squared().partial_cmp(&b.norm_squared()).unwrap())?;
    if best.norm_squared() > T::zero() && best.is_finite() {
        Some(best.normalized())
    } else {
        None
    }
}

fn jacobi_eigen3<T: Real>(m: &Matrix3<T>) -> SymmetricEigen3<T> {
    let mut d = DenseMatrix::zeros(3, 3);
    for r in 0..3 {
        for c in 0..3 {
            d[(r, c)] = m.m[r][c];
        }
    }
    let (vals, vecs) = jacobi_eigen(&d);
    let col = |i: usize| Vector3::new(vecs[(0, i)], vecs[(1, i)], vecs[(2, i)]);
    SymmetricEigen3 {
        values: [vals[0], vals[1], vals[2]],
        vectors: [col(0), col(1), col(2)],
    }
}
