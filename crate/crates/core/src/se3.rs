//! Rigid motions in 3D and their uncertainty.
//!
//! Twists are ordered `[u; ω]`: translation part first, rotation (angle-axis)
//! second. Every 6×6 quantity in the crate (adjoints, covariances, Jacobians
//! of the point-to-plane cost) uses this block order.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;

const TAYLOR_THRESHOLD: f64 = 1e-2;
const NEAR_PI_THRESHOLD: f64 = 1e-3;

/// Relative regulariser added to singular covariances before inversion.
pub const REGULARIZATION_EPS: f64 = 1e-9;

#[rustfmt::skip]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(
        0.0, -v.z, v.y,
        v.z, 0.0, -v.x,
        -v.y, v.x, 0.0,
    )
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < TAYLOR_THRESHOLD {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let w = skew(omega);
    Mat3::identity() + w * a + w * w * b
}

/// Which formula the logarithm used. `NearPi` means the rotation axis was
/// read off the symmetric part of `R` instead of the skew part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogBranch {
    SmallAngle,
    Regular,
    NearPi,
}

pub fn so3_log(rotation: &Mat3) -> (Vec3, LogBranch) {
    let cos = ((rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let s = Vec3::new(
        rotation[(2, 1)] - rotation[(1, 2)],
        rotation[(0, 2)] - rotation[(2, 0)],
        rotation[(1, 0)] - rotation[(0, 1)],
    ) * 0.5;
    let sin = s.norm();
    let theta = sin.atan2(cos);

    if theta < TAYLOR_THRESHOLD {
        let t2 = theta * theta;
        let scale = 1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0;
        return (s * scale, LogBranch::SmallAngle);
    }
    if std::f64::consts::PI - theta > NEAR_PI_THRESHOLD {
        return (s * (theta / sin), LogBranch::Regular);
    }

    // R + Rᵀ = 2cI + 2(1 - c) k kᵀ: take the best-conditioned column.
    let sym = (rotation + rotation.transpose()) * 0.5 - Mat3::identity() * cos;
    let j = (0..3)
        .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
        .unwrap_or(0);
    let mut axis: Vec3 = sym.column(j).into_owned();
    axis /= axis.norm();
    if axis.dot(&s) < 0.0 {
        axis = -axis;
    }
    (axis * theta, LogBranch::NearPi)
}

/// `V(ω)`, the left Jacobian of SO(3), mapping `u` to the translation of `exp(ξ)`.
fn left_jacobian(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (b, c) = if theta < TAYLOR_THRESHOLD {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let w = skew(omega);
    Mat3::identity() + w * b + w * w * c
}

fn left_jacobian_inverse(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let d = if theta < TAYLOR_THRESHOLD {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    let w = skew(omega);
    Mat3::identity() - w * 0.5 + w * w * d
}

/// Lie-algebra coordinates of a rigid motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub u: Vec3,
    pub omega: Vec3,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            u: Vec3::zeros(),
            omega: Vec3::zeros(),
        }
    }

    pub fn new(u: Vec3, omega: Vec3) -> Self {
        Twist { u, omega }
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Twist {
            u: v.fixed_rows::<3>(0).into_owned(),
            omega: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(
            self.u.x,
            self.u.y,
            self.u.z,
            self.omega.x,
            self.omega.y,
            self.omega.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(self.omega.iter()).all(|x| x.is_finite())
    }

    pub fn exp(&self) -> RigidTransform {
        exp_map(self)
    }
}

/// Element of SE(3), acting on points as `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform without checking orthonormality.
    pub fn from_parts(rotation: Mat3, translation: Vec3) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    /// Builds a transform, rejecting rotations that are not proper and
    /// orthonormal within `tol`.
    pub fn try_new(rotation: Mat3, translation: Vec3, tol: f64) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        if !t.is_valid(tol) {
            return Err(Error::invalid(
                "rotation",
                format!("not a proper orthonormal matrix within {tol:e}"),
            ));
        }
        Ok(t)
    }

    pub fn from_translation(t: Vec3) -> Self {
        RigidTransform::from_parts(Mat3::identity(), t)
    }

    pub fn from_rotation(r: Mat3) -> Self {
        RigidTransform::from_parts(r, Vec3::zeros())
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_rotation(so3_exp(&Vec3::new(angle, 0.0, 0.0)))
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_rotation(so3_exp(&Vec3::new(0.0, angle, 0.0)))
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_rotation(so3_exp(&Vec3::new(0.0, 0.0, angle)))
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        r.iter().chain(self.translation.iter()).all(|x| x.is_finite())
            && (r * r.transpose() - Mat3::identity()).amax() <= tol
            && (r.determinant() - 1.0).abs() <= tol
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform::from_parts(rt, -(rt * self.translation))
    }

    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform::from_parts(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn log(&self) -> Twist {
        log_map(self)
    }

    pub fn adjoint(&self) -> Mat6 {
        adjoint(self)
    }

    /// Frobenius distance between the 3×4 `[R | t]` blocks.
    pub fn distance(&self, other: &RigidTransform) -> f64 {
        ((self.rotation - other.rotation).norm_squared()
            + (self.translation - other.translation).norm_squared())
        .sqrt()
    }

    /// Re-orthonormalises the rotation block (accumulated round-off).
    pub fn normalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        RigidTransform::from_parts(r, self.translation)
    }

    /// Row-major `[R | t]`, 12 values.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Self {
        RigidTransform::from_parts(
            Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            Vec3::new(v[3], v[7], v[11]),
        )
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl Mul for &RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

pub fn exp_map(xi: &Twist) -> RigidTransform {
    RigidTransform::from_parts(so3_exp(&xi.omega), left_jacobian(&xi.omega) * xi.u)
}

pub fn log_map(t: &RigidTransform) -> Twist {
    log_map_with_branch(t).0
}

pub fn log_map_with_branch(t: &RigidTransform) -> (Twist, LogBranch) {
    let (omega, branch) = so3_log(&t.rotation);
    let u = left_jacobian_inverse(&omega) * t.translation;
    (Twist { u, omega }, branch)
}

/// `Ad_T = [[R, [t]× R], [0, R]]` for the `[u; ω]` ordering, so that
/// `exp(Ad_T ξ) = T exp(ξ) T⁻¹`.
pub fn adjoint(t: &RigidTransform) -> Mat6 {
    let mut ad = Mat6::zeros();
    let r = t.rotation;
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(skew(&t.translation) * r));
    ad
}

/// Symmetric 6×6 uncertainty of a twist, blocks `[Y_uu, Y_uω; Y_ωu, Y_ωω]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Covariance(Mat6);

impl Covariance {
    /// Wraps a matrix, symmetrising it. No definiteness check.
    pub fn new(m: Mat6) -> Self {
        Covariance((m + m.transpose()) * 0.5)
    }

    /// Like [`Covariance::new`] but rejects matrices that are not PSD
    /// (smallest eigenvalue below `-1e-10 · trace`).
    pub fn try_new(m: Mat6) -> Result<Self> {
        let c = Covariance::new(m);
        c.check_psd()?;
        Ok(c)
    }

    pub fn zeros() -> Self {
        Covariance(Mat6::zeros())
    }

    pub fn identity() -> Self {
        Covariance(Mat6::identity())
    }

    pub fn scaled_identity(a: f64) -> Self {
        Covariance(Mat6::identity() * a)
    }

    pub fn from_diagonal(d: [f64; 6]) -> Self {
        Covariance(Mat6::from_diagonal(&Vec6::from_row_slice(&d)))
    }

    pub fn matrix(&self) -> &Mat6 {
        &self.0
    }

    pub fn into_matrix(self) -> Mat6 {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn translation_block(&self) -> Mat3 {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn rotation_block(&self) -> Mat3 {
        self.0.fixed_view::<3, 3>(3, 3).into_owned()
    }

    pub fn cross_block(&self) -> Mat3 {
        self.0.fixed_view::<3, 3>(0, 3).into_owned()
    }

    pub fn eigen(&self) -> SymmetricEigen<f64, nalgebra::U6> {
        SymmetricEigen::new(self.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen().eigenvalues.min()
    }

    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue() >= -1e-10 * self.trace().abs().max(f64::MIN_POSITIVE)
    }

    pub fn check_psd(&self) -> Result<()> {
        if self.0.iter().any(|x| !x.is_finite()) {
            return Err(Error::NotPositiveSemiDefinite {
                min_eigenvalue: f64::NAN,
            });
        }
        let min = self.min_eigenvalue();
        if min < -1e-10 * self.trace().abs().max(f64::MIN_POSITIVE) {
            return Err(Error::NotPositiveSemiDefinite {
                min_eigenvalue: min,
            });
        }
        Ok(())
    }

    /// Congruence `A Y Aᵀ`.
    pub fn congruence(&self, a: &Mat6) -> Covariance {
        Covariance::new(a * self.0 * a.transpose())
    }

    /// `Ad_T Y Ad_Tᵀ`.
    pub fn transform(&self, t: &RigidTransform) -> Covariance {
        transform_covariance(self, t)
    }

    /// Adds `ε · trace/6 · I` when the matrix has no Cholesky factor.
    pub fn regularized(&self) -> (Covariance, bool) {
        if self.0.cholesky().is_some() {
            return (*self, false);
        }
        let scale = (self.trace() / 6.0).abs().max(f64::MIN_POSITIVE);
        (
            Covariance(self.0 + Mat6::identity() * (REGULARIZATION_EPS * scale)),
            true,
        )
    }

    pub fn cholesky(&self) -> Option<nalgebra::Cholesky<f64, nalgebra::U6>> {
        self.0.cholesky()
    }

    pub fn scale(&self, s: f64) -> Covariance {
        Covariance(self.0 * s)
    }
}

impl std::ops::Add for Covariance {
    type Output = Covariance;
    fn add(self, rhs: Covariance) -> Covariance {
        Covariance(self.0 + rhs.0)
    }
}

pub fn transform_covariance(y: &Covariance, t: &RigidTransform) -> Covariance {
    y.congruence(&adjoint(t))
}

pub fn compound_pose(t1: &RigidTransform, t2: &RigidTransform) -> RigidTransform {
    t1.compose(t2)
}

/// Truncation order of the compounding series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompoundOrder {
    Second,
    Fourth,
}

/// `⟨⟨A⟩⟩ = -tr(A) I + A`
fn dbl(a: &Mat3) -> Mat3 {
    a - Mat3::identity() * a.trace()
}

fn dbl2(a: &Mat3, b: &Mat3) -> Mat3 {
    dbl(a) * dbl(b) + dbl(&(b * a))
}

fn dbl6(s: &Mat6) -> Mat6 {
    let pp = s.fixed_view::<3, 3>(3, 3).into_owned();
    let rp = s.fixed_view::<3, 3>(0, 3).into_owned();
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&dbl(&pp));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&dbl(&pp));
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&dbl(&(rp + rp.transpose())));
    out
}

/// Covariance of `ξ` in `exp(ξ) = exp(a) exp(b)` for independent zero-mean
/// `a ~ N(0, Σa)`, `b ~ N(0, Σb)`, using the BCH series truncated at `order`.
pub fn compound_bch(sa: &Mat6, sb: &Mat6, order: CompoundOrder) -> Mat6 {
    let mut out = sa + sb;
    if order == CompoundOrder::Second {
        return out;
    }
    let a1 = dbl6(sa);
    let a2 = dbl6(sb);
    out += (a1 * sb + sb * a1.transpose() + a2 * sa + sa * a2.transpose()) / 12.0;

    let blk = |s: &Mat6, r: usize, c: usize| s.fixed_view::<3, 3>(r, c).into_owned();
    let (a_rr, a_rp, a_pp) = (blk(sa, 0, 0), blk(sa, 0, 3), blk(sa, 3, 3));
    let (b_rr, b_rp, b_pp) = (blk(sb, 0, 0), blk(sb, 0, 3), blk(sb, 3, 3));

    let b_rr_term = dbl2(&a_pp, &b_rr)
        + dbl2(&a_rp.transpose(), &b_rp)
        + dbl2(&a_rp, &b_rp.transpose())
        + dbl2(&a_rr, &b_pp);
    let b_rp_term = dbl2(&a_pp, &b_rp.transpose()) + dbl2(&a_rp.transpose(), &b_pp);
    let b_pp_term = dbl2(&a_pp, &b_pp);

    let mut b = Mat6::zeros();
    b.fixed_view_mut::<3, 3>(0, 0).copy_from(&b_rr_term);
    b.fixed_view_mut::<3, 3>(0, 3).copy_from(&b_rp_term);
    b.fixed_view_mut::<3, 3>(3, 0).copy_from(&b_rp_term.transpose());
    b.fixed_view_mut::<3, 3>(3, 3).copy_from(&b_pp_term);
    out += b / 4.0;
    (out + out.transpose()) * 0.5
}

/// Covariance of `T1 T2` where each pose carries a global-frame perturbation
/// `T = exp(ξ) T̄`. Reduces to `Y1 + Ad_T1 Y2 Ad_T1ᵀ` at second order.
pub fn compound_covariance(
    t1: &RigidTransform,
    y1: &Covariance,
    y2: &Covariance,
    order: CompoundOrder,
) -> Result<Covariance> {
    y1.check_psd()?;
    y2.check_psd()?;
    if y1.trace() + y2.trace() >= 1.0 {
        log::warn!(
            "compounding large covariances (trace {:.3}); series may be inaccurate",
            y1.trace() + y2.trace()
        );
    }
    let y2g = y2.transform(t1);
    Ok(Covariance::new(compound_bch(y1.matrix(), y2g.matrix(), order)))
}

/// Covariance of `T1 T2` where each pose carries a body-frame perturbation
/// `T = T̄ exp(ξ)`, which is how sampled ICP covariances are expressed.
pub fn compound_covariance_local(
    t2: &RigidTransform,
    y1: &Covariance,
    y2: &Covariance,
    order: CompoundOrder,
) -> Result<Covariance> {
    y1.check_psd()?;
    y2.check_psd()?;
    let y1l = y1.transform(&t2.inverse());
    Ok(Covariance::new(compound_bch(y1l.matrix(), y2.matrix(), order)))
}

/// `sqrt(ξᵀ Y⁻¹ ξ)`; singular `Y` is regularised with a warning.
pub fn mahalanobis(xi: &Twist, y: &Covariance) -> f64 {
    mahalanobis_vec(&xi.to_vector(), y)
}

pub fn mahalanobis_vec(v: &Vec6, y: &Covariance) -> f64 {
    let (reg, regularized) = y.regularized();
    if regularized {
        log::warn!("singular covariance regularised before Mahalanobis distance");
    }
    match reg.cholesky() {
        Some(ch) => v.dot(&ch.solve(v)).max(0.0).sqrt(),
        None => {
            // Rank-deficient beyond the regulariser: fall back to a pseudo-inverse.
            let pinv = reg
                .matrix()
                .pseudo_inverse(1e-14 * reg.trace().abs())
                .unwrap_or_else(|_| Mat6::zeros());
            v.dot(&(pinv * v)).max(0.0).sqrt()
        }
    }
}

/// Mahalanobis distance restricted to a 3×3 block.
pub fn mahalanobis3(v: &Vec3, y: &Mat3) -> f64 {
    let scale = (y.trace() / 3.0).abs().max(f64::MIN_POSITIVE);
    let m = match y.cholesky() {
        Some(_) => *y,
        None => y + Mat3::identity() * (REGULARIZATION_EPS * scale),
    };
    match m.cholesky() {
        Some(ch) => v.dot(&ch.solve(v)).max(0.0).sqrt(),
        None => f64::INFINITY,
    }
}
