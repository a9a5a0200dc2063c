//! Point-to-plane ICP: k-NN matching, trimmed-distance outlier rejection and
//! a small-angle least-squares minimiser, iterated up to a fixed cap.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::cloud::{self, build_index, NeighborIndex, PointCloud};
use crate::error::{Error, Result};
use crate::se3::{Mat6, RigidTransform, Twist, Vec3, Vec6};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    /// Associations generated per reading point.
    pub knn: usize,
    /// Fraction of the pooled associations kept, closest first.
    pub trim_ratio: f64,
    pub max_iterations: usize,
    /// Convergence thresholds on the step between successive iterates.
    pub translation_tol: f64,
    pub rotation_tol: f64,
    /// Reading-side random subsampling ratio, applied once before iterating.
    pub subsample_ratio: f64,
    /// Reading-side maximum density (points/m³); `None` disables the filter.
    pub max_density: Option<f64>,
    /// Neighbourhood size for reference normals.
    pub normal_neighbors: usize,
    pub seed: u64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            knn: 3,
            trim_ratio: 0.70,
            max_iterations: 80,
            translation_tol: 1e-4,
            rotation_tol: 1e-4,
            subsample_ratio: 1.0,
            max_density: None,
            normal_neighbors: cloud::DEFAULT_NORMAL_NEIGHBORS,
            seed: 0,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.trim_ratio > 0.0 && self.trim_ratio <= 1.0) {
            return Err(Error::invalid("trim_ratio", format!("{} not in (0, 1]", self.trim_ratio)));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if self.knn == 0 {
            return Err(Error::invalid("knn", "must be at least 1"));
        }
        Ok(())
    }
}

/// One reading→reference pairing. `normal` is the reference normal, zero when
/// the reference point has no valid normal (the pair then carries no weight).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Association {
    pub reading: usize,
    pub reference: usize,
    pub dist2: f64,
    pub normal: Vec3,
}

pub type AssociationSet = Vec<Association>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    /// Trimmed mean squared point-to-plane residual at the final pose.
    pub objective: f64,
    /// Step thresholds met on a full-rank system.
    pub converged: bool,
    /// The last normal system was rank-deficient.
    pub degenerate: bool,
}

/// Anything that turns an initial guess into a registration result.
pub trait Registrar: Sync {
    fn register(&self, initial: &RigidTransform) -> RegistrationResult;
}

/// Matches every point of `reading` (already expressed in the reference
/// frame) to its `knn` nearest reference points.
pub fn match_points(
    reading: &[Vec3],
    reference: &PointCloud,
    index: &NeighborIndex,
    knn: usize,
) -> Result<AssociationSet> {
    if reading.is_empty() || reference.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if knn == 0 {
        return Err(Error::invalid("knn", "must be at least 1"));
    }
    let per_point = crate::par::map_indexed(reading.len(), |i| {
        index
            .nearest(&reading[i], knn)
            .into_iter()
            .map(|n| Association {
                reading: i,
                reference: n.index,
                dist2: n.dist2,
                normal: match reference.normal(n.index) {
                    Some(s) if s.valid => s.normal,
                    _ => Vec3::zeros(),
                },
            })
            .collect::<Vec<_>>()
    });
    Ok(per_point.into_iter().flatten().collect())
}

/// Keeps the `⌊ratio · N⌋` closest associations; ties keep association order.
pub fn trim_outliers(mut assoc: AssociationSet, trim_ratio: f64) -> AssociationSet {
    let keep = (trim_ratio * assoc.len() as f64 + 1e-9).floor() as usize;
    assoc.sort_by(|a, b| a.dist2.total_cmp(&b.dist2));
    assoc.truncate(keep.min(assoc.len()));
    assoc
}

/// Residual `n · (p - q)` and its Jacobian `[nᵀ, (p × n)ᵀ]` with respect to a
/// left-applied small motion `(t, ω)`.
#[inline]
pub(crate) fn residual_row(a: &Association, reading: &[Vec3], reference: &[Vec3]) -> (f64, Vec6) {
    let p = reading[a.reading];
    let q = reference[a.reference];
    let n = a.normal;
    let c = p.cross(&n);
    (n.dot(&(p - q)), Vec6::new(n.x, n.y, n.z, c.x, c.y, c.z))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneStep {
    /// First-order motion `p ↦ p + u + ω × p`, applied as `exp(ξ)`.
    pub step: Twist,
    pub degenerate: bool,
}

impl PlaneStep {
    pub fn transform(&self) -> RigidTransform {
        self.step.exp()
    }
}

/// Relative eigenvalue below which a direction of the normal system counts
/// as unconstrained.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Pseudo-inverse solve of a symmetric 6×6 system; returns whether any
/// direction was dropped.
pub(crate) fn solve_symmetric(a: &Mat6, b: &Vec6) -> (Vec6, bool) {
    let eig = SymmetricEigen::new(*a);
    let lmax = eig.eigenvalues.amax();
    if lmax <= 0.0 {
        return (Vec6::zeros(), true);
    }
    let mut x = Vec6::zeros();
    let mut degenerate = false;
    for k in 0..6 {
        let l = eig.eigenvalues[k];
        let v = eig.eigenvectors.column(k);
        if l > DEGENERACY_TOL * lmax {
            x += v * (v.dot(b) / l);
        } else {
            degenerate = true;
        }
    }
    (x, degenerate)
}

/// Minimiser of `Σ (n · (R p + t - q))²` under the small-angle model
/// `R ≈ I + [ω]×`. Rank-deficient systems get the minimum-norm solution.
pub fn minimize_point_to_plane(
    assoc: &[Association],
    reading: &[Vec3],
    reference: &[Vec3],
) -> PlaneStep {
    let mut a = Mat6::zeros();
    let mut b = Vec6::zeros();
    for asc in assoc {
        let (r, j) = residual_row(asc, reading, reference);
        a += j * j.transpose();
        b -= j * r;
    }
    let (x, degenerate) = solve_symmetric(&a, &b);
    PlaneStep {
        step: Twist::from_vector(&x),
        degenerate,
    }
}

/// Sum of squared point-to-plane residuals over a fixed association set,
/// with the reading moved by `motion`.
pub fn association_cost(
    assoc: &[Association],
    reading: &[Vec3],
    reference: &[Vec3],
    motion: &RigidTransform,
) -> f64 {
    assoc
        .iter()
        .map(|a| {
            let p = motion.apply(&reading[a.reading]);
            let r = a.normal.dot(&(p - reference[a.reference]));
            r * r
        })
        .sum()
}

fn mean_cost(assoc: &[Association], reading: &[Vec3], reference: &[Vec3]) -> f64 {
    if assoc.is_empty() {
        return 0.0;
    }
    association_cost(assoc, reading, reference, &RigidTransform::identity()) / assoc.len() as f64
}

/// A registration problem with the reference normals and index built once,
/// ready for many registrations from different initial guesses.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub reading: PointCloud,
    pub reference: PointCloud,
    pub index: NeighborIndex,
    pub config: IcpConfig,
}

impl PreparedPair {
    pub fn new(reading: &PointCloud, reference: &PointCloud, config: &IcpConfig) -> Result<Self> {
        config.validate()?;
        if reading.is_empty() || reference.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let reference = if reference.has_normals() {
            reference.clone()
        } else {
            cloud::estimate_normals(reference, config.normal_neighbors)?
        };
        let mut filtered = reading.clone();
        if let Some(d) = config.max_density {
            filtered = cloud::max_density_filter(&filtered, d)?;
        }
        if config.subsample_ratio < 1.0 {
            filtered = cloud::random_subsample(&filtered, config.subsample_ratio, config.seed)?;
        }
        let index = build_index(&reference)?;
        Ok(PreparedPair {
            reading: filtered,
            reference,
            index,
            config: *config,
        })
    }

    fn moved_reading(&self, t: &RigidTransform) -> Vec<Vec3> {
        self.reading.points.iter().map(|p| t.apply(p)).collect()
    }

    /// Matched and trimmed associations with the reading at pose `t`.
    pub fn associations(&self, t: &RigidTransform) -> (Vec<Vec3>, AssociationSet) {
        let moved = self.moved_reading(t);
        let assoc = match_points(&moved, &self.reference, &self.index, self.config.knn)
            .expect("prepared pair holds non-empty clouds");
        let trimmed = trim_outliers(assoc, self.config.trim_ratio);
        (moved, trimmed)
    }

    /// Trimmed mean point-to-plane cost after one matching pass at `t`.
    pub fn objective(&self, t: &RigidTransform) -> f64 {
        let (moved, assoc) = self.associations(t);
        mean_cost(&assoc, &moved, &self.reference.points)
    }

    pub fn icp(&self, initial: &RigidTransform) -> RegistrationResult {
        let cfg = &self.config;
        let mut t = *initial;
        let mut converged = false;
        let mut degenerate = false;
        let mut iterations = 0;
        while iterations < cfg.max_iterations {
            iterations += 1;
            let (moved, assoc) = self.associations(&t);
            let step = minimize_point_to_plane(&assoc, &moved, &self.reference.points);
            degenerate = step.degenerate;
            if !step.step.is_finite() {
                break;
            }
            t = step.transform().compose(&t).normalized();
            if step.step.u.norm() < cfg.translation_tol && step.step.omega.norm() < cfg.rotation_tol {
                converged = true;
                break;
            }
        }
        RegistrationResult {
            transform: t,
            iterations,
            objective: self.objective(&t),
            converged: converged && !degenerate,
            degenerate,
        }
    }
}

impl Registrar for PreparedPair {
    fn register(&self, initial: &RigidTransform) -> RegistrationResult {
        self.icp(initial)
    }
}

/// `T̂ = icp(P, Q, Ť)`: aligns `reading` onto `reference` starting at `initial`.
pub fn icp(
    reading: &PointCloud,
    reference: &PointCloud,
    initial: &RigidTransform,
    config: &IcpConfig,
) -> Result<RegistrationResult> {
    Ok(PreparedPair::new(reading, reference, config)?.icp(initial))
}

pub fn objective_value(
    reading: &PointCloud,
    reference: &PointCloud,
    t: &RigidTransform,
    config: &IcpConfig,
) -> Result<f64> {
    Ok(PreparedPair::new(reading, reference, config)?.objective(t))
}
