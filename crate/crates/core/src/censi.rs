//! Closed-form covariance of point-to-plane ICP from the implicit function
//! theorem: `Y = H⁻¹ G Σ_z Gᵀ H⁻¹` on the association set frozen at `T̂`.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::dbscan::DbscanConfig;
use crate::error::{Error, Result};
use crate::icp::{residual_row, Association, IcpConfig, PreparedPair};
use crate::sampling::{filtered_covariance, sample_registrations, PerturbationModel};
use crate::scene::{generate_scene, SceneSpec};
use crate::se3::{skew, Covariance, Mat3, Mat6, RigidTransform, Vec3, Vec6};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoiseModel {
    /// Isotropic per-axis standard deviation of every point (m).
    pub sigma: f64,
}

impl SensorNoiseModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::invalid("sigma", "must be non-negative"));
        }
        Ok(SensorNoiseModel { sigma })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CensiConfig {
    /// Also propagate noise on the reference points.
    pub reference_noise: bool,
    /// Eigenvalues of `H` below `tol · λ_max` are treated as unconstrained.
    pub degeneracy_tol: f64,
}

impl Default for CensiConfig {
    fn default() -> Self {
        CensiConfig {
            reference_noise: false,
            degeneracy_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensiEstimate {
    pub covariance: Covariance,
    /// Unit directions of twist space the cost does not constrain.
    pub degenerate_directions: Vec<Vec6>,
    pub hessian_eigenvalues: Vec6,
}

/// Accumulated `H` and `G Σ Gᵀ / σ²` for a frozen association set.
///
/// `moved` holds the reading points at `T̂`, `rotation` is `R̂` (the map from
/// raw reading coordinates to the reference frame).
fn hessian_and_noise(
    assoc: &[Association],
    moved: &[Vec3],
    reference: &[Vec3],
    rotation: &Mat3,
    reference_noise: bool,
) -> (Mat6, Mat6) {
    let mut h = Mat6::zeros();
    let mut g_reading: Vec<Option<nalgebra::Matrix6x3<f64>>> = vec![None; moved.len()];
    let mut g_reference: Vec<Option<nalgebra::Matrix6x3<f64>>> = vec![None; reference.len()];
    for a in assoc {
        let (r, j) = residual_row(a, moved, reference);
        let n = a.normal;
        let p = moved[a.reading];
        h += 2.0 * j * j.transpose();
        // Second derivative of the residual in ω.
        let curv = 0.5 * (n * p.transpose() + p * n.transpose()) - Mat3::identity() * n.dot(&p);
        let mut rot = h.fixed_view_mut::<3, 3>(3, 3);
        rot += 2.0 * r * curv;

        let dr_dp = n.transpose() * rotation;
        let mut dj_dp = nalgebra::Matrix6x3::zeros();
        dj_dp.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-skew(&n) * rotation));
        let gp = 2.0 * (j * dr_dp + r * dj_dp);
        *g_reading[a.reading].get_or_insert_with(nalgebra::Matrix6x3::zeros) += gp;
        if reference_noise {
            let gq = -2.0 * j * n.transpose();
            *g_reference[a.reference].get_or_insert_with(nalgebra::Matrix6x3::zeros) += gq;
        }
    }
    let mut m = Mat6::zeros();
    for g in g_reading.iter().chain(g_reference.iter()).flatten() {
        m += g * g.transpose();
    }
    (h, m)
}

/// Closed-form estimate from an explicit association set.
pub fn censi_from_associations(
    assoc: &[Association],
    moved: &[Vec3],
    reference: &[Vec3],
    rotation: &Mat3,
    noise: &SensorNoiseModel,
    config: &CensiConfig,
) -> CensiEstimate {
    let (h, gg) = hessian_and_noise(assoc, moved, reference, rotation, config.reference_noise);
    let s2 = noise.sigma * noise.sigma;
    let eig = SymmetricEigen::new((h + h.transpose()) * 0.5);
    let lmax = eig.eigenvalues.amax();

    let mut hinv = Mat6::zeros();
    let mut degenerate = Vec::new();
    for k in 0..6 {
        let l = eig.eigenvalues[k];
        let v: Vec6 = eig.eigenvectors.column(k).into();
        if lmax > 0.0 && l > config.degeneracy_tol * lmax {
            hinv += v * v.transpose() / l;
        } else {
            degenerate.push(v);
        }
    }
    let mut y = hinv * (gg * s2) * hinv;
    // Unconstrained directions get the variance of a direction whose
    // curvature sits at the degeneracy threshold.
    if !degenerate.is_empty() {
        let scale = if config.reference_noise { 2.0 } else { 1.0 };
        let floor = config.degeneracy_tol * lmax.max(f64::MIN_POSITIVE);
        for v in &degenerate {
            y += v * v.transpose() * (2.0 * scale * s2 / floor);
        }
    }
    CensiEstimate {
        covariance: Covariance::new(y),
        degenerate_directions: degenerate,
        hessian_eigenvalues: eig.eigenvalues,
    }
}

/// Closed-form estimate at the registration result `t_hat`, with associations
/// formed as in the final ICP iteration.
pub fn censi_covariance(
    pair: &PreparedPair,
    t_hat: &RigidTransform,
    noise: &SensorNoiseModel,
    config: &CensiConfig,
) -> CensiEstimate {
    let (moved, assoc) = pair.associations(t_hat);
    censi_from_associations(&assoc, &moved, &pair.reference.points, &t_hat.rotation, noise, config)
}

pub fn censi_for_clouds(
    reading: &PointCloud,
    reference: &PointCloud,
    t_hat: &RigidTransform,
    noise: &SensorNoiseModel,
    icp: &IcpConfig,
    config: &CensiConfig,
) -> Result<CensiEstimate> {
    let pair = PreparedPair::new(reading, reference, icp)?;
    Ok(censi_covariance(&pair, t_hat, noise, config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepConfig {
    pub scene: SceneSpec,
    pub sigmas: Vec<f64>,
    pub n_samples: usize,
    pub a: f64,
    pub icp: IcpConfig,
    pub dbscan: DbscanConfig,
    pub censi: CensiConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepRow {
    pub sigma: f64,
    pub trace_sampled: f64,
    pub trace_censi: f64,
    pub n_kept: usize,
}

/// For each noise level: regenerate the scene, sample ICP around ground
/// truth, and compare with the closed form at the registration from ground
/// truth. The surface samples are shared across levels; only the noise
/// amplitude changes.
pub fn noise_sweep(config: &NoiseSweepConfig) -> Result<Vec<NoiseSweepRow>> {
    config
        .sigmas
        .iter()
        .map(|&sigma| {
            let spec = config.scene.with_sigma(sigma);
            let scene = generate_scene(&spec)?;
            let pair = PreparedPair::new(&scene.reading, &scene.reference, &config.icp)?;
            let model = PerturbationModel::new(scene.ground_truth, config.a)?;
            let samples = sample_registrations(&pair, &model, config.n_samples, config.seed)?;
            let (trace_sampled, n_kept) = match filtered_covariance(&samples, &config.dbscan) {
                Ok((y, _)) => (y.covariance.trace(), y.n_kept),
                Err(Error::TooFewSamples { got, .. }) => (f64::NAN, got),
                Err(e) => return Err(e),
            };
            let t_hat = pair.icp(&scene.ground_truth).transform;
            let censi = censi_covariance(&pair, &t_hat, &SensorNoiseModel::new(sigma)?, &config.censi);
            Ok(NoiseSweepRow {
                sigma,
                trace_sampled,
                trace_censi: censi.covariance.trace(),
                n_kept,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{estimate_normals, PointCloud};
    use crate::icp::minimize_point_to_plane;
    use crate::scene::Archetype;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Points on three orthogonal planes, each matched to itself.
    fn frozen_planes(n: usize, seed: u64) -> (Vec<Vec3>, Vec<Association>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut assoc = Vec::new();
        for k in 0..3 {
            for _ in 0..n {
                let mut p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                p[k] = -1.0;
                let mut nrm = Vec3::zeros();
                nrm[k] = 1.0;
                assoc.push(Association {
                    reading: pts.len(),
                    reference: pts.len(),
                    dist2: 0.0,
                    normal: nrm,
                });
                pts.push(p);
            }
        }
        (pts, assoc)
    }

    #[test]
    fn zero_noise_zero_covariance() {
        let (pts, assoc) = frozen_planes(50, 1);
        let e = censi_from_associations(&assoc, &pts, &pts, &Mat3::identity(), &SensorNoiseModel { sigma: 0.0 }, &CensiConfig::default());
        assert_eq!(*e.covariance.matrix(), Mat6::zeros());
        assert!(e.degenerate_directions.is_empty());
    }

    #[test]
    fn matches_linear_least_squares() {
        let (pts, assoc) = frozen_planes(100, 2);
        let sigma = 0.01;
        let e = censi_from_associations(&assoc, &pts, &pts, &Mat3::identity(), &SensorNoiseModel { sigma }, &CensiConfig::default());
        let mut a = Mat6::zeros();
        for x in &assoc {
            let (_, j) = residual_row(x, &pts, &pts);
            a += j * j.transpose();
        }
        let exact = a.try_inverse().unwrap() * sigma * sigma;
        assert!((e.covariance.matrix() - exact).norm() < 1e-9 * exact.norm());

        // Monte-Carlo re-solve on the frozen associations.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
        let trials = 4000;
        let mut emp = Mat6::zeros();
        for _ in 0..trials {
            let noisy: Vec<Vec3> = pts
                .iter()
                .map(|p| p + Vec3::from_fn(|_, _| rand_distr::Distribution::sample(&normal, &mut rng)))
                .collect();
            let x = minimize_point_to_plane(&assoc, &noisy, &pts).step.to_vector();
            emp += x * x.transpose();
        }
        emp /= trials as f64;
        assert!((emp - exact).norm() < 0.1 * exact.norm());
    }

    #[test]
    fn quadratic_in_sigma() {
        let scene = generate_scene(&SceneSpec::new(Archetype::Cube).with_sigma(0.01).with_points(600).with_seed(2)).unwrap();
        let pair = PreparedPair::new(&scene.reading, &scene.reference, &IcpConfig::default()).unwrap();
        let t = pair.icp(&scene.ground_truth).transform;
        for cfg in [CensiConfig::default(), CensiConfig { reference_noise: true, ..Default::default() }] {
            let a = censi_covariance(&pair, &t, &SensorNoiseModel { sigma: 0.01 }, &cfg).covariance;
            let b = censi_covariance(&pair, &t, &SensorNoiseModel { sigma: 0.02 }, &cfg).covariance;
            assert!((b.matrix() - a.matrix() * 4.0).norm() <= 1e-10 * b.matrix().norm());
            assert!(a.is_psd());
        }
    }

    #[test]
    fn single_plane_is_degenerate() {
        let mut pts = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                pts.push(Vec3::new(i as f64 * 0.1 - 1.0, j as f64 * 0.1 - 1.0, -1.0));
            }
        }
        let q = estimate_normals(&PointCloud::new(pts), 10).unwrap();
        let cfg = IcpConfig { knn: 1, ..IcpConfig::default() };
        let e = censi_for_clouds(&q, &q, &RigidTransform::identity(), &SensorNoiseModel { sigma: 0.01 }, &cfg, &CensiConfig::default()).unwrap();
        assert_eq!(e.degenerate_directions.len(), 3);
        let y = e.covariance.matrix();
        let var = |v: &Vec6| v.dot(&(y * v));
        let constrained_max = [Vec6::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0), Vec6::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0), Vec6::new(0.0, 0.0, 0.0, 0.0, 1.0, 0.0)]
            .iter()
            .map(var)
            .fold(0.0, f64::max);
        for v in &e.degenerate_directions {
            assert!(var(v) >= 1e3 * constrained_max);
        }
    }
}
