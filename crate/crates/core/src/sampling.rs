//! Monte-Carlo sampling of ICP results around ground truth.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::dbscan::{dbscan_filter, DbscanConfig};
use crate::error::{Error, Result};
use crate::icp::{IcpConfig, PreparedPair, Registrar};
use crate::rng::{derive_seed, stream};
use crate::se3::{Covariance, Mat6, RigidTransform, Twist, Vec6};

/// Initial guesses `Ť = exp(ξ) T̄` with `ξ ~ 𝒩(0, a·I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationModel {
    pub mean: RigidTransform,
    pub a: f64,
}

pub const DEFAULT_PERTURBATION: f64 = 0.05;

impl PerturbationModel {
    pub fn new(mean: RigidTransform, a: f64) -> Result<Self> {
        if !(a >= 0.0) || !a.is_finite() {
            return Err(Error::invalid("a", format!("{a} must be a finite non-negative variance")));
        }
        Ok(PerturbationModel { mean, a })
    }

    pub fn covariance(&self) -> Covariance {
        Covariance::scaled_identity(self.a)
    }
}

pub fn draw_perturbation(a: f64, seed: u64) -> Twist {
    if a == 0.0 {
        return Twist::zero();
    }
    let mut rng = stream(seed, "perturbation", 0);
    let s = a.sqrt();
    let v = Vec6::from_fn(|_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        s * z
    });
    Twist::from_vector(&v)
}

pub fn draw_initial_transform(model: &PerturbationModel, seed: u64) -> RigidTransform {
    let xi = draw_perturbation(model.a, seed);
    if model.a == 0.0 {
        return model.mean;
    }
    xi.exp().compose(&model.mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub seed: u64,
    /// `log(T̄⁻¹ T̂)`.
    pub xi: Twist,
    pub converged: bool,
    /// DBSCAN label; `None` before filtering or for noise.
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn from_twists(xs: impl IntoIterator<Item = Twist>) -> Self {
        SampleSet {
            samples: xs
                .into_iter()
                .enumerate()
                .map(|(i, xi)| Sample { seed: i as u64, xi, converged: true, cluster: None })
                .collect(),
        }
    }

    pub fn twists(&self) -> impl Iterator<Item = &Twist> {
        self.samples.iter().map(|s| &s.xi)
    }

    pub fn mean(&self) -> Twist {
        if self.is_empty() {
            return Twist::zero();
        }
        let sum: Vec6 = self.twists().map(Twist::to_vector).sum();
        Twist::from_vector(&(sum / self.len() as f64))
    }

    pub fn converged_count(&self) -> usize {
        self.samples.iter().filter(|s| s.converged).count()
    }

    /// One row per sample: `seed,u_x,u_y,u_z,w_x,w_y,w_z,converged,cluster`
    /// with cluster `-1` for noise or unlabelled samples.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["seed", "u_x", "u_y", "u_z", "w_x", "w_y", "w_z", "converged", "cluster"])?;
        for s in &self.samples {
            let v = s.xi.to_vector();
            let mut row = vec![s.seed.to_string()];
            row.extend(v.iter().map(|x| format!("{x:e}")));
            row.push(u8::from(s.converged).to_string());
            row.push(s.cluster.map_or(-1, |c| c as i64).to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Runs `n` registrations from perturbed initial guesses. Sample `i` uses a
/// seed derived from `(seed, i)` only, so the set does not depend on
/// scheduling.
pub fn sample_registrations<R: Registrar + ?Sized>(
    registrar: &R,
    model: &PerturbationModel,
    n: usize,
    seed: u64,
) -> Result<SampleSet> {
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let truth_inv = model.mean.inverse();
    let samples = crate::par::map_indexed(n, |i| {
        let s = derive_seed(seed, "sample", i as u64);
        let init = draw_initial_transform(model, s);
        let r = registrar.register(&init);
        let xi = truth_inv.compose(&r.transform).log();
        Sample {
            seed: s,
            xi,
            converged: r.converged && xi.is_finite(),
            cluster: None,
        }
    });
    Ok(SampleSet { samples })
}

/// Prepares the pair once, then samples.
pub fn sample_pair(
    reading: &PointCloud,
    reference: &PointCloud,
    model: &PerturbationModel,
    n: usize,
    config: &IcpConfig,
    seed: u64,
) -> Result<SampleSet> {
    let pair = PreparedPair::new(reading, reference, config)?;
    sample_registrations(&pair, model, n, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledCovariance {
    pub covariance: Covariance,
    pub n_total: usize,
    pub n_kept: usize,
    pub cluster: Option<usize>,
    /// Mean of the kept `ξ`; the covariance is not centred on it.
    pub mean: Twist,
}

/// `Y = 1/(n-1) Σ ξ ξᵀ` over every sample in the set, about ground truth
/// rather than the sample mean.
pub fn sampled_covariance(samples: &SampleSet) -> Result<SampledCovariance> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mut m = Mat6::zeros();
    for xi in samples.twists() {
        let v = xi.to_vector();
        m += v * v.transpose();
    }
    m /= (n - 1) as f64;
    Ok(SampledCovariance {
        covariance: Covariance::new(m),
        n_total: n,
        n_kept: n,
        cluster: None,
        mean: samples.mean(),
    })
}

/// DBSCAN filtering followed by the sampled covariance of the kept cluster.
/// Returns the labelled full set alongside.
pub fn filtered_covariance(samples: &SampleSet, dbscan: &DbscanConfig) -> Result<(SampledCovariance, SampleSet)> {
    let outcome = dbscan_filter(samples, dbscan)?;
    let mut cov = sampled_covariance(&outcome.kept)?;
    cov.n_total = samples.len();
    cov.cluster = outcome.cluster;
    Ok((cov, outcome.labelled))
}

pub const DIVERGENCE_TRANSLATION: f64 = 1.0;
pub const DIVERGENCE_ROTATION: f64 = 1.0;

/// False when the samples land on average more than 1 m or 1 rad from
/// ground truth; such pairs are discarded.
pub fn divergence_check(samples: &SampleSet) -> bool {
    if samples.is_empty() {
        return true;
    }
    let n = samples.len() as f64;
    let mu = samples.twists().map(|x| x.u.norm()).sum::<f64>() / n;
    let mw = samples.twists().map(|x| x.omega.norm()).sum::<f64>() / n;
    !(mu > DIVERGENCE_TRANSLATION || mw > DIVERGENCE_ROTATION || mu.is_nan() || mw.is_nan())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icp::RegistrationResult;
    use crate::se3::Vec3;

    struct Exact;
    impl Registrar for Exact {
        fn register(&self, initial: &RigidTransform) -> RegistrationResult {
            RegistrationResult {
                transform: *initial,
                iterations: 0,
                objective: 0.0,
                converged: true,
                degenerate: false,
            }
        }
    }

    #[test]
    fn zero_variance_returns_mean() {
        let t = RigidTransform::rot_z(0.3).compose(&RigidTransform::from_translation(Vec3::new(1.0, 2.0, 3.0)));
        let m = PerturbationModel::new(t, 0.0).unwrap();
        assert_eq!(draw_initial_transform(&m, 17), t);
        assert!(PerturbationModel::new(t, -1.0).is_err());
    }

    #[test]
    fn perturbation_statistics() {
        let n = 100_000;
        let mut m = Mat6::zeros();
        for i in 0..n {
            let v = draw_perturbation(0.05, i).to_vector();
            m += v * v.transpose();
        }
        m /= n as f64;
        for r in 0..6 {
            for c in 0..6 {
                let want = if r == c { 0.05 } else { 0.0 };
                assert!((m[(r, c)] - want).abs() < 0.03 * 0.05, "{r} {c} {}", m[(r, c)]);
            }
        }
    }

    #[test]
    fn seeds_are_reproducible() {
        let m = PerturbationModel::new(RigidTransform::identity(), 0.05).unwrap();
        assert_eq!(draw_initial_transform(&m, 3), draw_initial_transform(&m, 3));
        assert_ne!(draw_initial_transform(&m, 3), draw_initial_transform(&m, 4));
        let a = sample_registrations(&Exact, &m, 50, 9).unwrap();
        let b = sample_registrations(&Exact, &m, 50, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_registrar_recovers_perturbation() {
        let m = PerturbationModel::new(RigidTransform::identity(), 0.05).unwrap();
        let s = sample_registrations(&Exact, &m, 4000, 1).unwrap();
        let y = sampled_covariance(&s).unwrap().covariance;
        let err = (y.matrix() - Mat6::identity() * 0.05).norm() / (0.05 * 6f64.sqrt());
        assert!(err < 0.1, "{err}");
    }

    #[test]
    fn two_opposite_samples() {
        let xi = Twist::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.01, 0.0, -0.02));
        let neg = Twist::from_vector(&-xi.to_vector());
        let y = sampled_covariance(&SampleSet::from_twists([xi, neg])).unwrap();
        let v = xi.to_vector();
        assert!((y.covariance.matrix() - 2.0 * v * v.transpose()).norm() < 1e-15);
        assert!(sampled_covariance(&SampleSet::from_twists([xi])).is_err());
        let zero = sampled_covariance(&SampleSet::from_twists([Twist::zero(); 5])).unwrap();
        assert_eq!(*zero.covariance.matrix(), Mat6::zeros());
    }

    #[test]
    fn divergence_thresholds() {
        let at = |u: f64, w: f64| SampleSet::from_twists([Twist::new(Vec3::new(u, 0.0, 0.0), Vec3::new(0.0, w, 0.0)); 4]);
        assert!(divergence_check(&at(0.0, 0.0)));
        assert!(!divergence_check(&at(1.5, 0.0)));
        assert!(!divergence_check(&at(0.0, 1.2)));
        assert!(divergence_check(&at(0.9, 0.9)));
    }

    #[test]
    fn csv_export_has_one_row_per_sample() {
        let s = SampleSet::from_twists([Twist::zero(); 3]);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("seed,u_x"));
    }
}
