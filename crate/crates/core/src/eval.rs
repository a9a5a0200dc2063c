//! Scoring covariance estimates: Gaussian KL divergence on registration
//! pairs and Mahalanobis consistency of compounded odometry.

use serde::{Deserialize, Serialize};

use crate::descriptor::TrainingExample;
use crate::error::{Error, Result};
use crate::icp::Registrar;
use crate::predictor::Predictor;
use crate::rng::derive_seed;
use crate::sampling::{draw_initial_transform, PerturbationModel};
use crate::se3::{compound_covariance_local, mahalanobis3, mahalanobis_vec, CompoundOrder, Covariance, Mat3, Mat6, RigidTransform, Twist};

/// Direction of every KL value this crate reports.
pub const KL_DIRECTION: &str = "KL(sampled || predicted)";

fn factor(y: &Covariance) -> Result<(nalgebra::Cholesky<f64, nalgebra::U6>, f64)> {
    let (reg, _) = y.regularized();
    let ch = reg.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let logdet = 2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    Ok((ch, logdet))
}

/// `KL(𝒩(0, Y0) ‖ 𝒩(0, Y1))`.
pub fn kl_divergence(y0: &Covariance, y1: &Covariance) -> Result<f64> {
    let (c0, ld0) = factor(y0)?;
    let (c1, ld1) = factor(y1)?;
    let y0r = c0.l() * c0.l().transpose();
    let tr = c1.solve(&y0r).trace();
    Ok((0.5 * (tr - 6.0 + ld1 - ld0)).max(0.0))
}

/// Elementwise mean of the example covariances.
pub fn baseline_covariance(examples: &[TrainingExample]) -> Result<Covariance> {
    if examples.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let n = examples.len() as f64;
    Ok(Covariance::new(examples.iter().map(|e| *e.covariance.matrix()).sum::<Mat6>() / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub id: String,
    pub kl_baseline: f64,
    pub kl_learned: f64,
    pub kl_censi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub rows: Vec<PairScore>,
    pub mean_baseline: f64,
    pub mean_learned: f64,
    pub mean_censi: Option<f64>,
}

/// KL of every test example's sampled covariance against the training
/// baseline, the predictor and optionally a closed-form estimate per
/// example.
pub fn evaluate_predictor(test: &[TrainingExample], predictor: &Predictor, censi: Option<&[Covariance]>) -> Result<PairEvaluation> {
    if let Some(c) = censi {
        if c.len() != test.len() {
            return Err(Error::LengthMismatch { left: test.len(), right: c.len() });
        }
    }
    let base = predictor.baseline();
    let mut rows = Vec::with_capacity(test.len());
    for (k, ex) in test.iter().enumerate() {
        let learned = predictor.predict(&ex.descriptor)?;
        rows.push(PairScore {
            id: ex.id.clone(),
            kl_baseline: kl_divergence(&ex.covariance, &base)?,
            kl_learned: kl_divergence(&ex.covariance, &learned)?,
            kl_censi: censi.map(|c| kl_divergence(&ex.covariance, &c[k])).transpose()?,
        });
    }
    Ok(summarize(rows))
}

/// Leave-one-out scores on the training set itself: each example is
/// predicted from the others, and the baseline is the mean of the others.
pub fn evaluate_leave_one_out(predictor: &Predictor) -> Result<PairEvaluation> {
    let n = predictor.examples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let total: Mat6 = predictor.examples.iter().map(|e| *e.covariance.matrix()).sum();
    let rows = (0..n)
        .map(|k| {
            let ex = &predictor.examples[k];
            let base = Covariance::new((total - ex.covariance.matrix()) / (n - 1) as f64);
            Ok(PairScore {
                id: ex.id.clone(),
                kl_baseline: kl_divergence(&ex.covariance, &base)?,
                kl_learned: kl_divergence(&ex.covariance, &predictor.predict_leave_one_out(k)?)?,
                kl_censi: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(rows))
}

fn summarize(rows: Vec<PairScore>) -> PairEvaluation {
    let n = rows.len().max(1) as f64;
    let mean_censi = if rows.iter().all(|r| r.kl_censi.is_some()) && !rows.is_empty() {
        Some(rows.iter().filter_map(|r| r.kl_censi).sum::<f64>() / n)
    } else {
        None
    };
    PairEvaluation {
        mean_baseline: rows.iter().map(|r| r.kl_baseline).sum::<f64>() / n,
        mean_learned: rows.iter().map(|r| r.kl_learned).sum::<f64>() / n,
        mean_censi,
        rows,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub estimate: RigidTransform,
    pub covariance: Covariance,
    pub ground_truth: RigidTransform,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResult {
    pub steps: Vec<StepResult>,
    pub final_estimate: RigidTransform,
    /// Body-frame covariance of the final pose.
    pub final_covariance: Covariance,
    pub final_truth: RigidTransform,
    /// `log(T̄_F⁻¹ T̂_F)`.
    pub error: Twist,
    pub d_m: f64,
    pub d_m_translation: f64,
    pub d_m_rotation: f64,
    pub converged: bool,
}

impl TrajectoryResult {
    /// Final position error and its 2×2 covariance in the world xy plane.
    pub fn ground_plane(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        let r = self.final_truth.rotation;
        let c = r * self.final_covariance.translation_block() * r.transpose();
        let e = self.final_estimate.translation - self.final_truth.translation;
        ([e.x, e.y], [[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub a: f64,
    pub order: CompoundOrder,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig { a: 0.05, order: CompoundOrder::Fourth }
    }
}

/// Odometry along a chain of registrations. Step `k` registers with an
/// initial guess drawn around `truths[k]`, then `estimate(k, T̂_k)` supplies
/// its covariance. Poses and body-frame covariances are compounded in
/// order.
pub fn run_trajectory<R, E>(registrars: &[R], truths: &[RigidTransform], estimate: E, config: &TrajectoryConfig, seed: u64) -> Result<TrajectoryResult>
where
    R: Registrar,
    E: Fn(usize, &RigidTransform) -> Result<Covariance>,
{
    if registrars.is_empty() || registrars.len() != truths.len() {
        return Err(Error::LengthMismatch { left: registrars.len(), right: truths.len() });
    }
    let mut steps = Vec::with_capacity(truths.len());
    for (k, (reg, truth)) in registrars.iter().zip(truths).enumerate() {
        let model = PerturbationModel::new(*truth, config.a)?;
        let init = draw_initial_transform(&model, derive_seed(seed, "trajectory/step", k as u64));
        let r = reg.register(&init);
        let y = estimate(k, &r.transform)?;
        steps.push(StepResult { estimate: r.transform, covariance: y, ground_truth: *truth, converged: r.converged });
    }
    compound_steps(steps, config.order)
}

/// Compounds finished steps into the final pose, its covariance and the
/// consistency statistics. Swapping the step covariances and calling this
/// again scores another estimator on the same registrations.
pub fn compound_steps(steps: Vec<StepResult>, order: CompoundOrder) -> Result<TrajectoryResult> {
    if steps.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut t_acc = RigidTransform::identity();
    let mut t_true = RigidTransform::identity();
    let mut y_acc = Covariance::zeros();
    for (k, s) in steps.iter().enumerate() {
        y_acc = if k == 0 { s.covariance } else { compound_covariance_local(&s.estimate, &y_acc, &s.covariance, order)? };
        t_acc = t_acc.compose(&s.estimate);
        t_true = t_true.compose(&s.ground_truth);
    }
    let error = t_true.inverse().compose(&t_acc).log();
    let v = error.to_vector();
    let block = |m: &Mat6, o: usize| -> Mat3 { m.fixed_view::<3, 3>(o, o).into_owned() };
    Ok(TrajectoryResult {
        converged: steps.iter().all(|s| s.converged),
        steps,
        final_estimate: t_acc,
        final_covariance: y_acc,
        final_truth: t_true,
        d_m: mahalanobis_vec(&v, &y_acc),
        d_m_translation: mahalanobis3(&error.u, &block(y_acc.matrix(), 0)),
        d_m_rotation: mahalanobis3(&error.omega, &block(y_acc.matrix(), 3)),
        error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consistency {
    Optimistic,
    Consistent,
    Pessimistic,
}

pub const OPTIMISTIC_ABOVE: f64 = 3.0;
pub const PESSIMISTIC_BELOW: f64 = 1.5;

/// Above 3 is optimistic, below 1.5 pessimistic; both bounds are consistent.
pub fn classify(mean_d_m: f64) -> Consistency {
    if mean_d_m > OPTIMISTIC_ABOVE {
        Consistency::Optimistic
    } else if mean_d_m < PESSIMISTIC_BELOW {
        Consistency::Pessimistic
    } else {
        Consistency::Consistent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub mean_d_m: f64,
    pub mean_d_m_translation: f64,
    pub mean_d_m_rotation: f64,
    pub classification: Consistency,
    pub used: usize,
    /// Trajectories left out because a step did not converge.
    pub excluded: usize,
}

pub fn consistency_report(trajectories: &[TrajectoryResult], exclude_unconverged: bool) -> Result<ConsistencyReport> {
    let used: Vec<&TrajectoryResult> = trajectories.iter().filter(|t| t.converged || !exclude_unconverged).collect();
    if used.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let n = used.len() as f64;
    let mean = |f: fn(&TrajectoryResult) -> f64| used.iter().map(|t| f(t)).sum::<f64>() / n;
    let mean_d_m = mean(|t| t.d_m);
    Ok(ConsistencyReport {
        mean_d_m,
        mean_d_m_translation: mean(|t| t.d_m_translation),
        mean_d_m_rotation: mean(|t| t.d_m_rotation),
        classification: classify(mean_d_m),
        used: used.len(),
        excluded: trajectories.len() - used.len(),
    })
}

/// Fraction of 2D errors inside the `k`-sigma ellipse of `cov`.
pub fn ellipse_coverage(errors: &[[f64; 2]], cov: &[[f64; 2]; 2], k: f64) -> f64 {
    let m = nalgebra::Matrix2::new(cov[0][0], cov[0][1], cov[1][0], cov[1][1]);
    let inv = match m.try_inverse() {
        Some(i) => i,
        None => return 0.0,
    };
    let inside = errors
        .iter()
        .filter(|e| {
            let v = nalgebra::Vector2::new(e[0], e[1]);
            v.dot(&(inv * v)) <= k * k
        })
        .count();
    inside as f64 / errors.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::Descriptor;
    use crate::icp::RegistrationResult;
    use crate::se3::Vec3 as Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pd(rng: &mut ChaCha8Rng) -> Covariance {
        let a = Mat6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        Covariance::new(a * a.transpose() + Mat6::identity() * 0.1)
    }

    #[test]
    fn kl_known_values() {
        let i = Covariance::identity();
        assert_eq!(kl_divergence(&i, &i).unwrap(), 0.0);
        let want = 0.5 * (3.0 - 6.0 + 6.0 * 2f64.ln());
        assert!((kl_divergence(&i, &i.scale(2.0)).unwrap() - want).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!(kl_divergence(&random_pd(&mut rng), &random_pd(&mut rng)).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_invariant_under_congruence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (a, b) = (random_pd(&mut rng), random_pd(&mut rng));
            let m = Mat6::from_fn(|_, _| rng.random_range(-1.0..1.0)) + Mat6::identity() * 3.0;
            let k0 = kl_divergence(&a, &b).unwrap();
            let k1 = kl_divergence(&a.congruence(&m), &b.congruence(&m)).unwrap();
            assert!((k0 - k1).abs() < 1e-8 * k0.max(1.0));
        }
    }

    #[test]
    fn baseline_is_mean() {
        let ex = |y: Covariance| TrainingExample { id: String::new(), descriptor: Descriptor(vec![0.0]), covariance: y, augmentation: 0.0 };
        let b = baseline_covariance(&[ex(Covariance::identity()), ex(Covariance::scaled_identity(3.0))]).unwrap();
        assert_eq!(b, Covariance::scaled_identity(2.0));
        assert!(baseline_covariance(&[]).is_err());
    }

    #[test]
    fn classification_boundaries() {
        assert_eq!(classify(3.5), Consistency::Optimistic);
        assert_eq!(classify(1.0), Consistency::Pessimistic);
        assert_eq!(classify(2.0), Consistency::Consistent);
        assert_eq!(classify(3.0), Consistency::Consistent);
        assert_eq!(classify(1.5), Consistency::Consistent);
    }

    struct Exact;
    impl Registrar for Exact {
        fn register(&self, initial: &RigidTransform) -> RegistrationResult {
            RegistrationResult { transform: *initial, iterations: 0, objective: 0.0, converged: true, degenerate: false }
        }
    }

    #[test]
    fn zero_perturbation_trajectory_is_exact() {
        let truths = vec![RigidTransform::rot_z(0.1), RigidTransform::rot_x(-0.2), RigidTransform::identity()];
        let cfg = TrajectoryConfig { a: 0.0, ..Default::default() };
        let r = run_trajectory(&[Exact, Exact, Exact], &truths, |_, _| Ok(Covariance::scaled_identity(1e-4)), &cfg, 3).unwrap();
        assert_eq!(r.d_m, 0.0);
        assert!(r.error.norm() < 1e-12);
        assert!(r.converged);
    }

    #[test]
    fn rescoring_with_scaled_covariances() {
        let truths = vec![RigidTransform::rot_z(0.1), RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0))];
        // Second order is linear in the step covariances.
        let cfg = TrajectoryConfig { order: CompoundOrder::Second, ..Default::default() };
        let r = run_trajectory(&[Exact, Exact], &truths, |_, _| Ok(Covariance::scaled_identity(1e-3)), &cfg, 5).unwrap();
        let mut steps = r.steps.clone();
        for s in &mut steps {
            s.covariance = s.covariance.scale(4.0);
        }
        let again = compound_steps(steps, cfg.order).unwrap();
        assert_eq!(again.final_estimate, r.final_estimate);
        assert!((again.d_m - r.d_m / 2.0).abs() < 1e-9 * r.d_m);
        assert!(compound_steps(Vec::new(), cfg.order).is_err());
    }

    #[test]
    fn ellipse_coverage_counts() {
        let cov = [[1.0, 0.0], [0.0, 4.0]];
        let errs = [[0.0, 0.0], [1.9, 0.0], [0.0, 3.9], [2.1, 0.0]];
        assert_eq!(ellipse_coverage(&errs, &cov, 2.0), 0.75);
    }
}
