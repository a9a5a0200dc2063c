//! Learned covariance predictor: a weighted average of training covariances,
//! weighted by `exp(-ρ)` under the learned metric `ρ(d, d') = ‖Θ (d - d')‖²`.

use std::path::Path;

use nalgebra::Cholesky;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::descriptor::{Descriptor, GridSpec, TrainingExample, NORMAL_CODEBOOK};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::se3::{Covariance, Mat6};

/// Upper-triangular matrix stored column by column: entry `(r, c)`, `r ≤ c`,
/// sits at `c (c + 1) / 2 + r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub dim: usize,
    pub packed: Vec<f64>,
}

#[inline]
fn col_offset(c: usize) -> usize {
    c * (c + 1) / 2
}

impl Theta {
    pub fn zeros(dim: usize) -> Self {
        Theta { dim, packed: vec![0.0; col_offset(dim)] }
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        let mut t = Theta::zeros(dim);
        for i in 0..dim {
            t.packed[col_offset(i) + i] = s;
        }
        t
    }

    /// Default initialisation `I / √dim`.
    pub fn initial(dim: usize) -> Self {
        Theta::scaled_identity(dim, 1.0 / (dim as f64).sqrt())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        if r > c {
            0.0
        } else {
            self.packed[col_offset(c) + r]
        }
    }

    /// Panics below the diagonal.
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(r <= c, "Θ is upper triangular");
        self.packed[col_offset(c) + r] = v;
    }

    pub fn frobenius2(&self) -> f64 {
        self.packed.iter().map(|x| x * x).sum()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.dim, self.dim, |r, c| self.get(r, c))
    }

    /// `Θ δ` for a sparse `δ` given as `(index, value)` pairs.
    pub fn apply_sparse(&self, delta: &[(usize, f64)]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(c, v) in delta {
            let col = &self.packed[col_offset(c)..col_offset(c) + c + 1];
            for (o, t) in out.iter_mut().zip(col) {
                *o += t * v;
            }
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.packed.iter().all(|x| x.is_finite())
    }
}

fn sparse_diff(a: &[f64], b: &[f64]) -> Vec<(usize, f64)> {
    a.iter()
        .zip(b)
        .enumerate()
        .filter_map(|(i, (x, y))| {
            let d = x - y;
            (d != 0.0).then_some((i, d))
        })
        .collect()
}

fn check_len(a: &Descriptor, dim: usize) -> Result<()> {
    if a.len() != dim {
        return Err(Error::LengthMismatch { left: a.len(), right: dim });
    }
    Ok(())
}

/// `ρ(d, d') = (d - d')ᵀ Θᵀ Θ (d - d')`.
pub fn descriptor_distance(d: &Descriptor, other: &Descriptor, theta: &Theta) -> Result<f64> {
    if d.len() != other.len() {
        return Err(Error::LengthMismatch { left: d.len(), right: other.len() });
    }
    check_len(d, theta.dim)?;
    let u = theta.apply_sparse(&sparse_diff(d.as_slice(), other.as_slice()));
    Ok(u.iter().map(|x| x * x).sum())
}

/// Normalised `exp(-ρ)` weights. Shifting by the smallest `ρ` leaves the
/// normalised weights unchanged and keeps at least one of them at 1.
pub fn softmin_weights(rho: &[f64]) -> Vec<f64> {
    let m = rho.iter().copied().fold(f64::INFINITY, f64::min);
    if !m.is_finite() {
        log::warn!("non-finite descriptor distances; falling back to uniform weights");
        return vec![1.0 / rho.len() as f64; rho.len()];
    }
    let w: Vec<f64> = rho.iter().map(|r| (-(r - m)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn weighted_mean(weights: &[f64], ys: impl Iterator<Item = Mat6>) -> Mat6 {
    weights.iter().zip(ys).map(|(w, y)| y * *w).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// `F̂` was not positive definite and had to be regularised.
    pub regularized: bool,
}

struct Factored {
    inv: Mat6,
    logdet: f64,
    regularized: bool,
}

fn factor(f: &Covariance) -> Result<Factored> {
    let (f, regularized) = f.regularized();
    let ch = Cholesky::new(*f.matrix()).ok_or(Error::NotPositiveDefinite)?;
    let logdet = 2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    Ok(Factored { inv: ch.inverse(), logdet, regularized })
}

/// `det(F̂) + tr(F̂⁻¹ Y)`, or `log det(F̂) + tr(F̂⁻¹ Y)` with `logdet`.
pub fn loss(f: &Covariance, y: &Covariance, logdet: bool) -> Result<LossValue> {
    let fa = factor(f)?;
    let det_term = if logdet { fa.logdet } else { fa.logdet.exp() };
    Ok(LossValue {
        value: det_term + (fa.inv * y.matrix()).trace(),
        regularized: fa.regularized,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Weight of `‖Θ‖²_F` in the objective.
    pub lambda: f64,
    pub logdet_loss: bool,
    /// Stop when the relative change of the epoch objective drops below this.
    pub tolerance: f64,
    pub diagonal_only: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            max_epochs: 100,
            lambda: 1e-3,
            logdet_loss: false,
            tolerance: 1e-6,
            diagonal_only: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub theta: Theta,
    pub examples: Vec<TrainingExample>,
    pub grid: GridSpec,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Objective before training, then after every epoch.
    pub objective: Vec<f64>,
    pub epochs: usize,
    pub converged: bool,
}

/// Per-example forward pass, kept for the gradient.
struct Forward {
    others: Vec<usize>,
    deltas: Vec<Vec<(usize, f64)>>,
    projected: Vec<Vec<f64>>,
    weights: Vec<f64>,
    f: Mat6,
}

impl Predictor {
    pub fn new(examples: Vec<TrainingExample>, grid: GridSpec, config: TrainConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        let dim = examples[0].descriptor.len();
        for ex in &examples {
            check_len(&ex.descriptor, dim)?;
            ex.covariance.check_psd()?;
        }
        Ok(Predictor { theta: Theta::initial(dim), examples, grid, config })
    }

    pub fn dim(&self) -> usize {
        self.theta.dim
    }

    /// Elementwise mean of the training covariances.
    pub fn baseline(&self) -> Covariance {
        let n = self.examples.len() as f64;
        Covariance::new(self.examples.iter().map(|e| *e.covariance.matrix()).sum::<Mat6>() / n)
    }

    fn forward(&self, theta: &Theta, d: &Descriptor, exclude: Option<usize>) -> Forward {
        let others: Vec<usize> = (0..self.examples.len()).filter(|&j| Some(j) != exclude).collect();
        let deltas: Vec<Vec<(usize, f64)>> = others
            .iter()
            .map(|&j| sparse_diff(d.as_slice(), self.examples[j].descriptor.as_slice()))
            .collect();
        let projected: Vec<Vec<f64>> = deltas.iter().map(|dl| theta.apply_sparse(dl)).collect();
        let rho: Vec<f64> = projected.iter().map(|u| u.iter().map(|x| x * x).sum()).collect();
        let weights = softmin_weights(&rho);
        let f = weighted_mean(&weights, others.iter().map(|&j| *self.examples[j].covariance.matrix()));
        Forward { others, deltas, projected, weights, f }
    }

    pub fn predict(&self, d: &Descriptor) -> Result<Covariance> {
        check_len(d, self.dim())?;
        Ok(Covariance::new(self.forward(&self.theta, d, None).f))
    }

    /// Prediction for training example `k` from all the others.
    pub fn predict_leave_one_out(&self, k: usize) -> Result<Covariance> {
        if self.examples.len() < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: self.examples.len() });
        }
        Ok(Covariance::new(self.forward(&self.theta, &self.examples[k].descriptor, Some(k)).f))
    }

    /// Leave-one-out loss of example `k` and, when `grad` is given, its
    /// gradient with respect to Θ added into `grad` (packed layout).
    fn example_loss(&self, theta: &Theta, k: usize, grad: Option<&mut [f64]>) -> Result<f64> {
        let ex = &self.examples[k];
        let fw = self.forward(theta, &ex.descriptor, Some(k));
        let fa = factor(&Covariance::new(fw.f))?;
        let y = ex.covariance.matrix();
        let det_term = if self.config.logdet_loss { fa.logdet } else { fa.logdet.exp() };
        let value = det_term + (fa.inv * y).trace();
        if let Some(grad) = grad {
            // dL/dF, then dL/dρ_j = -w_j ⟨G, Y_j - F⟩, then dρ/dΘ = 2 (Θδ) δᵀ.
            let scale = if self.config.logdet_loss { 1.0 } else { fa.logdet.exp() };
            let g = fa.inv * scale - fa.inv * y * fa.inv;
            for (idx, &j) in fw.others.iter().enumerate() {
                let yj = self.examples[j].covariance.matrix();
                let dl_drho = -fw.weights[idx] * g.dot(&(yj - fw.f));
                if dl_drho == 0.0 {
                    continue;
                }
                let u = &fw.projected[idx];
                for &(c, v) in &fw.deltas[idx] {
                    let a = 2.0 * dl_drho * v;
                    let off = col_offset(c);
                    if self.config.diagonal_only {
                        grad[off + c] += a * u[c];
                    } else {
                        for r in 0..=c {
                            grad[off + r] += a * u[r];
                        }
                    }
                }
            }
        }
        Ok(value)
    }

    /// Mean leave-one-out loss plus `λ ‖Θ‖²_F`.
    pub fn objective(&self, theta: &Theta) -> Result<f64> {
        let n = self.examples.len();
        let losses = crate::par::map_indexed(n, |k| self.example_loss(theta, k, None));
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / n as f64 + self.config.lambda * theta.frobenius2())
    }

    /// Gradient of [`Predictor::objective`] in packed layout.
    pub fn gradient(&self, theta: &Theta) -> Result<Vec<f64>> {
        let n = self.examples.len();
        let mut grad = vec![0.0; theta.packed.len()];
        for k in 0..n {
            self.example_loss(theta, k, Some(&mut grad))?;
        }
        for (g, t) in grad.iter_mut().zip(&theta.packed) {
            *g = *g / n as f64 + 2.0 * self.config.lambda * t;
        }
        Ok(grad)
    }

    /// Stochastic gradient descent with one example per step, visiting the
    /// examples in a seeded shuffled order each epoch.
    pub fn train(&mut self) -> Result<TrainReport> {
        let n = self.examples.len();
        if n < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: n });
        }
        let cfg = self.config;
        let mut history = vec![self.objective(&self.theta)?];
        let mut order: Vec<usize> = (0..n).collect();
        let mut grad = vec![0.0; self.theta.packed.len()];
        let mut converged = false;
        let mut epochs = 0;
        for epoch in 0..cfg.max_epochs {
            order.shuffle(&mut stream(cfg.seed, "train/shuffle", epoch as u64));
            for &k in &order {
                grad.iter_mut().for_each(|g| *g = 0.0);
                self.example_loss(&self.theta, k, Some(&mut grad))?;
                let decay = 2.0 * cfg.lambda;
                for (t, g) in self.theta.packed.iter_mut().zip(&grad) {
                    *t -= cfg.learning_rate * (g + decay * *t);
                }
            }
            epochs = epoch + 1;
            let obj = self.objective(&self.theta).unwrap_or(f64::NAN);
            if !obj.is_finite() || !self.theta.is_finite() {
                return Err(Error::Diverged { epoch: epochs, loss: obj });
            }
            let prev = *history.last().expect("history starts non-empty");
            history.push(obj);
            log::debug!("epoch {epochs}: objective {obj:.6e}");
            if ((prev - obj) / prev.abs().max(f64::MIN_POSITIVE)).abs() < cfg.tolerance {
                converged = true;
                break;
            }
        }
        Ok(TrainReport { objective: history, epochs, converged })
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    grid: GridSpec,
    codebook: Vec<[f64; 3]>,
    histogram_normalization: String,
    config: TrainConfig,
    theta: Theta,
    examples: Vec<TrainingExample>,
}

impl Predictor {
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            grid: self.grid,
            codebook: NORMAL_CODEBOOK.to_vec(),
            histogram_normalization: "count".into(),
            config: self.config,
            theta: self.theta.clone(),
            examples: self.examples.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != MODEL_FORMAT_VERSION {
            return Err(Error::FormatVersion { found, expected: MODEL_FORMAT_VERSION });
        }
        let file: ModelFile = serde_json::from_value(value)?;
        if file.theta.packed.len() != col_offset(file.theta.dim) {
            return Err(Error::invalid("theta", "packed length does not match dimension"));
        }
        let p = Predictor::new(file.examples, file.grid, file.config)?;
        check_len(&p.examples[0].descriptor, file.theta.dim)?;
        Ok(Predictor { theta: file.theta, ..p })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataset::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Predictor::from_json(&text)
    }
}
