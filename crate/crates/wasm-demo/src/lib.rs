//! Browser bindings for three interactive views of ICP uncertainty:
//! Monte-Carlo samples with their covariance ellipse next to the closed
//! form, the point-to-plane cost landscape, and trace against sensor noise.
//!
//! Each binding takes plain numbers and returns a JSON string. The `*_data`
//! functions behind them are ordinary Rust and are what the tests exercise.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use icpcov::censi::{censi_covariance, noise_sweep, CensiConfig, NoiseSweepConfig, NoiseSweepRow, SensorNoiseModel};
use icpcov::dbscan::DbscanConfig;
use icpcov::icp::{IcpConfig, PreparedPair};
use icpcov::sampling::{filtered_covariance, sample_registrations, PerturbationModel};
use icpcov::scene::{generate_scene, Archetype, SceneSpec};
use icpcov::se3::{Mat3, Vec6};
use icpcov::{Result, Twist};

/// Small clouds keep a few hundred registrations interactive.
pub const DEMO_POINTS: usize = 600;
pub const MAX_SAMPLES: usize = 2000;
pub const MAX_GRID: usize = 81;

fn scene(archetype: &str, sigma: f64, seed: u64) -> Result<(icpcov::scene::ScenePair, PreparedPair)> {
    let archetype: Archetype = archetype.parse()?;
    let pair = generate_scene(&SceneSpec::new(archetype).with_points(DEMO_POINTS).with_sigma(sigma).with_seed(seed))?;
    let prepared = PreparedPair::new(&pair.reading, &pair.reference, &IcpConfig::default())?;
    Ok((pair, prepared))
}

fn xy_block(m: &Mat3) -> [[f64; 2]; 2] {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EllipseView {
    /// Translation part `(u_x, u_y)` of every sampled `ξ`.
    pub samples: Vec<[f64; 2]>,
    /// Whether each sample survived the cluster filter.
    pub kept: Vec<bool>,
    pub sampled: [[f64; 2]; 2],
    pub censi: [[f64; 2]; 2],
    pub trace_sampled: f64,
    pub trace_censi: f64,
}

pub fn sample_ellipse_data(archetype: &str, sigma: f64, n: usize, a: f64, seed: u64) -> Result<EllipseView> {
    let (pair, prepared) = scene(archetype, sigma, seed)?;
    let n = n.clamp(2, MAX_SAMPLES);
    let model = PerturbationModel::new(pair.ground_truth, a)?;
    let samples = sample_registrations(&prepared, &model, n, seed)?;
    let (cov, labelled) = filtered_covariance(&samples, &DbscanConfig::for_sample_count(n))?;
    let t_hat = prepared.icp(&pair.ground_truth).transform;
    let censi = censi_covariance(&prepared, &t_hat, &SensorNoiseModel::new(sigma)?, &CensiConfig::default()).covariance;
    Ok(EllipseView {
        samples: labelled.samples.iter().map(|s| [s.xi.u.x, s.xi.u.y]).collect(),
        kept: labelled.samples.iter().map(|s| s.cluster.is_some() && s.cluster == cov.cluster).collect(),
        sampled: xy_block(&cov.covariance.translation_block()),
        censi: xy_block(&censi.translation_block()),
        trace_sampled: cov.covariance.trace(),
        trace_censi: censi.trace(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeView {
    pub offsets: Vec<f64>,
    /// `cost[i * steps + j]` at offsets `(offsets[i], offsets[j])`.
    pub cost: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

/// Trimmed point-to-plane cost at `exp(δ) T̄` over a square grid of two
/// twist components (0..6 = x, y, z, rx, ry, rz).
pub fn landscape_data(archetype: &str, sigma: f64, axis_a: usize, axis_b: usize, extent: f64, steps: usize, seed: u64) -> Result<LandscapeView> {
    if axis_a >= 6 || axis_b >= 6 || axis_a == axis_b {
        return Err(icpcov::Error::InvalidParameter { name: "axes", reason: "need two distinct components in 0..6".into() });
    }
    let (pair, prepared) = scene(archetype, sigma, seed)?;
    let steps = steps.clamp(2, MAX_GRID);
    let offsets: Vec<f64> = (0..steps).map(|i| -extent + 2.0 * extent * i as f64 / (steps - 1) as f64).collect();
    let mut cost = Vec::with_capacity(steps * steps);
    for &da in &offsets {
        for &db in &offsets {
            let mut v = Vec6::zeros();
            v[axis_a] = da;
            v[axis_b] = db;
            cost.push(prepared.objective(&Twist::from_vector(&v).exp().compose(&pair.ground_truth)));
        }
    }
    let min = cost.iter().copied().fold(f64::INFINITY, f64::min);
    let max = cost.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(LandscapeView { offsets, cost, min, max })
}

pub fn noise_sweep_data(archetype: &str, max_sigma: f64, levels: usize, n: usize, seed: u64) -> Result<Vec<NoiseSweepRow>> {
    let levels = levels.clamp(2, 20);
    let n = n.clamp(2, MAX_SAMPLES);
    let config = NoiseSweepConfig {
        scene: SceneSpec::new(archetype.parse()?).with_points(DEMO_POINTS).with_seed(seed),
        sigmas: (0..levels).map(|i| max_sigma * i as f64 / (levels - 1) as f64).collect(),
        n_samples: n,
        a: icpcov::sampling::DEFAULT_PERTURBATION,
        icp: IcpConfig::default(),
        dbscan: DbscanConfig::for_sample_count(n),
        censi: CensiConfig::default(),
        seed,
    };
    noise_sweep(&config)
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
        .and_then(|v| serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string())))
}

#[wasm_bindgen]
pub fn sample_ellipse(archetype: &str, sigma: f64, n: usize, a: f64, seed: u64) -> std::result::Result<String, JsValue> {
    to_js(sample_ellipse_data(archetype, sigma, n, a, seed))
}

#[wasm_bindgen]
pub fn cost_landscape(archetype: &str, sigma: f64, axis_a: usize, axis_b: usize, extent: f64, steps: usize, seed: u64) -> std::result::Result<String, JsValue> {
    to_js(landscape_data(archetype, sigma, axis_a, axis_b, extent, steps, seed))
}

#[wasm_bindgen]
pub fn trace_vs_noise(archetype: &str, max_sigma: f64, levels: usize, n: usize, seed: u64) -> std::result::Result<String, JsValue> {
    to_js(noise_sweep_data(archetype, max_sigma, levels, n, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ellipse_view_shapes() {
        let v = sample_ellipse_data("cube", 0.01, 40, 0.05, 1).unwrap();
        assert_eq!(v.samples.len(), 40);
        assert_eq!(v.kept.len(), 40);
        assert!(v.kept.iter().any(|k| *k));
        assert!(v.sampled[0][0] >= 0.0 && v.censi[1][1] > 0.0);
        assert_eq!(v.sampled[0][1], v.sampled[1][0]);
        assert!(sample_ellipse_data("teapot", 0.01, 40, 0.05, 1).is_err());
    }

    #[test]
    fn landscape_minimum_near_centre() {
        let v = landscape_data("cube", 0.0, 0, 1, 0.2, 9, 2).unwrap();
        assert_eq!(v.cost.len(), 81);
        assert_eq!(v.cost[4 * 9 + 4], v.min);
        assert!(v.max > v.min);
        assert!(landscape_data("cube", 0.0, 1, 1, 0.2, 9, 2).is_err());
    }

    #[test]
    fn sweep_levels() {
        let rows = noise_sweep_data("cube", 0.01, 3, 10, 3).unwrap();
        let sigmas: Vec<f64> = rows.iter().map(|r| r.sigma).collect();
        assert_eq!(sigmas, vec![0.0, 0.005, 0.01]);
        assert_eq!(rows[0].trace_censi, 0.0);
    }
}
