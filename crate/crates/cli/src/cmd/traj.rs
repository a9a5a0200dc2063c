use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use icpcov::censi::{censi_covariance, CensiConfig, SensorNoiseModel};
use icpcov::dataset::fmt_f64;
use icpcov::descriptor::describe_pair;
use icpcov::eval::{compound_steps, consistency_report, ellipse_coverage, run_trajectory, TrajectoryConfig, TrajectoryResult};
use icpcov::icp::PreparedPair;
use icpcov::predictor::Predictor;
use icpcov::rng::derive_seed;
use icpcov::sampling::DEFAULT_PERTURBATION;
use icpcov::scene::{generate_sequence, SequenceSpec};
use icpcov::se3::CompoundOrder;

use super::Stage;
use crate::args::{DescriptorArgs, IcpArgs};
use crate::input::{resolve, Output};

/// Ellipse scale used for the coverage column.
pub const COVERAGE_SIGMAS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Second,
    Fourth,
}

impl From<Order> for CompoundOrder {
    fn from(o: Order) -> Self {
        match o {
            Order::Second => CompoundOrder::Second,
            Order::Fourth => CompoundOrder::Fourth,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalTrajArgs {
    /// model.json written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Number of independent corridor sequences, one trajectory each.
    #[arg(long, default_value_t = 100)]
    pub trajectories: usize,
    /// Scans per trajectory; the trajectory has one step fewer.
    #[arg(long, default_value_t = 6)]
    pub scans: usize,
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
    #[arg(long, default_value_t = 1500)]
    pub points: usize,
    #[arg(long, default_value_t = 0.01)]
    pub sigma: f64,
    #[arg(long, default_value_t = 8.0)]
    pub range: f64,
    #[arg(long, default_value_t = 3.0)]
    pub pillar_spacing: f64,
    /// Variance of the initial-guess perturbation of every step.
    #[arg(long, default_value_t = DEFAULT_PERTURBATION)]
    pub a: f64,
    #[arg(long, value_enum, default_value_t = Order::Fourth)]
    pub order: Order,
    /// Also score the closed-form estimate, with noise `--sigma`.
    #[arg(long)]
    pub censi: bool,
    /// Keep trajectories with a non-converged step in the means. By default
    /// they are left out and counted in the `excluded` column.
    #[arg(long)]
    pub include_unconverged: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub icp: IcpArgs,
    #[command(flatten)]
    pub descriptor: DescriptorArgs,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl EvalTrajArgs {
    fn sequence(&self, t: usize) -> SequenceSpec {
        SequenceSpec {
            scans: self.scans,
            step: self.step,
            points: self.points,
            sigma: self.sigma,
            range: self.range,
            pillar_spacing: self.pillar_spacing,
            seed: derive_seed(self.seed, "eval-traj/sequence", t as u64),
        }
    }
}

impl Stage for EvalTrajArgs {
    fn out_dir(&mut self) -> &mut PathBuf {
        &mut self.out
    }

    fn resolve_inputs(&mut self) -> Result<()> {
        resolve(&mut self.model)
    }

    fn execute(&self, out: &mut Output) -> Result<serde_json::Value> {
        let predictor = Predictor::load(&self.model)?;
        let icp = self.icp.config(self.seed);
        let desc_config = self.descriptor.config(predictor.grid, icp.normal_neighbors);
        let traj_config = TrajectoryConfig { a: self.a, order: self.order.into() };
        let censi_config = CensiConfig::default();
        let noise = SensorNoiseModel::new(self.sigma)?;
        let baseline = predictor.baseline();

        let mut methods: Vec<(&str, Vec<TrajectoryResult>)> = vec![("learned", Vec::new()), ("baseline", Vec::new())];
        if self.censi {
            methods.push(("censi", Vec::new()));
        }
        for t in 0..self.trajectories {
            let data = generate_sequence(&self.sequence(t))?;
            let steps: Vec<usize> = (0..data.len().saturating_sub(1)).collect();
            let registrars = steps
                .iter()
                .map(|&k| PreparedPair::new(&data.clouds[k + 1], &data.clouds[k], &icp))
                .collect::<icpcov::Result<Vec<_>>>()?;
            let truths: Vec<_> = steps.iter().map(|&k| data.relative(k, k + 1)).collect();
            let learned = run_trajectory(
                &registrars,
                &truths,
                |k, t_hat| {
                    let d = describe_pair(&data.clouds[k + 1], &data.clouds[k], t_hat, &desc_config)?;
                    predictor.predict(&d.descriptor)
                },
                &traj_config,
                derive_seed(self.seed, "eval-traj/run", t as u64),
            )?;
            let mut with_baseline = learned.steps.clone();
            with_baseline.iter_mut().for_each(|s| s.covariance = baseline);
            methods[1].1.push(compound_steps(with_baseline, traj_config.order)?);
            if self.censi {
                let mut with_censi = learned.steps.clone();
                for (s, reg) in with_censi.iter_mut().zip(&registrars) {
                    s.covariance = censi_covariance(reg, &s.estimate, &noise, &censi_config).covariance;
                }
                methods[2].1.push(compound_steps(with_censi, traj_config.order)?);
            }
            methods[0].1.push(learned);
            log::info!("trajectory {}/{} done", t + 1, self.trajectories);
        }

        let mut summary = String::from("method,mean_d_m,mean_d_m_translation,mean_d_m_rotation,classification,used,excluded,coverage_2sigma\n");
        let mut ellipses = String::from("trajectory,method,converged,d_m,d_m_translation,d_m_rotation,err_x,err_y,c_xx,c_xy,c_yy\n");
        for (name, trajs) in &methods {
            for (i, t) in trajs.iter().enumerate() {
                let (e, c) = t.ground_plane();
                let vals = [t.d_m, t.d_m_translation, t.d_m_rotation, e[0], e[1], c[0][0], c[0][1], c[1][1]].map(fmt_f64);
                ellipses.push_str(&format!("{i},{name},{},{}\n", t.converged, vals.join(",")));
            }
            let used: Vec<&TrajectoryResult> = trajs.iter().filter(|t| t.converged || self.include_unconverged).collect();
            if used.is_empty() {
                log::warn!("{name}: every trajectory has a non-converged step, nothing to aggregate");
                summary.push_str(&format!("{name},NaN,NaN,NaN,,0,{},NaN\n", trajs.len()));
                continue;
            }
            let report = consistency_report(trajs, !self.include_unconverged)?;
            let covered = used
                .iter()
                .filter(|t| {
                    let (e, c) = t.ground_plane();
                    ellipse_coverage(&[e], &c, COVERAGE_SIGMAS) == 1.0
                })
                .count();
            summary.push_str(&format!(
                "{name},{},{},{},{},{},{},{}\n",
                fmt_f64(report.mean_d_m),
                fmt_f64(report.mean_d_m_translation),
                fmt_f64(report.mean_d_m_rotation),
                serde_json::to_value(report.classification)?.as_str().unwrap_or_default(),
                report.used,
                report.excluded,
                fmt_f64(covered as f64 / used.len() as f64),
            ));
        }
        out.write("consistency.csv", summary)?;
        out.write("trajectories.csv", ellipses)?;
        let seqs: Vec<SequenceSpec> = (0..self.trajectories).map(|t| self.sequence(t)).collect();
        Ok(json!({
            "icp": icp,
            "descriptor": desc_config,
            "trajectory": traj_config,
            "censi": self.censi.then_some(json!({ "sigma": self.sigma, "config": censi_config })),
            "sequences": seqs,
        }))
    }
}
