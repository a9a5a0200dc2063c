use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use icpcov::censi::{noise_sweep, CensiConfig, NoiseSweepConfig};
use icpcov::dataset::fmt_f64;
use icpcov::icp::PreparedPair;
use icpcov::sampling::DEFAULT_PERTURBATION;
use icpcov::scene::{Archetype, SceneSpec};
use icpcov::se3::Vec6;
use icpcov::Twist;

use super::Stage;
use crate::args::{DbscanArgs, IcpArgs};
use crate::input::{load_pair_dir, resolve, usage, Output};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepNoiseArgs {
    #[arg(long, default_value = "cube")]
    pub archetype: Archetype,
    #[arg(long)]
    pub size: Option<f64>,
    #[arg(long, default_value_t = 1500)]
    pub points: usize,
    /// Noise levels (m), comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,0.0025,0.005,0.0075,0.01")]
    pub sigmas: Vec<f64>,
    /// Registrations per noise level.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_PERTURBATION)]
    pub a: f64,
    /// Also propagate noise on the reference points in the closed form.
    #[arg(long)]
    pub reference_noise: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub icp: IcpArgs,
    #[command(flatten)]
    pub dbscan: DbscanArgs,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl Stage for SweepNoiseArgs {
    fn out_dir(&mut self) -> &mut PathBuf {
        &mut self.out
    }

    fn resolve_inputs(&mut self) -> Result<()> {
        if self.sigmas.is_empty() {
            return Err(usage("--sigmas needs at least one value"));
        }
        Ok(())
    }

    fn execute(&self, out: &mut Output) -> Result<serde_json::Value> {
        let mut scene = SceneSpec::new(self.archetype).with_points(self.points).with_seed(self.seed);
        if let Some(s) = self.size {
            scene = scene.with_size(s);
        }
        let config = NoiseSweepConfig {
            scene,
            sigmas: self.sigmas.clone(),
            n_samples: self.n,
            a: self.a,
            icp: self.icp.config(self.seed),
            dbscan: self.dbscan.config(self.n),
            censi: CensiConfig { reference_noise: self.reference_noise, ..Default::default() },
            seed: self.seed,
        };
        let rows = noise_sweep(&config)?;
        let mut csv = String::from("sigma,trace_sampled,trace_censi,n_kept\n");
        for r in &rows {
            csv.push_str(&format!("{},{},{},{}\n", fmt_f64(r.sigma), fmt_f64(r.trace_sampled), fmt_f64(r.trace_censi), r.n_kept));
        }
        out.write("sweep.csv", csv)?;
        Ok(json!({ "sweep": config }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
    Z,
    Rx,
    Ry,
    Rz,
}

impl Axis {
    fn index(self) -> usize {
        self as usize
    }

    fn name(self) -> &'static str {
        ["x", "y", "z", "rx", "ry", "rz"][self.index()]
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LandscapeArgs {
    /// Pair directory written by `gen-scene`.
    #[arg(long)]
    pub pair: PathBuf,
    /// The two twist components spanned by the grid.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "x,y")]
    pub axes: Vec<Axis>,
    /// Half-width of the grid along each axis (m or rad).
    #[arg(long, default_value_t = 0.1)]
    pub extent: f64,
    /// Grid points per axis.
    #[arg(long, default_value_t = 41)]
    pub steps: usize,
    #[command(flatten)]
    pub icp: IcpArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl Stage for LandscapeArgs {
    fn out_dir(&mut self) -> &mut PathBuf {
        &mut self.out
    }

    fn resolve_inputs(&mut self) -> Result<()> {
        if self.steps < 2 || self.axes.len() != 2 || self.axes[0] == self.axes[1] {
            return Err(usage("--axes needs two distinct components and --steps at least 2"));
        }
        resolve(&mut self.pair)
    }

    /// The trimmed point-to-plane cost at `exp(δ) T̄` for every grid offset
    /// `δ`, with fresh associations at each pose.
    fn execute(&self, out: &mut Output) -> Result<serde_json::Value> {
        let pair = load_pair_dir(&self.pair)?;
        let icp = self.icp.config(self.seed);
        let prepared = PreparedPair::new(&pair.reading, &pair.reference, &icp)?;
        let (a, b) = (self.axes[0], self.axes[1]);
        let offset = |i: usize| -self.extent + 2.0 * self.extent * i as f64 / (self.steps - 1) as f64;
        let mut csv = format!("d_{},d_{},cost\n", a.name(), b.name());
        for i in 0..self.steps {
            for j in 0..self.steps {
                let mut v = Vec6::zeros();
                v[a.index()] = offset(i);
                v[b.index()] = offset(j);
                let pose = Twist::from_vector(&v).exp().compose(&pair.ground_truth);
                csv.push_str(&format!("{},{},{}\n", fmt_f64(v[a.index()]), fmt_f64(v[b.index()]), fmt_f64(prepared.objective(&pose))));
            }
        }
        out.write("landscape.csv", csv)?;
        Ok(json!({ "icp": icp }))
    }
}
