use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use icpcov::dataset::{fmt_f64, matrix_csv};
use icpcov::icp::PreparedPair;
use icpcov::rng::derive_seed;
use icpcov::sampling::{filtered_covariance, sample_registrations, PerturbationModel, DEFAULT_PERTURBATION};

use super::Stage;
use crate::args::{DbscanArgs, IcpArgs};
use crate::input::{InputArgs, Output};

pub fn covariance_file(id: &str) -> String {
    format!("covariance_{id}.csv")
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Registrations per pair.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Variance of the initial-guess perturbation, per twist component.
    #[arg(long, default_value_t = DEFAULT_PERTURBATION)]
    pub a: f64,
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

impl Stage for SampleArgs {
    fn out_dir(&mut self) -> &mut PathBuf {
        &mut self.out
    }

    fn resolve_inputs(&mut self) -> Result<()> {
        self.input.require()?;
        self.input.resolve()
    }

    fn execute(&self, out: &mut Output) -> Result<serde_json::Value> {
        let icp = self.icp.config(self.seed);
        let dbscan = self.dbscan.config(self.n);
        let mut summary = String::from("pair,n_total,n_kept,n_converged,cluster,trace,mean_u_x,mean_u_y,mean_u_z,mean_w_x,mean_w_y,mean_w_z\n");
        for (k, pair) in self.input.load()?.iter().enumerate() {
            log::info!("sampling {} ({} registrations)", pair.id, self.n);
            let prepared = PreparedPair::new(&pair.reading, &pair.reference, &icp)?;
            let model = PerturbationModel::new(pair.ground_truth, self.a)?;
            let samples = sample_registrations(&prepared, &model, self.n, derive_seed(self.seed, "sample/pair", k as u64))?;
            let (cov, labelled) = filtered_covariance(&samples, &dbscan)?;
            let mut csv = Vec::new();
            labelled.write_csv(&mut csv)?;
            out.write(&format!("samples_{}.csv", pair.id), csv)?;
            out.write(&covariance_file(&pair.id), matrix_csv(cov.covariance.matrix()))?;
            let cluster = cov.cluster.map_or_else(|| "-1".to_string(), |c| c.to_string());
            let mean: Vec<String> = cov.mean.to_vector().iter().map(|x| fmt_f64(*x)).collect();
            summary.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                pair.id,
                cov.n_total,
                cov.n_kept,
                samples.converged_count(),
                cluster,
                fmt_f64(cov.covariance.trace()),
                mean.join(",")
            ));
        }
        out.write("summary.csv", summary)?;
        Ok(json!({ "icp": icp, "dbscan": dbscan, "n": self.n, "a": self.a, "seed": self.seed }))
    }
}
