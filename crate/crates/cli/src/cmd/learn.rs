use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use icpcov::censi::{censi_covariance, CensiConfig, SensorNoiseModel};
use icpcov::cloud::DEFAULT_NORMAL_NEIGHBORS;
use icpcov::dataset::{fmt_f64, matrix_csv, read_matrix_csv};
use icpcov::descriptor::{augment, describe_pair, Descriptor, GridSpec, TrainingExample};
use icpcov::eval::{evaluate_predictor, kl_divergence, KL_DIRECTION};
use icpcov::icp::PreparedPair;
use icpcov::predictor::{Predictor, TrainConfig};
use icpcov::Covariance;

use super::sample::covariance_file;
use super::Stage;
use crate::args::{DescriptorArgs, IcpArgs};
use crate::input::{resolve, usage, InputArgs, Output, PairData};

pub const EXAMPLES_FILE: &str = "examples.json";
pub const MODEL_FILE: &str = "model.json";

fn descriptor_row(id: &str, augmentation: f64, d: &Descriptor) -> String {
    let mut row = format!("{id},{}", fmt_f64(augmentation));
    for x in d.as_slice() {
        row.push(',');
        row.push_str(&fmt_f64(*x));
    }
    row.push('\n');
    row
}

fn descriptor_header(len: usize) -> String {
    let cols: Vec<String> = (0..len).map(|i| format!("d{i}")).collect();
    format!("id,augmentation,{}\n", cols.join(","))
}

pub fn read_examples(path: &Path) -> Result<Vec<TrainingExample>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Output directory of `sample`; pairs become training examples.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Extra copies per pair, rotated about z by multiples of 2π/(k+1).
    #[arg(long, default_value_t = 0)]
    pub augment: usize,
    #[command(flatten)]
    pub descriptor: DescriptorArgs,
    #[arg(long, default_value_t = DEFAULT_NORMAL_NEIGHBORS)]
    pub normal_neighbors: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl Stage for DescribeArgs {
    fn out_dir(&mut self) -> &mut PathBuf {
        &mut self.out
    }

    fn resolve_inputs(&mut self) -> Result<()> {
        self.input.require()?;
        self.input.resolve()?;
        crate::input::resolve_opt(&mut self.samples)
    }

    fn execute(&self, out: &mut Output) -> Result<serde_json::Value> {
        let config = self.descriptor.config(GridSpec::default(), self.normal_neighbors);
        let mut csv = descriptor_header(config.grid.descriptor_len());
        let mut examples = Vec::new();
        for pair in self.input.load()? {
            let desc = describe_pair(&pair.reading, &pair.reference, &pair.ground_truth, &config)?;
            if desc.empty {
                log::warn!("{}: no overlap point inside the grid", pair.id);
            }
            let cov = match &self.samples {
                Some(dir) => Some(read_matrix_csv(&dir.join(covariance_file(&pair.id)))?),
                None => None,
            };
            csv.push_str(&descriptor_row(&pair.id, 0.0, &desc.descriptor));
            if let Some(y) = cov {
                examples.push(TrainingExample { id: pair.id.clone(), descriptor: desc.descriptor.clone(), covariance: y, augmentation: 0.0 });
            }
            for m in 1..=self.augment {
                let theta = TAU * m as f64 / (self.augment + 1) as f64;
                let (d, y) = augment(&desc.overlap, &cov.unwrap_or_else(Covariance::zeros), theta, &config.grid)?;
                let id = format!("{}/rot{m}", pair.id);
                csv.push_str(&descriptor_row(&id, theta, &d));
                if cov.is_some() {
                    examples.push(TrainingExample { id, descriptor: d, covariance: y, augmentation: theta });
                }
            }
        }
        out.write("descriptors.csv", csv)?;
        if self.samples.is_some() {
            out.write(EXAMPLES_FILE, serde_json::to_string(&examples)? + "\n")?;
        }
        Ok(json!({ "descriptor": config, "augment": self.augment }))
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// examples.json files written by `describe`.
    #[arg(long, required = true, num_args = 1..)]
    pub examples: Vec<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    /// Weight of the squared Frobenius norm of the metric factor.
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    /// Use log det F instead of det F in the loss.
    #[arg(long)]
    pub logdet: bool,
    /// Stop when the relative objective change falls below this.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    /// Train only the diagonal of the metric factor.
    #[arg(long)]
    pub diagonal_only: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            lambda: self.lambda,
            logdet_loss: self.logdet,
            tolerance: self.tolerance,
            diagonal_only: self.diagonal_only,
            seed: self.seed,
        }
    }
}

impl Stage for TrainArgs {
    fn out_dir(&mut self) -> &mut PathBuf {
        &mut self.out
    }

    fn resolve_inputs(&mut self) -> Result<()> {
        self.examples.iter_mut().try_for_each(resolve)
    }

    fn execute(&self, out: &mut Output) -> Result<serde_json::Value> {
        let mut examples = Vec::new();
        for p in &self.examples {
            examples.extend(read_examples(p)?);
        }
        let grid = GridSpec::default();
        if let Some(ex) = examples.iter().find(|e| e.descriptor.len() != grid.descriptor_len()) {
            bail!("example {} has {} descriptor entries, the grid needs {}", ex.id, ex.descriptor.len(), grid.descriptor_len());
        }
        let config = self.config();
        let mut predictor = Predictor::new(examples, grid, config)?;
        let report = predictor.train()?;
        if !report.converged {
            log::warn!("stopped after {} epochs without meeting the tolerance", report.epochs);
        }
        let mut csv = String::from("epoch,objective\n");
        for (e, v) in report.objective.iter().enumerate() {
            csv.push_str(&format!("{e},{}\n", fmt_f64(*v)));
        }
        out.write("training.csv", csv)?;
        out.write(MODEL_FILE, predictor.to_json()?)?;
        Ok(json!({ "train": config, "grid": grid, "examples": predictor.examples.len(), "epochs": report.epochs, "converged": report.converged }))
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    /// model.json written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub descriptor: DescriptorArgs,
    #[arg(long, default_value_t = DEFAULT_NORMAL_NEIGHBORS)]
    pub normal_neighbors: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl Stage for PredictArgs {
    fn out_dir(&mut self) -> &mut PathBuf {
        &mut self.out
    }

    fn resolve_inputs(&mut self) -> Result<()> {
        resolve(&mut self.model)?;
        self.input.require()?;
        self.input.resolve()
    }

    fn execute(&self, out: &mut Output) -> Result<serde_json::Value> {
        let predictor = Predictor::load(&self.model)?;
        let config = self.descriptor.config(predictor.grid, self.normal_neighbors);
        for pair in self.input.load()? {
            let desc = describe_pair(&pair.reading, &pair.reference, &pair.ground_truth, &config)?;
            let y = predictor.predict(&desc.descriptor)?;
            out.write(&format!("prediction_{}.csv", pair.id), matrix_csv(y.matrix()))?;
        }
        Ok(json!({ "descriptor": config }))
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalPairsArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// examples.json of the test pairs.
    #[arg(long)]
    pub test: PathBuf,
    /// Clouds of the test pairs; enables the closed-form column.
    #[command(flatten)]
    pub input: InputArgs,
    /// Sensor noise assumed by the closed-form estimate (m).
    #[arg(long, default_value_t = 0.01)]
    pub censi_sigma: f64,
    /// Also propagate noise on the reference points.
    #[arg(long)]
    pub reference_noise: bool,
    #[command(flatten)]
    pub icp: IcpArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl EvalPairsArgs {
    fn censi_config(&self) -> CensiConfig {
        CensiConfig { reference_noise: self.reference_noise, ..Default::default() }
    }

    /// Closed-form covariance at the registration started from ground truth.
    fn censi(&self, pair: &PairData) -> Result<Covariance> {
        let prepared = PreparedPair::new(&pair.reading, &pair.reference, &self.icp.config(self.seed))?;
        let t_hat = prepared.icp(&pair.ground_truth).transform;
        let noise = SensorNoiseModel::new(self.censi_sigma)?;
        Ok(censi_covariance(&prepared, &t_hat, &noise, &self.censi_config()).covariance)
    }
}

impl Stage for EvalPairsArgs {
    fn out_dir(&mut self) -> &mut PathBuf {
        &mut self.out
    }

    fn resolve_inputs(&mut self) -> Result<()> {
        resolve(&mut self.model)?;
        resolve(&mut self.test)?;
        self.input.resolve()
    }

    fn execute(&self, out: &mut Output) -> Result<serde_json::Value> {
        let predictor = Predictor::load(&self.model)?;
        let test = read_examples(&self.test)?;
        if test.is_empty() {
            return Err(usage(format!("{}: no test examples", self.test.display())));
        }
        let mut eval = evaluate_predictor(&test, &predictor, None)?;
        if self.input.is_given() {
            let pairs: BTreeMap<String, PairData> = self.input.load()?.into_iter().map(|p| (p.id.clone(), p)).collect();
            for (row, ex) in eval.rows.iter_mut().zip(&test) {
                if let Some(pair) = pairs.get(&ex.id) {
                    row.kl_censi = Some(kl_divergence(&ex.covariance, &self.censi(pair)?)?);
                }
            }
            let scored: Vec<f64> = eval.rows.iter().filter_map(|r| r.kl_censi).collect();
            if scored.len() < eval.rows.len() {
                log::warn!("closed-form estimate missing for {} of {} test pairs", eval.rows.len() - scored.len(), eval.rows.len());
            }
            eval.mean_censi = (scored.len() == eval.rows.len()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
        }
        let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
        let mut csv = String::from("pair,kl_baseline,kl_learned,kl_censi\n");
        for r in &eval.rows {
            csv.push_str(&format!("{},{},{},{}\n", r.id, fmt_f64(r.kl_baseline), fmt_f64(r.kl_learned), opt(r.kl_censi)));
        }
        csv.push_str(&format!("mean,{},{},{}\n", fmt_f64(eval.mean_baseline), fmt_f64(eval.mean_learned), opt(eval.mean_censi)));
        out.write("eval_pairs.csv", csv)?;
        let censi = self.input.is_given().then(|| json!({ "sigma": self.censi_sigma, "config": self.censi_config(), "icp": self.icp.config(self.seed) }));
        Ok(json!({ "kl": KL_DIRECTION, "censi": censi, "test_examples": test.len() }))
    }
}
