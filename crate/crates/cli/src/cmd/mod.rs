mod explore;
mod learn;
mod sample;
mod scene;
mod traj;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};

use crate::input::{resolve, usage, Output};
use crate::manifest::RunManifest;

/// One pipeline stage: resolve inputs, then write outputs and report the
/// resolved configuration for the manifest.
pub trait Stage {
    fn out_dir(&mut self) -> &mut PathBuf;
    fn resolve_inputs(&mut self) -> Result<()>;
    fn execute(&self, out: &mut Output) -> Result<serde_json::Value>;
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic registration pair.
    GenScene(scene::GenSceneArgs),
    /// Generate a synthetic corridor sequence with ground-truth poses.
    GenSequence(scene::GenSequenceArgs),
    /// Convert whitespace-separated scans and KITTI-style poses into a sequence directory.
    Import(scene::ImportArgs),
    /// Monte-Carlo ICP covariance of a pair or of every pair of a sequence.
    Sample(sample::SampleArgs),
    /// Descriptors (and training examples, given sampled covariances).
    Describe(learn::DescribeArgs),
    /// Fit the descriptor metric of the covariance predictor.
    Train(learn::TrainArgs),
    /// Predict covariances with a trained model.
    Predict(learn::PredictArgs),
    /// KL divergence of baseline, learned and closed-form estimates on test pairs.
    EvalPairs(learn::EvalPairsArgs),
    /// Consistency of compounded covariances over synthetic corridor trajectories.
    EvalTraj(traj::EvalTrajArgs),
    /// Sampled and closed-form covariance trace against sensor noise.
    SweepNoise(explore::SweepNoiseArgs),
    /// ICP objective on a 2D grid of poses around ground truth.
    Landscape(explore::LandscapeArgs),
    /// Re-run a stage from its manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// manifest.json written by an earlier run.
    pub manifest: PathBuf,
    /// Directory for the regenerated outputs.
    #[arg(long)]
    pub out: PathBuf,
}

impl Command {
    fn stage(&mut self) -> Option<&mut dyn Stage> {
        Some(match self {
            Command::GenScene(a) => a,
            Command::GenSequence(a) => a,
            Command::Import(a) => a,
            Command::Sample(a) => a,
            Command::Describe(a) => a,
            Command::Train(a) => a,
            Command::Predict(a) => a,
            Command::EvalPairs(a) => a,
            Command::EvalTraj(a) => a,
            Command::SweepNoise(a) => a,
            Command::Landscape(a) => a,
            Command::Replay(_) => return None,
        })
    }

    pub fn run(mut self) -> Result<()> {
        if let Command::Replay(r) = &self {
            let mut r = r.clone();
            resolve(&mut r.manifest)?;
            let mut command = RunManifest::read(&r.manifest)?.command;
            let stage = command.stage().ok_or_else(|| usage("a manifest cannot replay a replay"))?;
            *stage.out_dir() = r.out;
            return command.run();
        }
        let stage = self.stage().expect("replay handled above");
        stage.resolve_inputs()?;
        let mut out = Output::create(stage.out_dir())?;
        let config = stage.execute(&mut out)?;
        let files = std::mem::take(&mut out.files);
        RunManifest::new(self, config, files).write(&mut out)
    }
}
