//! Input resolution and the on-disk pair layout.
//!
//! A pair directory holds `reading.csv`, `reference.csv` and
//! `ground_truth.csv`, a single pose row taking the reading into the
//! reference frame.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use icpcov::cloud::PointCloud;
use icpcov::dataset::{self, load_dataset, read_cloud_csv, read_poses_csv, write_atomic};
use icpcov::scene::ScenePair;
use icpcov::RigidTransform;

pub const READING_FILE: &str = "reading.csv";
pub const REFERENCE_FILE: &str = "reference.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const SINGLE_PAIR_ID: &str = "pair";

/// Bad invocation: missing inputs or inconsistent flags. Exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Checks that `path` exists and makes it absolute, so manifests do not
/// depend on the working directory.
pub fn resolve(path: &mut PathBuf) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("{}: no such file or directory", path.display())));
    }
    *path = fs::canonicalize(&*path).with_context(|| format!("resolving {}", path.display()))?;
    Ok(())
}

pub fn resolve_opt(path: &mut Option<PathBuf>) -> Result<()> {
    match path {
        Some(p) => resolve(p),
        None => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct PairData {
    pub id: String,
    pub reading: PointCloud,
    pub reference: PointCloud,
    pub ground_truth: RigidTransform,
}

/// Registration pairs `(i, j)` of a sequence as `reading = P_j`,
/// `reference = P_i`, with ids `iii_jjj`.
pub fn dataset_pairs(data: &dataset::SequenceDataset) -> Vec<PairData> {
    data.pairs()
        .into_iter()
        .map(|(i, j)| PairData {
            id: pair_id(i, j),
            reading: data.clouds[j].clone(),
            reference: data.clouds[i].clone(),
            ground_truth: data.relative(i, j),
        })
        .collect()
}

pub fn pair_id(i: usize, j: usize) -> String {
    format!("{i:03}_{j:03}")
}

pub fn load_pair_dir(dir: &Path) -> Result<PairData> {
    let reading = read_cloud_csv(&dir.join(READING_FILE))?;
    let reference = read_cloud_csv(&dir.join(REFERENCE_FILE))?;
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let poses = read_poses_csv(&gt_path)?;
    let [ground_truth] = poses[..] else {
        anyhow::bail!("{}: expected exactly one pose row, found {}", gt_path.display(), poses.len());
    };
    Ok(PairData { id: SINGLE_PAIR_ID.into(), reading, reference, ground_truth })
}

pub fn pair_dir_files(pair: &ScenePair) -> Vec<(&'static str, String)> {
    vec![
        (READING_FILE, dataset::cloud_csv(&pair.reading)),
        (REFERENCE_FILE, dataset::cloud_csv(&pair.reference)),
        (GROUND_TRUTH_FILE, dataset::poses_csv(&[pair.ground_truth])),
    ]
}

/// `--pair DIR` or `--dataset DIR`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct InputArgs {
    /// Pair directory (reading.csv, reference.csv, ground_truth.csv).
    #[arg(long, conflicts_with = "dataset")]
    pub pair: Option<PathBuf>,
    /// Sequence directory (cloud CSVs and poses.csv); every pair with
    /// j - i <= 4 is used.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

impl InputArgs {
    pub fn is_given(&self) -> bool {
        self.pair.is_some() || self.dataset.is_some()
    }

    pub fn resolve(&mut self) -> Result<()> {
        resolve_opt(&mut self.pair)?;
        resolve_opt(&mut self.dataset)
    }

    pub fn require(&self) -> Result<()> {
        if self.is_given() {
            Ok(())
        } else {
            Err(usage("one of --pair or --dataset is required"))
        }
    }

    pub fn load(&self) -> Result<Vec<PairData>> {
        match (&self.pair, &self.dataset) {
            (Some(p), _) => Ok(vec![load_pair_dir(p)?]),
            (None, Some(d)) => Ok(dataset_pairs(&load_dataset(d)?)),
            (None, None) => Err(usage("one of --pair or --dataset is required")),
        }
    }
}

/// Collects the files a run writes; every write is atomic.
pub struct Output {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Output { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        write_atomic(&path, bytes.as_ref())?;
        self.files.push(name.to_string());
        Ok(())
    }
}
