use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use icpcov::cloud::PointCloud;
use icpcov::dataset::{cloud_csv, poses_csv, POSES_FILE, POSE_ORTHONORMAL_TOL};
use icpcov::scene::{generate_scene, generate_sequence, Archetype, SceneSpec, SequenceSpec};
use icpcov::se3::Vec3;
use icpcov::RigidTransform;

use super::Stage;
use crate::input::{pair_dir_files, resolve, usage, Output};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenSceneArgs {
    /// cube, cylinder_pair, hallway, corner or planes.
    #[arg(long)]
    pub archetype: Archetype,
    /// Characteristic dimension (m); archetype default when omitted.
    #[arg(long)]
    pub size: Option<f64>,
    /// Points per cloud.
    #[arg(long, default_value_t = 1500)]
    pub points: usize,
    /// Per-axis Gaussian noise (m).
    #[arg(long, default_value_t = 0.01)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl GenSceneArgs {
    pub fn spec(&self) -> SceneSpec {
        let mut spec = SceneSpec::new(self.archetype).with_points(self.points).with_sigma(self.sigma).with_seed(self.seed);
        if let Some(s) = self.size {
            spec = spec.with_size(s);
        }
        spec
    }
}

impl Stage for GenSceneArgs {
    fn out_dir(&mut self) -> &mut PathBuf {
        &mut self.out
    }

    fn resolve_inputs(&mut self) -> Result<()> {
        Ok(())
    }

    fn execute(&self, out: &mut Output) -> Result<serde_json::Value> {
        let spec = self.spec();
        let pair = generate_scene(&spec)?;
        for (name, text) in pair_dir_files(&pair) {
            out.write(name, text)?;
        }
        Ok(json!({ "scene": spec }))
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenSequenceArgs {
    #[arg(long, default_value_t = 6)]
    pub scans: usize,
    /// Forward motion between scans (m).
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
    #[arg(long, default_value_t = 1500)]
    pub points: usize,
    #[arg(long, default_value_t = 0.01)]
    pub sigma: f64,
    /// Scanning range along the corridor (m).
    #[arg(long, default_value_t = 8.0)]
    pub range: f64,
    #[arg(long, default_value_t = 3.0)]
    pub pillar_spacing: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl GenSequenceArgs {
    pub fn spec(&self) -> SequenceSpec {
        SequenceSpec {
            scans: self.scans,
            step: self.step,
            points: self.points,
            sigma: self.sigma,
            range: self.range,
            pillar_spacing: self.pillar_spacing,
            seed: self.seed,
        }
    }
}

impl Stage for GenSequenceArgs {
    fn out_dir(&mut self) -> &mut PathBuf {
        &mut self.out
    }

    fn resolve_inputs(&mut self) -> Result<()> {
        Ok(())
    }

    fn execute(&self, out: &mut Output) -> Result<serde_json::Value> {
        let spec = self.spec();
        let data = generate_sequence(&spec)?;
        for (name, cloud) in data.names.iter().zip(&data.clouds) {
            out.write(&format!("{name}.csv"), cloud_csv(cloud))?;
        }
        out.write(POSES_FILE, poses_csv(&data.poses))?;
        Ok(json!({ "sequence": spec }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseConvention {
    /// Rows map sensor coordinates into the world frame (stored as is).
    SensorToWorld,
    /// Rows map world coordinates into the sensor frame (inverted on import).
    WorldToSensor,
}

/// Scans are text files with one point per line, `x y z` first (spaces,
/// tabs or commas), further columns ignored, `#` comments and one header
/// line allowed. They are taken in file name order and matched to pose
/// rows in order. Pose rows hold the 12 values of a row-major 3×4 `[R|t]`.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ImportArgs {
    /// Directory of scans (*.xyz, *.txt, *.pts or *.csv).
    #[arg(long)]
    pub clouds: PathBuf,
    /// Pose file, one row per scan.
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long, value_enum, default_value_t = PoseConvention::SensorToWorld)]
    pub convention: PoseConvention,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

const SCAN_EXTENSIONS: [&str; 4] = ["xyz", "txt", "pts", "csv"];

fn numbers(line: &str) -> Option<Vec<f64>> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().ok())
        .collect()
}

fn read_scan(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match numbers(line) {
            Some(v) if v.len() >= 3 && v[..3].iter().all(|x| x.is_finite()) => points.push(Vec3::new(v[0], v[1], v[2])),
            None if points.is_empty() && i == 0 => continue,
            _ => bail!("{}: row {}: expected at least 3 numbers", path.display(), i + 1),
        }
    }
    Ok(PointCloud::new(points))
}

fn read_pose_rows(path: &Path, convention: PoseConvention) -> Result<Vec<RigidTransform>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = numbers(line).filter(|v| v.len() == 12).with_context(|| format!("{}: row {}: expected 12 numbers", path.display(), i + 1))?;
        let t = RigidTransform::from_row_major(&v.try_into().expect("length checked"));
        if !t.is_valid(POSE_ORTHONORMAL_TOL) {
            bail!("{}: row {}: rotation is not orthonormal", path.display(), i + 1);
        }
        poses.push(match convention {
            PoseConvention::SensorToWorld => t,
            PoseConvention::WorldToSensor => t.inverse(),
        });
    }
    Ok(poses)
}

impl Stage for ImportArgs {
    fn out_dir(&mut self) -> &mut PathBuf {
        &mut self.out
    }

    fn resolve_inputs(&mut self) -> Result<()> {
        resolve(&mut self.clouds)?;
        resolve(&mut self.poses)
    }

    fn execute(&self, out: &mut Output) -> Result<serde_json::Value> {
        let mut files: Vec<PathBuf> = fs::read_dir(&self.clouds)
            .with_context(|| format!("listing {}", self.clouds.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| SCAN_EXTENSIONS.contains(&e)));
        files.sort();
        let poses = read_pose_rows(&self.poses, self.convention)?;
        if poses.len() != files.len() {
            return Err(usage(format!("{} poses for {} scans in {}", poses.len(), files.len(), self.clouds.display())));
        }
        for f in &files {
            let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            if stem == "poses" {
                bail!("{}: scan name collides with {POSES_FILE}", f.display());
            }
            out.write(&format!("{stem}.csv"), cloud_csv(&read_scan(f)?))?;
        }
        out.write(POSES_FILE, poses_csv(&poses))?;
        Ok(json!({ "convention": self.convention, "scans": files.len() }))
    }
}
