//! Option groups shared between subcommands.

use clap::Args;
use serde::{Deserialize, Serialize};

use icpcov::cloud::DEFAULT_NORMAL_NEIGHBORS;
use icpcov::dbscan::DbscanConfig;
use icpcov::descriptor::{DescriptorConfig, GridSpec, DEFAULT_OVERLAP_RADIUS};
use icpcov::icp::IcpConfig;

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct IcpArgs {
    /// Nearest neighbours matched per reading point.
    #[arg(long, default_value_t = 3)]
    pub knn: usize,
    /// Fraction of associations kept, closest first.
    #[arg(long, default_value_t = 0.70)]
    pub trim_ratio: f64,
    #[arg(long, default_value_t = 80)]
    pub max_iterations: usize,
    /// Convergence threshold on the translation step (m).
    #[arg(long, default_value_t = 1e-4)]
    pub translation_tol: f64,
    /// Convergence threshold on the rotation step (rad).
    #[arg(long, default_value_t = 1e-4)]
    pub rotation_tol: f64,
    /// Reading-side random subsampling ratio.
    #[arg(long, default_value_t = 1.0)]
    pub subsample_ratio: f64,
    /// Reading-side maximum density filter (points per m³).
    #[arg(long)]
    pub max_density: Option<f64>,
    /// Neighbourhood size for surface normals.
    #[arg(long, default_value_t = DEFAULT_NORMAL_NEIGHBORS)]
    pub normal_neighbors: usize,
}

impl IcpArgs {
    pub fn config(&self, seed: u64) -> IcpConfig {
        IcpConfig {
            knn: self.knn,
            trim_ratio: self.trim_ratio,
            max_iterations: self.max_iterations,
            translation_tol: self.translation_tol,
            rotation_tol: self.rotation_tol,
            subsample_ratio: self.subsample_ratio,
            max_density: self.max_density,
            normal_neighbors: self.normal_neighbors,
            seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DbscanArgs {
    /// Neighbourhood radius in twist space.
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    /// Core-point threshold; defaults to max(5, n/500).
    #[arg(long)]
    pub min_pts: Option<usize>,
    /// Scale of the rotation components relative to translation.
    #[arg(long, default_value_t = 1.0)]
    pub rotation_weight: f64,
}

impl DbscanArgs {
    pub fn config(&self, n: usize) -> DbscanConfig {
        let auto = DbscanConfig::for_sample_count(n);
        DbscanConfig {
            eps: self.eps,
            min_pts: self.min_pts.unwrap_or(auto.min_pts),
            rotation_weight: self.rotation_weight,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DescriptorArgs {
    /// Distance within which a point counts as overlapping the other cloud.
    #[arg(long, default_value_t = DEFAULT_OVERLAP_RADIUS)]
    pub overlap_radius: f64,
}

impl DescriptorArgs {
    pub fn config(&self, grid: GridSpec, normal_neighbors: usize) -> DescriptorConfig {
        DescriptorConfig { grid, overlap_radius: self.overlap_radius, normal_neighbors }
    }
}
