//! Point clouds, surface normals and the density / subsampling filters.

use nalgebra::SymmetricEigen;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::se3::{Mat3, RigidTransform, Vec3};

pub const DEFAULT_NORMAL_NEIGHBORS: usize = 20;
pub const DENSITY_NEIGHBORS: usize = 10;

/// Per-point surface attributes from the local neighbourhood covariance.
///
/// With sorted singular values `σ1 ≥ σ2 ≥ σ3` of the neighbourhood,
/// `cylindricality = (σ1 - σ2) / σ1` and `planarity = (σ2 - σ3) / σ1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalSurface {
    pub normal: Vec3,
    /// False when the neighbourhood has rank < 2 and no normal is defined.
    pub valid: bool,
    pub planarity: f64,
    pub cylindricality: f64,
}

impl LocalSurface {
    fn invalid() -> Self {
        LocalSurface {
            normal: Vec3::z(),
            valid: false,
            planarity: 0.0,
            cylindricality: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub surfaces: Option<Vec<LocalSurface>>,
    #[serde(default)]
    pub frame: String,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        PointCloud {
            points,
            surfaces: None,
            frame: String::new(),
        }
    }

    pub fn with_frame(mut self, frame: impl Into<String>) -> Self {
        self.frame = frame.into();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        self.surfaces.is_some()
    }

    pub fn normal(&self, i: usize) -> Option<&LocalSurface> {
        self.surfaces.as_ref().map(|s| &s[i])
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    /// Keeps the points at `indices` (and their surfaces) in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            surfaces: self
                .surfaces
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
            frame: self.frame.clone(),
        }
    }

    /// Concatenation; surfaces are kept only if both sides carry them.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        let surfaces = match (&self.surfaces, &other.surfaces) {
            (Some(a), Some(b)) => Some(a.iter().chain(b.iter()).copied().collect()),
            _ => None,
        };
        PointCloud {
            points,
            surfaces,
            frame: self.frame.clone(),
        }
    }
}

/// Spatial index over a cloud snapshot.
pub type NeighborIndex = KdTree;

pub fn build_index(cloud: &PointCloud) -> Result<NeighborIndex> {
    KdTree::build(&cloud.points)
}

/// Sorted eigen-decomposition of a neighbourhood: eigenvalues descending.
fn neighborhood_eigen(points: &[Vec3], idx: impl Iterator<Item = usize> + Clone) -> (Vec3, Mat3) {
    let n = idx.clone().count() as f64;
    let mean = idx.clone().map(|i| points[i]).sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for i in idx {
        let d = points[i] - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = Vec3::new(
        eig.eigenvalues[order[0]].max(0.0),
        eig.eigenvalues[order[1]].max(0.0),
        eig.eigenvalues[order[2]].max(0.0),
    );
    let vecs = Mat3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    (vals, vecs)
}

/// Normal, validity and dimensionality features of one neighbourhood.
/// `viewpoint` orients the normal so that `n · (viewpoint - p) >= 0`.
pub fn local_surface(points: &[Vec3], neighborhood: &[usize], at: &Vec3, viewpoint: &Vec3) -> LocalSurface {
    if neighborhood.len() < 3 {
        return LocalSurface::invalid();
    }
    let (vals, vecs) = neighborhood_eigen(points, neighborhood.iter().copied());
    let s1 = vals[0].sqrt();
    let s2 = vals[1].sqrt();
    let s3 = vals[2].sqrt();
    if s1 <= 0.0 || vals[1] <= 1e-12 * vals[0] {
        return LocalSurface::invalid();
    }
    let mut normal: Vec3 = vecs.column(2).into_owned();
    normal /= normal.norm();
    if normal.dot(&(viewpoint - at)) < 0.0 {
        normal = -normal;
    }
    LocalSurface {
        normal,
        valid: true,
        planarity: ((s2 - s3) / s1).clamp(0.0, 1.0),
        cylindricality: ((s1 - s2) / s1).clamp(0.0, 1.0),
    }
}

/// Per-point normals from the `k` nearest neighbours (the point itself
/// included), oriented toward `viewpoint`.
pub fn estimate_normals_from(cloud: &PointCloud, k: usize, viewpoint: &Vec3) -> Result<PointCloud> {
    if k < 3 {
        return Err(Error::invalid("k", "normal estimation needs k >= 3"));
    }
    if cloud.len() <= k {
        return Err(Error::invalid(
            "k",
            format!("cloud has {} points, need more than k = {k}", cloud.len()),
        ));
    }
    let index = build_index(cloud)?;
    let compute = |i: usize| {
        let nn: Vec<usize> = index
            .nearest(&cloud.points[i], k)
            .into_iter()
            .map(|n| n.index)
            .collect();
        local_surface(&cloud.points, &nn, &cloud.points[i], viewpoint)
    };
    let surfaces = crate::par::map_indexed(cloud.len(), compute);
    Ok(PointCloud {
        points: cloud.points.clone(),
        surfaces: Some(surfaces),
        frame: cloud.frame.clone(),
    })
}

/// Normals oriented toward the cloud frame origin (the sensor).
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    estimate_normals_from(cloud, k, &Vec3::zeros())
}

/// `⌈ratio · n⌉` points drawn without replacement, original order kept.
pub fn random_subsample(cloud: &PointCloud, ratio: f64, seed: u64) -> Result<PointCloud> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid("ratio", format!("{ratio} not in (0, 1]")));
    }
    let n = cloud.len();
    let keep = ((ratio * n as f64).ceil() as usize).min(n);
    if keep == n {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    Ok(cloud.select(&idx))
}

/// `k / volume(ball through the k-th neighbour)`, self excluded. Infinite for
/// coincident points; zero when the cloud has no more than `k` points.
pub fn local_densities(cloud: &PointCloud, index: &NeighborIndex, k: usize) -> Vec<f64> {
    if cloud.len() <= k {
        return vec![0.0; cloud.len()];
    }
    crate::par::map_indexed(cloud.len(), |i| {
        let nn = index.nearest(&cloud.points[i], k + 1);
        let r = nn[k].dist2.sqrt();
        let volume = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
        if volume > 0.0 {
            k as f64 / volume
        } else {
            f64::INFINITY
        }
    })
}

fn keep_hash(i: usize, round: u64) -> f64 {
    // splitmix64 of (index, round)
    let mut z = (i as u64) ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Thins regions whose estimated density exceeds `max_density` (points/m³).
///
/// Points above the limit survive with probability `max_density / density`
/// (deterministic per point index); the pass repeats on the survivors until
/// no point exceeds the limit, so the output is a fixed point of the filter.
/// Removing points only lowers densities, so sparse regions are untouched.
pub fn max_density_filter(cloud: &PointCloud, max_density: f64) -> Result<PointCloud> {
    if !(max_density > 0.0) {
        return Err(Error::invalid("max_density", "must be positive"));
    }
    let mut current = cloud.clone();
    // Track original indices so hashing is stable across rounds.
    let mut original: Vec<usize> = (0..cloud.len()).collect();
    for round in 0..64u64 {
        if current.len() <= DENSITY_NEIGHBORS {
            break;
        }
        let index = build_index(&current)?;
        let density = local_densities(&current, &index, DENSITY_NEIGHBORS);
        if density.iter().all(|&d| d <= max_density) {
            break;
        }
        let keep: Vec<usize> = (0..current.len())
            .filter(|&i| density[i] <= max_density || keep_hash(original[i], round) < max_density / density[i])
            .collect();
        original = keep.iter().map(|&i| original[i]).collect();
        current = current.select(&keep);
    }
    Ok(current)
}

/// Points mapped by `T`, normals rotated by `R` only.
pub fn transform_cloud(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        surfaces: cloud.surfaces.as_ref().map(|s| {
            s.iter()
                .map(|ls| LocalSurface {
                    normal: t.rotation * ls.normal,
                    ..*ls
                })
                .collect()
        }),
        frame: cloud.frame.clone(),
    }
}
